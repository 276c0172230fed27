"""Pre-norm transformer entropy model with a mixture-of-Gaussians head.

Inputs are integer c-vectors divided by ``delta`` and embedded with a shared
dense layer; masked slots take a learned mask vector instead. Every slot adds
a learned positional embedding looked up by grid cell. Attention accepts a
boolean mask (True = may attend) and an optional per-layer key/value cache
for group-incremental decoding.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .gmm import SIGMA_MAX, SIGMA_MIN, TAIL_EPS, GmmParams, bin_pmf, bin_pmf_torch, pmf_table
from .layout import M2TLayout


@dataclass
class ModelConfig:
    c: int = 2
    w_T: int = 16
    layers: int = 4
    width: int = 64
    heads: int = 4
    mlp_hidden: int = 256
    n_mixtures: int = 3
    delta: float = 5.0

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if min(self.c, self.w_T, self.layers, self.width, self.heads, self.mlp_hidden, self.n_mixtures) < 1:
            raise ValueError("all model dimensions must be positive")
        if self.delta <= 0:
            raise ValueError("delta must be positive")

    @classmethod
    def base(cls, c: int, w_T: int = 24) -> "ModelConfig":
        """ViT-B sized encoder (12 layers, width 768, 12 heads, MLP 3072)."""
        return cls(c=c, w_T=w_T, layers=12, width=768, heads=12, mlp_hidden=3072)

    @property
    def n_positions(self) -> int:
        return self.w_T * self.w_T

    def to_dict(self) -> dict:
        return asdict(self)


class MixtureOutput(NamedTuple):
    """Per-slot, per-channel mixture parameters as tensors of shape (..., c, N_M)."""

    means: torch.Tensor
    scales: torch.Tensor
    weights: torch.Tensor

    def to_numpy(self) -> GmmParams:
        return GmmParams(
            self.means.detach().double().cpu().numpy(),
            self.scales.detach().double().cpu().numpy(),
            self.weights.detach().double().cpu().numpy(),
        )

    def select(self, idx) -> "MixtureOutput":
        return MixtureOutput(self.means[idx], self.scales[idx], self.weights[idx])


class KvCache:
    """Append-only per-layer keys/values, shapes (B, heads, T, head_dim)."""

    def __init__(self, n_layers: int):
        self.keys: list[torch.Tensor | None] = [None] * n_layers
        self.values: list[torch.Tensor | None] = [None] * n_layers
        self.length = 0

    @property
    def n_layers(self) -> int:
        return len(self.keys)

    def fork(self) -> "KvCache":
        """Independent copy sharing the stored tensors; appends to it leave self untouched."""
        other = KvCache(self.n_layers)
        other.keys = list(self.keys)
        other.values = list(self.values)
        other.length = self.length
        return other

    def extend(self, layer: int, k: torch.Tensor, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if self.keys[layer] is not None:
            k = torch.cat([self.keys[layer], k], dim=2)
            v = torch.cat([self.values[layer], v], dim=2)
        self.keys[layer] = k
        self.values[layer] = v
        return k, v


class SelfAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x, mask=None, cache: KvCache | None = None, layer: int = 0):
        B, L, W = x.shape
        hd = W // self.heads
        q, k, v = self.qkv(x).view(B, L, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        if cache is not None:
            k, v = cache.extend(layer, k, v)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        if mask is not None:
            att = att.masked_fill(~mask, float("-inf"))
        out = torch.softmax(att, dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, L, W))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.width)
        self.attn = SelfAttention(cfg.width, cfg.heads)
        self.ln2 = nn.LayerNorm(cfg.width)
        self.mlp = nn.Sequential(nn.Linear(cfg.width, cfg.mlp_hidden), nn.GELU(), nn.Linear(cfg.mlp_hidden, cfg.width))

    def forward(self, x, mask=None, cache=None, layer=0):
        x = x + self.attn(self.ln1(x), mask, cache, layer)
        return x + self.mlp(self.ln2(x))


class MaskedTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Linear(cfg.c, cfg.width)
        self.mask_token = nn.Parameter(torch.zeros(cfg.width))
        self.pos = nn.Parameter(torch.zeros(cfg.n_positions, cfg.width))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(cfg.width)
        self.head = nn.Linear(cfg.width, 3 * cfg.n_mixtures * cfg.c)
        self.meta: dict = {}
        self.reset_parameters()

    def reset_parameters(self, seed: int | None = None):
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        for m in self.modules():
            if isinstance(m, nn.Linear):
                bound = 1.0 / math.sqrt(m.in_features)
                with torch.no_grad():
                    m.weight.uniform_(-bound, bound, generator=gen)
                    m.bias.zero_()
        with torch.no_grad():
            self.mask_token.normal_(0.0, 0.02, generator=gen)
            self.pos.normal_(0.0, 0.02, generator=gen)
            # per channel: [means | raw scales | weight logits], N_M each
            bias = self.head.bias.view(self.cfg.c, 3, self.cfg.n_mixtures)
            bias[:, 1, :] = math.log(math.expm1(1.0 - SIGMA_MIN))
            bias[:, 0, :] = torch.linspace(-0.5, 0.5, self.cfg.n_mixtures) if self.cfg.n_mixtures > 1 else 0.0
            self.head.weight.mul_(0.1)
        return self

    @property
    def dtype(self):
        return self.head.weight.dtype

    def embed_tokens(self, values, is_mask, positions) -> torch.Tensor:
        """values (B, L, c) real, is_mask (B, L) or (L,) bool, positions (B, L) or (L,) long."""
        values = torch.as_tensor(values, dtype=self.dtype)
        is_mask = torch.as_tensor(is_mask, dtype=torch.bool)
        positions = torch.as_tensor(positions, dtype=torch.long)
        tok = self.embed(values / self.cfg.delta)
        x = torch.where(is_mask.unsqueeze(-1), self.mask_token.expand_as(tok), tok)
        return x + self.pos[positions]

    def forward(self, values, is_mask, positions, attn_mask=None, cache: KvCache | None = None) -> MixtureOutput:
        x = self.embed_tokens(values, is_mask, positions)
        return self.forward_embedded(x, attn_mask, cache)

    def forward_embedded(self, x, attn_mask=None, cache: KvCache | None = None) -> MixtureOutput:
        L = x.shape[1]
        prefix = cache.length if cache is not None else 0
        if cache is not None and cache.n_layers != self.cfg.layers:
            raise ValueError(f"cache has {cache.n_layers} layers, model has {self.cfg.layers}")
        if attn_mask is not None:
            attn_mask = torch.as_tensor(attn_mask, dtype=torch.bool)
            if attn_mask.shape[-2:] != (L, prefix + L):
                raise ValueError(f"attention mask shape {tuple(attn_mask.shape)} != {(L, prefix + L)}")
        for i, blk in enumerate(self.blocks):
            x = blk(x, attn_mask, cache, i)
        if cache is not None:
            cache.length += L
        return self.head_params(self.head(self.ln_f(x)))

    def head_params(self, raw: torch.Tensor) -> MixtureOutput:
        raw = raw.view(*raw.shape[:-1], self.cfg.c, 3, self.cfg.n_mixtures)
        means = raw[..., 0, :]
        scales = torch.clamp(SIGMA_MIN + F.softplus(raw[..., 1, :]), max=SIGMA_MAX)
        weights = torch.softmax(raw[..., 2, :], dim=-1)
        return MixtureOutput(means, scales, weights)

    def new_cache(self) -> KvCache:
        return KvCache(self.cfg.layers)


# -- likelihoods ---------------------------------------------------------------

def _bits(params, y, eps=TAIL_EPS):
    if isinstance(params, GmmParams):
        p = bin_pmf(params, np.asarray(y, dtype=np.float64), eps)
        return -np.log2(np.maximum(p, 1e-300))
    p = bin_pmf_torch(params.means, params.scales, params.weights, y, eps)
    return -torch.log2(torch.clamp(p, min=1e-30))


def nll_mt(y_tile, mask, params):
    """Bits for the masked positions of a tile.

    y_tile (..., L, c); mask (..., L) bool; params per position (..., L, c, N_M),
    torch (differentiable) or numpy GmmParams.
    """
    bits = _bits(params, y_tile)
    if isinstance(bits, np.ndarray):
        return float((bits.sum(-1) * np.asarray(mask, dtype=bool)).sum())
    return (bits.sum(-1) * torch.as_tensor(mask, dtype=bits.dtype)).sum()


def nll_m2t(y_tile, layout: M2TLayout, params):
    """Bits for all tokens, with params given in output-slot (target permutation) order."""
    if isinstance(params, GmmParams):
        targets = np.take(np.asarray(y_tile), layout.target_perm, axis=-2)
        return float(_bits(params, targets).sum())
    y_tile = torch.as_tensor(y_tile, dtype=params.means.dtype)
    targets = y_tile[..., torch.as_tensor(layout.target_perm), :]
    return _bits(params, targets).sum()


def mt_forward(model: MaskedTransformer, y, mask) -> MixtureOutput:
    """One MT pass: positions in ``mask`` replaced by the mask token."""
    L = model.cfg.n_positions
    return model(y, mask, torch.arange(L))


def m2t_forward(model: MaskedTransformer, y, layout: M2TLayout) -> MixtureOutput:
    """Single teacher-forced pass under the block-triangular mask; outputs in target order."""
    y = torch.as_tensor(y, dtype=model.dtype)
    vals = y[..., torch.as_tensor(np.where(layout.input_slots < 0, 0, layout.input_slots)), :]
    is_pad = torch.as_tensor(layout.input_slots < 0)
    return model(vals, is_pad.expand(vals.shape[:-1]), torch.as_tensor(layout.slot_positions), torch.as_tensor(layout.attn_mask))


@torch.no_grad()
def m2t_incremental(model: MaskedTransformer, y, layout: M2TLayout) -> MixtureOutput:
    """Group-by-group cached passes over a fixed layout; outputs in target order.

    Each call feeds one input group and attends to everything cached so far,
    which is what the block mask allows in the single pass.
    """
    y = torch.as_tensor(y, dtype=model.dtype)
    cache = model.new_cache()
    outs = []
    for a, b in layout.bounds:
        slots = layout.input_slots[a:b]
        vals = y[..., torch.as_tensor(np.where(slots < 0, 0, slots)), :]
        is_pad = torch.as_tensor(slots < 0).expand(vals.shape[:-1])
        outs.append(model(vals, is_pad, torch.as_tensor(layout.slot_positions[a:b]), None, cache))
    return MixtureOutput(*(torch.cat([getattr(o, f) for o in outs], dim=-3) for f in MixtureOutput._fields))


def mt_loss(model, y, mask, noise: torch.Tensor | None = None):
    """MT loss in bits over the masked positions; noise (if given) is added to target and visible context."""
    y = torch.as_tensor(y, dtype=model.dtype)
    if noise is not None:
        y = y + noise
    return nll_mt(y, mask, mt_forward(model, y, mask))


def m2t_loss(model, y, layout: M2TLayout, noise: torch.Tensor | None = None):
    y = torch.as_tensor(y, dtype=model.dtype)
    if noise is not None:
        y = y + noise
    return nll_m2t(y, layout, m2t_forward(model, y, layout))


# -- training ------------------------------------------------------------------

def random_mt_masks(batch: int, L: int, rng: np.random.Generator, lo: float = 0.05, hi: float = 0.99) -> np.ndarray:
    ratio = rng.uniform(lo, hi, size=batch)
    counts = np.clip(np.rint(ratio * L).astype(int), 1, L)
    scores = rng.random((batch, L))
    ranks = np.argsort(np.argsort(scores, axis=1), axis=1)
    return ranks < counts[:, None]


@dataclass
class TrainReport:
    losses: list[float]
    steps: int
    mode: str

    @property
    def first(self) -> float:
        k = max(1, len(self.losses) // 10)
        return float(np.mean(self.losses[:k]))

    @property
    def last(self) -> float:
        k = max(1, len(self.losses) // 10)
        return float(np.mean(self.losses[-k:]))


def train(
    model: MaskedTransformer,
    source,
    steps: int,
    lr: float = 1e-3,
    mode: str = "mt",
    batch_size: int = 16,
    layout: M2TLayout | None = None,
    seed: int = 0,
    noise: bool = True,
    log: Callable[[int, float], None] | None = None,
) -> TrainReport:
    """Fit ``model`` in place on tiles drawn from ``source.sample(batch, rng)``.

    The loss is bits per token (per tile position) so learning rates do not
    depend on tile size. ``mode="m2t"`` needs the fixed ``layout`` used at
    inference. Raises FloatingPointError if the loss turns non-finite.
    """
    if mode not in ("mt", "m2t"):
        raise ValueError(f"mode must be 'mt' or 'm2t', got {mode!r}")
    if mode == "m2t" and layout is None:
        raise ValueError("m2t training needs a layout")
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(steps, 1), eta_min=lr * 0.05)
    L = model.cfg.n_positions
    losses = []
    model.train()
    for step in range(steps):
        y = torch.as_tensor(source.sample(batch_size, rng).reshape(batch_size, L, -1), dtype=model.dtype)
        u = torch.rand(y.shape, dtype=model.dtype) - 0.5 if noise else None
        if mode == "mt":
            mask = torch.as_tensor(random_mt_masks(batch_size, L, rng))
            loss = mt_loss(model, y, mask, u) / mask.sum()
        else:
            loss = m2t_loss(model, y, layout, u) / (batch_size * L)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"loss diverged at step {step}: {loss.item()}")
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        sched.step()
        losses.append(loss.item())
        if log is not None:
            log(step, losses[-1])
    model.eval()
    return TrainReport(losses, steps, mode)


def grad_check(model: MaskedTransformer, loss_fn: Callable[[MaskedTransformer], torch.Tensor], eps: float = 1e-4,
               n_params: int = 50, seed: int = 0) -> float:
    """Max relative error between autograd and central differences.

    Runs in float64 on ``n_params`` randomly chosen scalar parameters. The
    relative error is |a - n| / max(|a|, |n|, 1e-7).
    """
    model = model.double()
    model.zero_grad()
    loss_fn(model).backward()
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    sizes = np.array([p.numel() for _, p in named])
    rng = np.random.default_rng(seed)
    flat_choice = rng.choice(sizes.sum(), size=min(n_params, int(sizes.sum())), replace=False)
    offsets = np.cumsum(np.concatenate([[0], sizes]))
    worst = 0.0
    with torch.no_grad():
        for f in flat_choice:
            k = int(np.searchsorted(offsets, f, side="right") - 1)
            p = named[k][1]
            idx = int(f - offsets[k])
            analytic = p.grad.view(-1)[idx].item()
            orig = p.view(-1)[idx].item()
            p.view(-1)[idx] = orig + eps
            up = loss_fn(model).item()
            p.view(-1)[idx] = orig - eps
            down = loss_fn(model).item()
            p.view(-1)[idx] = orig
            numeric = (up - down) / (2 * eps)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-7)
            worst = max(worst, rel)
    return worst


# -- sampling ------------------------------------------------------------------

def sample_pmf(params: GmmParams, lo: int, hi: int, rng: np.random.Generator) -> np.ndarray:
    """Draw one integer per leading index from the binned PMF over [lo, hi]."""
    p = pmf_table(params, lo, hi)
    p = p / p.sum(-1, keepdims=True)
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(cdf.shape[:-1] + (1,))
    idx = np.minimum((u > cdf).sum(-1), cdf.shape[-1] - 1)
    return idx + lo


@torch.no_grad()
def sample_completion(model: MaskedTransformer, known, known_mask, rng: np.random.Generator,
                      support: tuple[int, int]) -> np.ndarray:
    """Fill unknown positions of a tile by sampling each channel from its PMF.

    known (L, c) ints (unknown entries ignored), known_mask (L,) bool. Returns (L, c).
    """
    known = np.asarray(known)
    known_mask = np.asarray(known_mask, dtype=bool)
    params = mt_forward(model, known[None], ~known_mask[None]).to_numpy()[0]
    out = known.copy()
    miss = ~known_mask
    if miss.any():
        out[miss] = sample_pmf(params[miss], support[0], support[1], rng)
    return out


# -- checkpoints ---------------------------------------------------------------
#
# b"M2TC" | version u8 | json_len u32 | JSON {"config": ..., "meta": ...} | n_tensors u32 |
# per tensor: name_len u16 | name (utf-8) | ndim u8 | dims u32 * ndim | float32 LE data

CKPT_MAGIC = b"M2TC"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def model_to_bytes(model: MaskedTransformer) -> bytes:
    """Serialize weights, config and ``model.meta`` (training path/schedule, free-form)."""
    doc = {"config": model.cfg.to_dict(), "meta": getattr(model, "meta", {})}
    cfg = json.dumps(doc, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<BI", CKPT_VERSION, len(cfg)), cfg]
    state = model.state_dict()
    parts.append(struct.pack("<I", len(state)))
    for name, t in state.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        nb = name.encode()
        parts.append(struct.pack(f"<H{len(nb)}sB{arr.ndim}I", len(nb), nb, arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def model_from_bytes(data: bytes) -> MaskedTransformer:
    try:
        if data[:4] != CKPT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {data[:4]!r}")
        version, n = struct.unpack_from("<BI", data, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 9
        doc = json.loads(data[off : off + n].decode())
        cfg = ModelConfig(**doc["config"])
        off += n
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        state = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + ln].decode()
            off += ln
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            size = int(np.prod(shape)) * 4
            if off + size > len(data):
                raise CheckpointError(f"truncated tensor {name!r}")
            state[name] = torch.from_numpy(np.frombuffer(data, dtype="<f4", count=size // 4, offset=off).reshape(shape).copy())
            off += size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, TypeError, KeyError) as e:
        raise CheckpointError(f"malformed checkpoint: {e}") from e
    if off != len(data):
        raise CheckpointError("trailing bytes after checkpoint")
    model = MaskedTransformer(cfg)
    model.meta = dict(doc.get("meta", {}))
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise CheckpointError(str(e)) from e
    return model.eval()


def save_model(model: MaskedTransformer, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> MaskedTransformer:
    return model_from_bytes(Path(path).read_bytes())
