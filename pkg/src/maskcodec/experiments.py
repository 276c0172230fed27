"""Schedule sweeps, MT vs M2T timing, and per-step completion samples."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .coder import decode_grid_with_stats, encode_grid
from .grid import TokenGrid
from .net import MaskedTransformer, mt_forward, nll_mt, sample_completion
from .sched import MaskSchedule


@dataclass
class RunReport:
    kind: str
    S: int
    alpha: float
    path: str
    tokens: int
    tiles: int
    bits_per_token: float
    nll_bits: float
    coded_bits: int
    tokens_in_per_tile: float
    probe_tokens_per_tile: float
    encode_seconds: float = 0.0
    decode_seconds: float = 0.0

    def row(self) -> dict:
        return asdict(self)


def evaluate(model: MaskedTransformer, grids: list[TokenGrid], kind: str, S: int, alpha: float, path: str = "mt",
             seed: int = 0, decode: bool = False, threads: int = 1) -> RunReport:
    nll, coded, tokens, tiles, tin, probe = 0.0, 0, 0, 0, 0, 0
    t_enc = t_dec = 0.0
    for g in grids:
        t0 = time.perf_counter()
        bs = encode_grid(g, model, kind, S, alpha, seed, path, threads=threads)
        t_enc += time.perf_counter() - t0
        st = bs.stats
        nll += st.total_nll
        coded += bs.payload_bits
        tokens += g.h * g.w
        tiles += bs.tile_count
        tin += sum(st.tokens_in)
        probe += sum(st.probe_tokens)
        if decode:
            t0 = time.perf_counter()
            out, _ = decode_grid_with_stats(bs.to_bytes(), model, threads)
            t_dec += time.perf_counter() - t0
            if out != g:
                raise RuntimeError("decoded grid differs from the source")
    return RunReport(kind, S, float(alpha), path, tokens, tiles, coded / tokens, nll, coded, tin / tiles,
                     probe / tiles, t_enc, t_dec)


def sweep(model: MaskedTransformer, grids: list[TokenGrid], alphas, steps, kinds, path: str = "mt",
          seed: int = 0) -> list[RunReport]:
    """One report per (alpha, S, kind), all with the same model weights."""
    return [evaluate(model, grids, kind, S, a, path, seed) for a in alphas for S in steps for kind in kinds]


def bench(model: MaskedTransformer, grid: TokenGrid, steps, kind: str = "qlds", alpha: float = 2.2, seed: int = 0,
          repeats: int = 3) -> list[RunReport]:
    """MT and M2T encode/decode wall time (best of ``repeats``) per S."""
    out = []
    for S in steps:
        for path in ("mt", "m2t"):
            best = None
            for _ in range(repeats):
                r = evaluate(model, [grid], kind, S, alpha, path, seed, decode=True)
                if best is None or r.decode_seconds < best.decode_seconds:
                    best = r
            out.append(best)
    return out


@torch.no_grad()
def completion_samples(model: MaskedTransformer, tile_values: np.ndarray, schedule: MaskSchedule, n_samples: int,
                       rng: np.random.Generator, support: tuple[int, int]) -> list[dict]:
    """Per step: bits to send that step's group, and the mean of ``n_samples`` completions.

    Rows are long-format: one per (step, cell, channel). Needs a fixed-location schedule.
    """
    if schedule.groups is None:
        raise ValueError("completion samples need a fixed-location schedule")
    L = schedule.n_positions
    y = np.asarray(tile_values).reshape(L, -1)
    known = np.zeros(L, dtype=bool)
    rows = []
    for step, group in enumerate(schedule.groups, start=1):
        masked = ~known
        params = mt_forward(model, torch.as_tensor(y[None], dtype=model.dtype), torch.as_tensor(masked[None])).to_numpy()[0]
        gm = np.zeros(L, dtype=bool)
        gm[group] = True
        bits = nll_mt(y, gm, params)
        known[group] = True
        draws = np.stack([sample_completion(model, y, known, rng, support) for _ in range(n_samples)])
        mean = draws.mean(0)
        for cell in range(L):
            for ch in range(y.shape[1]):
                rows.append({"step": step, "row": cell // schedule.w_T, "col": cell % schedule.w_T, "channel": ch,
                             "known": int(known[cell]), "mean": float(mean[cell, ch]), "step_bits": bits})
    return rows
