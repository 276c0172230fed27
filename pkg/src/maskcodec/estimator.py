"""scikit-learn style front end: fit an entropy model, transform grids to bitstreams."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .coder import PATHS, Bitstream, CodingStats, decode_grid, encode_grid
from .grid import TokenGrid, tile
from .layout import build_layout
from .net import MaskedTransformer, ModelConfig, TrainReport, train
from .sched import KINDS, make_schedule


def check_grid(X, c: int | None = None) -> TokenGrid:
    """Coerce one grid (TokenGrid or integer array (h, w[, c])) and check its channels."""
    grid = X if isinstance(X, TokenGrid) else TokenGrid(np.asarray(X))
    if c is not None and grid.c != c:
        raise ValueError(f"grid has {grid.c} channels, expected {c}")
    return grid


def check_grids(X, c: int | None = None) -> list[TokenGrid]:
    """Coerce a grid, a list of grids, or a stacked array (n, h, w, c) to a list."""
    if isinstance(X, TokenGrid):
        return [check_grid(X, c)]
    if isinstance(X, np.ndarray):
        if X.ndim == 4:
            return [check_grid(x, c) for x in X]
        return [check_grid(X, c)]
    grids = [check_grid(x, c) for x in X]
    if not grids:
        raise ValueError("no grids given")
    return grids


class TilePool:
    """Training source drawing random w_T x w_T tiles from a fixed set of grids."""

    def __init__(self, grids: list[TokenGrid], w_T: int):
        self.tiles = np.concatenate([tile(g, w_T).tiles for g in grids], axis=0)
        self.w_T = w_T

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.tiles[rng.integers(0, len(self.tiles), size=n)]


class MaskedTransformerCodec(BaseEstimator):
    """Lossless codec for integer token grids with a masked-transformer entropy model.

    Parameters
    ----------
    w_T : int
        Tile side; the transformer sees w_T**2 tokens at a time.
    path : {"mt", "m2t"}
        Full-length masked passes (MT) or group-causal cached passes (M2T).
        Also selects the training loss.
    kind : {"qlds", "random", "entropy"}
        Location schedule.
    steps, alpha : int, float
        Number of coding steps S and the power of the group-size schedule.
    seed : int
        Seed of the random location schedule.
    layers, width, heads, mlp_hidden, n_mixtures, delta
        Transformer and output-head sizes.
    max_iter, learning_rate, batch_size
        Training loop settings.
    precision : int
        Range-coder frequency precision in bits.
    random_state : int
        Seeds weight init and training batches.
    """

    def __init__(self, w_T=16, path="mt", kind="qlds", steps=12, alpha=2.2, seed=0, layers=4, width=64, heads=4,
                 mlp_hidden=256, n_mixtures=3, delta=5.0, max_iter=1000, learning_rate=1e-3, batch_size=16,
                 precision=16, threads=1, random_state=0):
        self.w_T = w_T
        self.path = path
        self.kind = kind
        self.steps = steps
        self.alpha = alpha
        self.seed = seed
        self.layers = layers
        self.width = width
        self.heads = heads
        self.mlp_hidden = mlp_hidden
        self.n_mixtures = n_mixtures
        self.delta = delta
        self.max_iter = max_iter
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.precision = precision
        self.threads = threads
        self.random_state = random_state

    def _validate_params(self):
        if self.path not in PATHS:
            raise ValueError(f"path must be one of {PATHS}, got {self.path!r}")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.path == "m2t" and self.alpha < 1:
            raise ValueError("M2T requires alpha >= 1")
        make_schedule("random", self.steps, self.alpha, self.w_T)  # validates S and alpha

    def _new_model(self, c: int) -> MaskedTransformer:
        cfg = ModelConfig(c=c, w_T=self.w_T, layers=self.layers, width=self.width, heads=self.heads,
                          mlp_hidden=self.mlp_hidden, n_mixtures=self.n_mixtures, delta=self.delta)
        torch.manual_seed(self.random_state)
        return MaskedTransformer(cfg).reset_parameters(self.random_state)

    def _train_layout(self):
        # entropy schedules are data dependent; M2T then trains on the QLDS order
        kind = "qlds" if self.kind == "entropy" else self.kind
        return build_layout(make_schedule(kind, self.steps, self.alpha, self.w_T, self.seed))

    def fit(self, X, y=None):
        """Train on tiles of the grids in X (or on any object with ``sample(n, rng)``)."""
        self._validate_params()
        if hasattr(X, "sample"):
            source, c = X, int(X.sample(1, np.random.default_rng(0)).shape[-1])
        else:
            grids = check_grids(X)
            c = grids[0].c
            check_grids(grids, c)
            source = TilePool(grids, self.w_T)
        model = self._new_model(c)
        layout = self._train_layout() if self.path == "m2t" else None
        self.train_report_: TrainReport = train(model, source, self.max_iter, self.learning_rate, self.path,
                                                self.batch_size, layout, seed=self.random_state)
        model.meta = {"path": self.path, "kind": self.kind, "S": self.steps, "alpha": self.alpha, "seed": self.seed}
        self.model_ = model
        self.n_channels_ = c
        return self

    @classmethod
    def from_model(cls, model: MaskedTransformer, **params) -> "MaskedTransformerCodec":
        """Wrap an already trained model (e.g. loaded from a checkpoint)."""
        meta = getattr(model, "meta", {})
        defaults = {"path": meta.get("path", "mt"), "kind": meta.get("kind", "qlds"), "steps": meta.get("S", 12),
                    "alpha": meta.get("alpha", 2.2), "seed": meta.get("seed", 0)}
        cfg = model.cfg
        est = cls(w_T=cfg.w_T, layers=cfg.layers, width=cfg.width, heads=cfg.heads, mlp_hidden=cfg.mlp_hidden,
                  n_mixtures=cfg.n_mixtures, delta=cfg.delta, **{**defaults, **params})
        est.model_ = model.eval()
        est.n_channels_ = cfg.c
        return est

    def encode(self, grid) -> Bitstream:
        check_is_fitted(self, "model_")
        grid = check_grid(grid, self.n_channels_)
        return encode_grid(grid, self.model_, self.kind, self.steps, self.alpha, self.seed, self.path,
                           self.precision, self.threads)

    def transform(self, X) -> list[bytes]:
        """Bitstreams (bytes) for each grid in X."""
        return [self.encode(g).to_bytes() for g in check_grids(X, getattr(self, "n_channels_", None))]

    def inverse_transform(self, X) -> list[TokenGrid]:
        check_is_fitted(self, "model_")
        if isinstance(X, (bytes, bytearray, Bitstream)):
            X = [X]
        return [decode_grid(b, self.model_, self.threads) for b in X]

    def coding_stats(self, X) -> CodingStats:
        stats = CodingStats()
        for g in check_grids(X, getattr(self, "n_channels_", None)):
            stats.merge(self.encode(g).stats)
        return stats

    def bits_per_token(self, X) -> float:
        """Coded payload bits divided by the number of (unpadded) tokens."""
        grids = check_grids(X, getattr(self, "n_channels_", None))
        bits = sum(self.encode(g).payload_bits for g in grids)
        return bits / sum(g.h * g.w for g in grids)

    def score(self, X, y=None) -> float:
        """Negative bits per token, so that larger is better."""
        return -self.bits_per_token(X)
