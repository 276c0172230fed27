"""Lossless coding of integer token grids with masked-transformer entropy models."""
from .coder import Bitstream, decode_grid, encode_grid
from .estimator import MaskedTransformerCodec
from .grid import TokenGrid, read_grid, tile, untile, write_grid
from .layout import M2TLayout, build_layout
from .net import MaskedTransformer, ModelConfig, load_model, save_model
from .sched import MaskSchedule, group_sizes, make_schedule

__all__ = [
    "Bitstream",
    "M2TLayout",
    "MaskSchedule",
    "MaskedTransformer",
    "MaskedTransformerCodec",
    "ModelConfig",
    "TokenGrid",
    "build_layout",
    "decode_grid",
    "encode_grid",
    "group_sizes",
    "load_model",
    "make_schedule",
    "read_grid",
    "save_model",
    "tile",
    "untile",
    "write_grid",
]
__version__ = "0.1.0"
