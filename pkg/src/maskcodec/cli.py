"""Command line entry point ``maskcodec``.

Exit codes: 0 ok, 2 usage, 3 malformed file, 4 contract violation.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .coder import BitstreamError, decode_grid_with_stats, encode_grid
from .grid import GridFormatError, read_grid, tile, write_grid
from .layout import PAD, build_layout
from .net import CheckpointError, load_model, save_model
from .qlds import qlds_order
from .rangecoder import RangeCoderError
from .sched import KINDS, make_schedule, power_cumulative
from .synthetic import GaussMarkovSource

log = logging.getLogger("maskcodec")

EXIT_FORMAT = 3
EXIT_CONTRACT = 4


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x]


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x]


class _Out:
    def __init__(self, path):
        self.path = path

    def __enter__(self):
        self.f = open(self.path, "w", newline="") if self.path else sys.stdout
        return self.f

    def __exit__(self, *exc):
        if self.path:
            self.f.close()


def _write_rows(rows: list[dict], out) -> None:
    with _Out(out) as f:
        if not rows:
            return
        w = csv.DictWriter(f, fieldnames=list(rows[0].keys()), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _coding_args(p, model_defaults: bool = True):
    p.add_argument("--kind", choices=KINDS, default=None if model_defaults else "qlds")
    p.add_argument("--steps", type=int, default=None if model_defaults else 12, help="number of coding steps S")
    p.add_argument("--alpha", type=float, default=None if model_defaults else 2.2)
    p.add_argument("--seed", type=int, default=None if model_defaults else 0)
    p.add_argument("--path", choices=("mt", "m2t"), default=None if model_defaults else "mt")


def _resolve(args, model) -> dict:
    meta = getattr(model, "meta", {})
    pick = lambda name, key, default: getattr(args, name) if getattr(args, name) is not None else meta.get(key, default)
    return {"kind": pick("kind", "kind", "qlds"), "S": pick("steps", "S", 12), "alpha": pick("alpha", "alpha", 2.2),
            "seed": pick("seed", "seed", 0), "path": pick("path", "path", "mt")}


# -- subcommands -----------------------------------------------------------------

def cmd_gen(args):
    src = GaussMarkovSource(c=args.c, rho=args.rho, sigma=args.sigma)
    grid = src.grid(args.h, args.w, np.random.default_rng(args.seed))
    write_grid(grid, args.out)


def cmd_schedule(args):
    if args.what == "curve":
        total = args.w_T * args.w_T
        rows = []
        for a in _floats(args.alphas) if args.alphas else [args.alpha]:
            cum = [0] + power_cumulative(args.steps, a, total)
            for i, v in enumerate(cum):
                rows.append({"alpha": a, "step": i, "cumulative": v, "fraction": v / total})
        return _write_rows(rows, args.out)
    sch = make_schedule(args.kind, args.steps, args.alpha, args.w_T, args.seed)
    rows, cum = [], 0
    for i, size in enumerate(sch.sizes.sizes, start=1):
        cum += size
        pos = "" if sch.groups is None else " ".join(map(str, sch.groups[i - 1].tolist()))
        rows.append({"step": i, "size": size, "cumulative": cum, "positions": pos})
    _write_rows(rows, args.out)


def cmd_qlds(args):
    order = qlds_order(args.w_T)
    if args.what == "order":
        rows = [{"index": i, "row": r, "col": c} for i, (r, c) in enumerate(order.cells)]
        log.info("K=%d raw points cover the %dx%d tile", order.K, args.w_T, args.w_T)
        return _write_rows(rows, args.out)
    sch = make_schedule("qlds", args.steps, args.alpha, args.w_T)
    covered = np.zeros(args.w_T * args.w_T, dtype=int)
    rows = []
    for i, g in enumerate(sch.groups, start=1):
        covered[g] = i
        for cell in range(covered.size):
            rows.append({"step": i, "row": cell // args.w_T, "col": cell % args.w_T, "uncovered_at": int(covered[cell])})
    _write_rows(rows, args.out)


def cmd_layout(args):
    lay = build_layout(make_schedule(args.kind, args.steps, args.alpha, args.w_T, args.seed))
    if args.what == "mask":
        with _Out(args.out) as f:
            for row in lay.attn_mask.astype(int):
                f.write(",".join(map(str, row.tolist())) + "\n")
        return
    groups = lay.group_of_slot
    rows = [{"slot": t, "group": int(groups[t]) + 1, "input": "pad" if lay.input_slots[t] == PAD else "token",
             "input_cell": "" if lay.input_slots[t] == PAD else int(lay.input_slots[t]),
             "positional_index": int(lay.slot_positions[t]), "target_cell": int(lay.target_perm[t])}
            for t in range(lay.length)]
    _write_rows(rows, args.out)


def cmd_train(args):
    from .estimator import MaskedTransformerCodec

    codec = MaskedTransformerCodec(w_T=args.w_T, path=args.path, kind=args.kind, steps=args.steps, alpha=args.alpha,
                                   seed=args.seed, layers=args.layers, width=args.width, heads=args.heads,
                                   mlp_hidden=args.mlp_hidden, max_iter=args.iters, learning_rate=args.lr,
                                   batch_size=args.batch_size, random_state=args.random_state)
    if args.grids:
        source = [read_grid(p) for p in args.grids]
    else:
        source = GaussMarkovSource(c=args.c, w_T=args.w_T, rho=args.rho, sigma=args.sigma)
    codec.fit(source)
    rep = codec.train_report_
    log.info("trained %d iterations: loss %.4f -> %.4f bits/token", rep.steps, rep.first, rep.last)
    save_model(codec.model_, args.model)
    if args.loss_csv:
        _write_rows([{"iteration": i, "loss": l} for i, l in enumerate(rep.losses)], args.loss_csv)


def cmd_encode(args):
    model = load_model(args.model)
    grid = read_grid(args.input)
    opts = _resolve(args, model)
    bs = encode_grid(grid, model, opts["kind"], opts["S"], opts["alpha"], opts["seed"], opts["path"],
                     args.precision, args.threads)
    Path(args.out).write_bytes(bs.to_bytes())
    st = bs.stats
    _write_rows([{"path": bs.path, "kind": bs.kind, "S": bs.S, "alpha": bs.alpha, "tiles": bs.tile_count,
                  "tokens": grid.h * grid.w, "bits_per_token": bs.payload_bits / (grid.h * grid.w),
                  "coded_bits": bs.payload_bits, "nll_bits": round(st.total_nll, 3),
                  "tokens_in_per_tile": sum(st.tokens_in) / bs.tile_count,
                  "model_seconds": round(st.seconds_model, 4), "coding_seconds": round(st.seconds_coding, 4)}],
                args.report)


def cmd_decode(args):
    model = load_model(args.model)
    grid, _ = decode_grid_with_stats(Path(args.input).read_bytes(), model, args.threads)
    write_grid(grid, args.out)


def _grids_from(args, c: int):
    if args.grids:
        return [read_grid(p) for p in args.grids]
    src = GaussMarkovSource(c=c, rho=args.rho, sigma=args.sigma)
    rng = np.random.default_rng(args.data_seed)
    return [src.grid(args.size, args.size, rng) for _ in range(args.n_grids)]


def cmd_sweep(args):
    from .experiments import sweep

    model = load_model(args.model)
    grids = _grids_from(args, model.cfg.c)
    path = args.path or getattr(model, "meta", {}).get("path", "mt")
    reps = sweep(model, grids, _floats(args.alphas), _ints(args.steps_list), args.kinds.split(","), path, args.seed)
    _write_rows([r.row() for r in reps], args.out)


def cmd_bench(args):
    from .experiments import bench

    model = load_model(args.model)
    grid = _grids_from(args, model.cfg.c)[0]
    reps = bench(model, grid, _ints(args.steps_list), args.kind, args.alpha, args.seed, args.repeats)
    _write_rows([r.row() for r in reps], args.out)


def cmd_sample(args):
    from .experiments import completion_samples

    model = load_model(args.model)
    grid = read_grid(args.input)
    ts = tile(grid, model.cfg.w_T)
    sch = make_schedule(args.kind, args.steps, args.alpha, model.cfg.w_T, args.seed)
    rows = completion_samples(model, ts.flat()[args.tile], sch, args.n_samples, np.random.default_rng(args.seed),
                              (grid.ymin, grid.ymax))
    _write_rows(rows, args.out)


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maskcodec", description="Masked-transformer lossless codec for token grids")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    add = lambda name, **kw: sub.add_parser(name, parents=[common], **kw)

    s = add("gen", help="write a synthetic Gauss-Markov grid")
    s.add_argument("--h", type=int, required=True)
    s.add_argument("--w", type=int, required=True)
    s.add_argument("--c", type=int, default=2)
    s.add_argument("--rho", type=float, default=0.9)
    s.add_argument("--sigma", type=float, default=3.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen)

    s = add("schedule", help="emit a masking schedule or cumulative-uncover curves as CSV")
    s.add_argument("--w_T", type=int, default=16)
    _coding_args(s, model_defaults=False)
    s.add_argument("--what", choices=("groups", "curve"), default="groups")
    s.add_argument("--alphas", default="", help="comma list for --what curve")
    s.add_argument("--out")
    s.set_defaults(func=cmd_schedule)

    s = add("qlds", help="emit the quantized LDS order or per-step coverage maps")
    s.add_argument("--w_T", type=int, default=16)
    s.add_argument("--steps", type=int, default=8)
    s.add_argument("--alpha", type=float, default=2.2)
    s.add_argument("--what", choices=("order", "coverage"), default="order")
    s.add_argument("--out")
    s.set_defaults(func=cmd_qlds)

    s = add("layout", help="emit the M2T slot table or attention mask")
    s.add_argument("--w_T", type=int, default=4)
    _coding_args(s, model_defaults=False)
    s.add_argument("--what", choices=("slots", "mask"), default="slots")
    s.add_argument("--out")
    s.set_defaults(func=cmd_layout)

    s = add("train", help="train an entropy model and write a checkpoint")
    s.add_argument("--model", required=True, help="output checkpoint path")
    s.add_argument("--w_T", type=int, default=16)
    s.add_argument("--c", type=int, default=2)
    _coding_args(s, model_defaults=False)
    s.add_argument("--layers", type=int, default=4)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--heads", type=int, default=4)
    s.add_argument("--mlp_hidden", type=int, default=256)
    s.add_argument("--iters", type=int, default=2000)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--batch_size", type=int, default=16)
    s.add_argument("--random_state", type=int, default=0)
    s.add_argument("--rho", type=float, default=0.9)
    s.add_argument("--sigma", type=float, default=3.0)
    s.add_argument("--grids", nargs="*", help="train on these grid files instead of synthetic data")
    s.add_argument("--loss_csv")
    s.set_defaults(func=cmd_train)

    s = add("encode", help="compress a grid file")
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    _coding_args(s)
    s.add_argument("--precision", type=int, default=16)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--report", help="CSV report path (default stdout)")
    s.set_defaults(func=cmd_encode)

    s = add("decode", help="decompress a bitstream to a grid file")
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_decode)

    for name, fn, helptext in (("sweep", cmd_sweep, "bits/token of one model under many schedules"),
                               ("bench", cmd_bench, "MT vs M2T wall time and token counts")):
        s = add(name, help=helptext)
        s.add_argument("--model", required=True)
        s.add_argument("--grids", nargs="*")
        s.add_argument("--n_grids", type=int, default=4)
        s.add_argument("--size", type=int, default=48)
        s.add_argument("--rho", type=float, default=0.9)
        s.add_argument("--sigma", type=float, default=3.0)
        s.add_argument("--data_seed", type=int, default=1)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--steps_list", default="2,4,8,12")
        s.add_argument("--out")
        if name == "sweep":
            s.add_argument("--alphas", default="1,1.5,2.2,3")
            s.add_argument("--kinds", default="random,entropy,qlds")
            s.add_argument("--path", choices=("mt", "m2t"))
        else:
            s.add_argument("--kind", choices=KINDS, default="qlds")
            s.add_argument("--alpha", type=float, default=2.2)
            s.add_argument("--repeats", type=int, default=3)
        s.set_defaults(func=fn)

    s = add("sample", help="per-step mean of sampled completions for one tile")
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--tile", type=int, default=0)
    s.add_argument("--n_samples", type=int, default=50)
    _coding_args(s, model_defaults=False)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sample)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (GridFormatError, BitstreamError, CheckpointError) as e:
        print(f"maskcodec: format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except (ValueError, RangeCoderError, IndexError) as e:
        print(f"maskcodec: {e}", file=sys.stderr)
        return EXIT_CONTRACT
    except FileNotFoundError as e:
        print(f"maskcodec: {e}", file=sys.stderr)
        return EXIT_CONTRACT
    return 0


if __name__ == "__main__":
    sys.exit(main())
