"""Command-line pipeline: compile, evaluate, sweep, share, reconstruct.

Every subcommand is a thin wrapper over the library.  Exit codes follow the
exception hierarchy: 0 success, 2 bad input or structure, 3 expansion too
large, 4 field overflow, 5 share-file mismatch.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .approx import (
    FLOOR_RADIUS,
    PERCENTILE,
    SAFETY,
    SQRT_DEGREE,
    calibrate_intervals,
)
from .compiler import (
    POOL_MODES,
    SOFTMAX_MODES,
    TERM_CAP,
    compile_nested,
    compile_report_rows,
    eval_nested_batch,
    expand,
    insert_pseudo_units,
    load_program,
    op_counts,
    save_program,
)
from .errors import PolyDnnError, ValidationError
from .mpc import (
    DEFAULT_FIELD_BITS,
    DEFAULT_FRAC_BITS,
    deal_program,
    params_for_bits,
    party_eval_public_input,
    read_output_shares,
    read_party_program,
    reconstruct_output,
    write_output_shares,
    write_party_program,
)
from .model import (
    fold_batch_norm,
    load_dataset,
    load_model,
    reference_infer_batch,
    validate_model,
)


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    return int(os.environ.get("POLYDNN_SEED", "0"))


def _parse_counts(s: str):
    if "," in s:
        return [int(v) for v in s.split(",")]
    return int(s)


def _parse_degrees(s: str) -> list[int]:
    out = [int(v) for v in s.split(",")]
    if not out:
        raise ValidationError("empty degree list")
    return out


def _load_folded(path: str):
    m = load_model(path)
    validate_model(m)
    return fold_batch_norm(m)


def _intervals(args, m, data):
    if args.radius is not None:
        return [args.radius] * len(m.layers)
    if data is None:
        raise ValidationError(
            "calibration needs --data samples or a fixed --radius")
    return calibrate_intervals(m, data.inputs, percentile=args.percentile,
                               safety=args.safety, floor=args.floor)


def _add_calibration_flags(p):
    p.add_argument("--radius", type=float, default=None,
                   help="fixed fit radius for every layer, skips calibration")
    p.add_argument("--percentile", type=float, default=PERCENTILE)
    p.add_argument("--safety", type=float, default=SAFETY)
    p.add_argument("--floor", type=float, default=FLOOR_RADIUS)


def _add_compile_flags(p):
    p.add_argument("--degree", type=int, required=True,
                   help="activation approximation degree")
    p.add_argument("--pool-mode", choices=POOL_MODES, default="auto")
    p.add_argument("--softmax-mode", choices=SOFTMAX_MODES, default="drop")
    p.add_argument("--sqrt-degree", type=int, default=SQRT_DEGREE)


def cmd_compile(args) -> int:
    m = _load_folded(args.model)
    data = load_dataset(args.data, args.labels) if args.data else None
    if args.pseudo_units is not None:
        m = insert_pseudo_units(m, _parse_counts(args.pseudo_units),
                                seed=_seed(args))
    intervals = _intervals(args, m, data)
    program = compile_nested(m, args.degree, intervals,
                             pool_mode=args.pool_mode,
                             softmax_mode=args.softmax_mode,
                             sqrt_degree=args.sqrt_degree)
    expanded = None
    if args.expand:
        expanded = expand(program, term_cap=args.term_cap, seed=_seed(args))
    for row in compile_report_rows(program):
        print(f"layer {row['layer']:2d}  {row['kind']:<12} degree "
              f"{row['degree']:3d}  interval {row['interval']:9.4f}  "
              f"max_err {row['max_err']:.3e}  mean_err {row['mean_err']:.3e}")
    ops = op_counts(program)
    print(f"nodes {ops['nodes']}  mult {ops['mult']}  add {ops['add']}  "
          f"total {ops['total']}")
    if expanded is not None:
        print(f"expanded: {expanded.term_count} terms, total degree "
              f"{expanded.total_degree}")
    save_program(program, args.out, expanded)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    program, expanded = load_program(args.program)
    data = load_dataset(args.data, args.labels)
    X, y = data.inputs, data.labels
    if args.limit is not None:
        X, y = X[:args.limit], y[:args.limit]
    if args.expanded:
        if expanded is None:
            raise ValidationError(
                f"{args.program} holds no expanded form; recompile with "
                f"--expand")
        outputs = np.array([expanded.eval(x) for x in X])
        classes = np.argmax(outputs, axis=1)
    else:
        outputs, classes, _ = eval_nested_batch(program, X)
    acc = float(np.mean(classes == y))
    print(f"samples {len(X)}  accuracy {acc:.4f}")
    if args.model:
        m = load_model(args.model)
        _, _, ref = reference_infer_batch(m, X)
        agree = float(np.mean(classes == ref))
        print(f"agreement with reference {agree:.4f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("index,label,predicted\n")
            for i, (lab, c) in enumerate(zip(y, classes)):
                fh.write(f"{i},{int(lab)},{int(c)}\n")
        print(f"wrote {args.out}")
    return 0


def cmd_sweep(args) -> int:
    m0 = load_model(args.model)
    validate_model(m0)
    m = fold_batch_norm(m0)
    data = load_dataset(args.data, args.labels)
    degrees = _parse_degrees(args.degrees)
    intervals = _intervals(args, m, data)
    _, _, ref = reference_infer_batch(m0, data.inputs)

    rng = np.random.default_rng(_seed(args))
    n = len(data)
    need = args.runs * args.samples
    if need <= n:
        perm = rng.permutation(n)
        pools = [perm[r * args.samples:(r + 1) * args.samples]
                 for r in range(args.runs)]
    else:
        pools = [rng.choice(n, size=args.samples, replace=True)
                 for _ in range(args.runs)]

    rows = []
    for degree in degrees:
        program = compile_nested(m, degree, intervals,
                                 pool_mode=args.pool_mode,
                                 softmax_mode=args.softmax_mode,
                                 sqrt_degree=args.sqrt_degree)
        _, classes, _ = eval_nested_batch(program, data.inputs)
        per_run = [float(np.mean(classes[idx] == ref[idx])) for idx in pools]
        rows.extend((degree, r, a) for r, a in enumerate(per_run))
        print(f"degree {degree:3d}  agreement {np.mean(per_run):.4f} "
              f"+- {np.std(per_run):.4f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("degree,run,agreement\n")
            for degree, r, a in rows:
                fh.write(f"{degree},{r},{a:.6f}\n")
        print(f"wrote {args.out}")
    return 0


def cmd_cost(args) -> int:
    m = _load_folded(args.model)
    data = load_dataset(args.data, args.labels) if args.data else None
    intervals = _intervals(args, m, data)
    for degree in _parse_degrees(args.degrees):
        program = compile_nested(m, degree, intervals,
                                 pool_mode=args.pool_mode,
                                 softmax_mode=args.softmax_mode,
                                 sqrt_degree=args.sqrt_degree)
        ops = op_counts(program)
        print(f"degree {degree:3d}  mult {ops['mult']:8d}  "
              f"add {ops['add']:8d}  total {ops['total']:8d}")
    return 0


def cmd_hide(args) -> int:
    from .model import save_model
    m = _load_folded(args.model)
    hidden = insert_pseudo_units(m, _parse_counts(args.pseudo_units),
                                 seed=_seed(args))
    added = sum(len(l.pseudo_units) for l in hidden.layers)
    save_model(hidden, args.out)
    print(f"wrote {args.out} ({added} decoy units)")
    return 0


def cmd_share(args) -> int:
    import random

    program, expanded = load_program(args.program)
    if expanded is None:
        raise ValidationError(
            f"{args.program} holds no expanded form; recompile with --expand")
    params = params_for_bits(args.field_bits, args.frac_bits)
    rng = random.Random(_seed(args))
    os.makedirs(args.out_dir, exist_ok=True)
    pps = deal_program(expanded, args.parties, params, rng)
    for pp in pps:
        path = os.path.join(args.out_dir, f"party_{pp.party_id}.json")
        write_party_program(pp, path)
        print(f"wrote {path}")
    print(f"fingerprint {pps[0].fingerprint}")
    return 0


def cmd_party_eval(args) -> int:
    pp = read_party_program(args.share)
    if args.input is not None:
        x = [float(v) for v in args.input.split(",")]
    elif args.data is not None:
        data = load_dataset(args.data, args.labels)
        x = data.inputs[args.row].tolist()
    else:
        raise ValidationError("pass --input or --data with --row")
    out = party_eval_public_input(pp, x)
    write_output_shares(out, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_reconstruct(args) -> int:
    params = params_for_bits(args.field_bits, args.frac_bits)
    shares = [read_output_shares(p) for p in args.shares]
    rec = reconstruct_output(shares, params)
    print(json.dumps({"values": rec.values,
                      "predicted_class": rec.predicted_class}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="polydnn",
        description="compile neural networks to polynomials and evaluate "
                    "them over secret shares without party-to-party talk")
    seeded = argparse.ArgumentParser(add_help=False)
    seeded.add_argument("--seed", type=int, default=None,
                        help="randomness seed (falls back to POLYDNN_SEED, "
                             "then 0)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compile", parents=[seeded],
                       help="lower a model to a polynomial program")
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="calibration samples (csv or idx)")
    p.add_argument("--labels", help="labels file for idx data")
    p.add_argument("--out", required=True)
    p.add_argument("--expand", action="store_true",
                   help="also store one expanded polynomial per output")
    p.add_argument("--term-cap", type=int, default=TERM_CAP)
    p.add_argument("--pseudo-units", default=None,
                   help="decoy units per hidden layer: one int or a "
                        "comma list")
    _add_compile_flags(p)
    _add_calibration_flags(p)
    p.set_defaults(fn=cmd_compile)

    p = sub.add_parser("eval", parents=[seeded],
                       help="run a compiled program over a dataset")
    p.add_argument("--program", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--labels")
    p.add_argument("--model", help="also report agreement with this model")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--expanded", action="store_true",
                   help="evaluate the stored expanded polynomials")
    p.add_argument("--out", help="write per-sample predictions as csv")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", parents=[seeded],
                       help="agreement with the reference model across "
                            "degrees")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--labels")
    p.add_argument("--degrees", required=True, help="comma list, e.g. "
                                                    "2,4,8,16,30")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--pool-mode", choices=POOL_MODES, default="auto")
    p.add_argument("--softmax-mode", choices=SOFTMAX_MODES, default="drop")
    p.add_argument("--sqrt-degree", type=int, default=SQRT_DEGREE)
    p.add_argument("--out", help="write degree,run,agreement rows as csv")
    _add_calibration_flags(p)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("cost", parents=[seeded],
                       help="exact operation counts per degree")
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="calibration samples")
    p.add_argument("--labels")
    p.add_argument("--degrees", required=True)
    p.add_argument("--pool-mode", choices=POOL_MODES, default="auto")
    p.add_argument("--softmax-mode", choices=SOFTMAX_MODES, default="drop")
    p.add_argument("--sqrt-degree", type=int, default=SQRT_DEGREE)
    _add_calibration_flags(p)
    p.set_defaults(fn=cmd_cost)

    p = sub.add_parser("hide", parents=[seeded],
                       help="insert decoy units that cannot change the "
                            "function")
    p.add_argument("--model", required=True)
    p.add_argument("--pseudo-units", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_hide)

    p = sub.add_parser("share", parents=[seeded],
                       help="deal an expanded program to k parties")
    p.add_argument("--program", required=True)
    p.add_argument("--parties", type=int, required=True)
    p.add_argument("--field-bits", type=int, default=DEFAULT_FIELD_BITS)
    p.add_argument("--frac-bits", type=int, default=DEFAULT_FRAC_BITS)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_share)

    p = sub.add_parser("party-eval", parents=[seeded],
                       help="one party's local evaluation on a public "
                            "input")
    p.add_argument("--share", required=True, help="this party's share file")
    p.add_argument("--input", help="comma-separated input values")
    p.add_argument("--data", help="dataset to take the input row from")
    p.add_argument("--labels")
    p.add_argument("--row", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_party_eval)

    p = sub.add_parser("reconstruct", parents=[seeded],
                       help="combine k output shares into class scores")
    p.add_argument("--shares", nargs="+", required=True)
    p.add_argument("--field-bits", type=int, default=DEFAULT_FIELD_BITS)
    p.add_argument("--frac-bits", type=int, default=DEFAULT_FRAC_BITS)
    p.set_defaults(fn=cmd_reconstruct)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except PolyDnnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
