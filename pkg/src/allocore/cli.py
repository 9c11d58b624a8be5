"""Command-line surface: ingest, mask, fit, eval, synth, classes.

Every command writes a manifest into its output directory recording the
exact invocation. Mode indices and coordinates are 1-based on the command
line and in all files. The environment variable ALLOCORE_THREADS bounds the
worker pool used for fit sweeps over several Q values.
"""

from __future__ import annotations

import argparse
import os
import shlex
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from . import __version__
from .evaluation import (
    export_classes,
    load_samples,
    ppd,
    ppd_constant_baseline,
    ppd_positive,
)
from .gibbs import ChainConfig, run_chain
from .state import Hyperparameters, init_canonical, init_explicit, load_state
from .synthetic import (
    SyntheticConfig,
    default_config,
    generate,
    write_config,
    write_histograms,
    write_trace,
)
from .tensors import (
    EventSchema,
    TimeBinning,
    load_coo,
    load_events,
    load_mask,
    load_vocab,
    make_fiber_mask,
    split,
    write_coo,
    write_mask,
    write_vocab,
)

MODE_WORDS = {"allocore": "allocore", "cp": "cp_locked", "tucker": "tucker_dense"}

RESULT_COLUMNS = ("run", "dataset", "mode", "Q", "K", "seed", "S",
                  "ppd_full", "ppd_positive", "ppd_baseline", "wall_seconds")


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("ALLOCORE_THREADS", "1")))
    except ValueError:
        return 1


def _write_manifest(out_dir, command: str, argv: list[str], extra: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    lines = [
        f"command={command}",
        f"argv={shlex.join(argv)}",
        f"artifact_version={__version__}",
        f"created={time.strftime('%Y-%m-%dT%H:%M:%S')}",
    ]
    lines += [f"{k}={v}" for k, v in extra.items()]
    with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


def _read_manifest(path) -> dict[str, str]:
    out = {}
    with open(path) as f:
        for raw in f:
            line = raw.rstrip("\n")
            if not line or line.startswith("#") or "=" not in line:
                continue
            key, val = line.split("=", 1)
            out[key] = val
    return out


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------

def _schema_from_args(args) -> tuple[EventSchema, TimeBinning | None]:
    mode_cols = [c.strip() for c in args.mode_cols.split(",")]
    vocabs = {}
    for spec in args.vocab or []:
        if "=" not in spec:
            raise ValueError(f"--vocab expects MODE=PATH, got {spec!r}")
        m_txt, path = spec.split("=", 1)
        vocabs[int(m_txt) - 1] = tuple(load_vocab(path))
    time_mode = None
    binning = None
    if args.time_col is not None:
        if args.time_col not in mode_cols:
            raise ValueError(f"--time-col {args.time_col!r} is not a mode column")
        time_mode = mode_cols.index(args.time_col)
        binning = TimeBinning(unit=args.time_bin, start=args.time_start,
                              end=args.time_end)
    delimiter = args.delimiter
    if delimiter is None:
        delimiter = "," if str(args.data).endswith(".csv") else "\t"
    schema = EventSchema(mode_columns=tuple(mode_cols),
                         count_column=args.count_col,
                         delimiter=delimiter,
                         vocabularies=vocabs or None,
                         time_mode=time_mode)
    return schema, binning


def cmd_ingest(args, argv) -> int:
    if args.format == "events":
        schema, binning = _schema_from_args(args)
        tensor, vocabs = load_events(args.data, schema, binning)
    else:
        tensor = load_coo(args.data)
        vocabs = [[str(i + 1) for i in range(d)] for d in tensor.shape]
    os.makedirs(args.out, exist_ok=True)
    write_coo(tensor, os.path.join(args.out, "tensor.coo"))
    for m, vocab in enumerate(vocabs):
        write_vocab(vocab, os.path.join(args.out, f"vocab_{m + 1}.txt"))
    _write_manifest(args.out, "ingest", argv, {
        "data": os.path.abspath(args.data),
        "shape": " ".join(str(d) for d in tensor.shape),
        "nnz": tensor.nnz,
    })
    print(f"shape: {'x'.join(str(d) for d in tensor.shape)}")
    print(f"nnz: {tensor.nnz}")
    print(f"density: {tensor.density():.4f}")
    return 0


# ---------------------------------------------------------------------------
# mask
# ---------------------------------------------------------------------------

def cmd_mask(args, argv) -> int:
    tensor = load_coo(args.data)
    os.makedirs(args.out, exist_ok=True)
    free_mode = args.mask_mode - 1
    for i in range(args.num_masks):
        seed = args.mask_seed + i
        mask = make_fiber_mask(tensor, free_mode, args.mask_frac, seed)
        path = os.path.join(args.out, f"mask_{i + 1:02d}.txt")
        write_mask(mask, path)
        train, heldout = split(tensor, mask)
        print(f"mask_{i + 1:02d}: seed={seed} stems={mask.n_stems} "
              f"train_nnz={train.nnz} heldout_cells={heldout.n_cells} "
              f"heldout_positive={heldout.positive().n_cells}")
    _write_manifest(args.out, "mask", argv, {
        "data": os.path.abspath(args.data),
        "free_mode": args.mask_mode,
        "fraction": args.mask_frac,
        "first_seed": args.mask_seed,
        "num_masks": args.num_masks,
    })
    return 0


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _fit_single(params: dict) -> str:
    tensor = load_coo(params["data"])
    out = params["out"]
    os.makedirs(out, exist_ok=True)

    mask = None
    if params["mask"] is not None:
        mask = load_mask(params["mask"])
    elif params["mask_frac"] is not None:
        mask = make_fiber_mask(tensor, params["mask_mode"] - 1,
                               params["mask_frac"], params["mask_seed"])
    mask_record = ""
    if mask is not None:
        mask_path = os.path.join(out, "mask.txt")
        write_mask(mask, mask_path)
        mask_record = "mask.txt"
        train, _ = split(tensor, mask)
    else:
        train = tensor

    hyper = Hyperparameters(a0=params["a0"], b0=params["b0"],
                            e0=params["e0"], f0=params["f0"],
                            alpha0=params["alpha0"])
    core_mode = MODE_WORDS[params["mode"]]
    Q = params["Q"]
    K = params["K"]

    resume_from = os.path.join(out, "checkpoint")
    if params["resume"] and os.path.isdir(resume_from):
        init = load_state(resume_from)
        seed_for_config = None
    else:
        if core_mode == "tucker_dense":
            K = K or [Q] * tensor.ndim
            init = init_explicit(tensor.shape, K, Q, core_mode, hyper,
                                 params["seed"],
                                 core_cell_limit=params["core_cell_limit"])
        elif K is None:
            init = init_canonical(tensor.shape, Q, hyper, params["seed"],
                                  core_mode=core_mode)
        else:
            init = init_explicit(tensor.shape, K, Q, core_mode, hyper,
                                 params["seed"])
        seed_for_config = params["seed"]

    config = ChainConfig(burn_in=params["burnin"], total=params["iters"],
                         thin=params["thin"], seed=seed_for_config)
    _write_manifest(out, "fit", params["argv"], {
        "data": os.path.abspath(params["data"]),
        "mask": mask_record,
        "mode": params["mode"],
        "Q": init.Q,
        "K": "x".join(str(k) for k in init.K),
        "seed": init.seed if seed_for_config is None else seed_for_config,
        "burnin": params["burnin"],
        "iters": params["iters"],
        "thin": params["thin"],
        "a0": params["a0"], "b0": params["b0"],
        "e0": params["e0"], "f0": params["f0"], "alpha0": params["alpha0"],
        "core_cell_limit": params["core_cell_limit"],
    })
    samples = run_chain(train, mask, init, config, out_dir=out)
    print(f"{out}: saved {samples.S} samples "
          f"(iterations {samples.meta['first_iteration']}"
          f"..{samples.meta['last_iteration']})")
    return out


def cmd_fit(args, argv) -> int:
    q_values = _int_list(args.Q)
    if not q_values:
        raise ValueError("--Q must name at least one budget")
    if args.format == "events":
        raise ValueError("fit reads COO tensors; run 'allocore ingest' first")
    base = {
        "data": args.data,
        "mask": args.mask,
        "mask_frac": args.mask_frac,
        "mask_mode": args.mask_mode,
        "mask_seed": args.mask_seed,
        "mode": args.mode,
        "K": _int_list(args.K) if args.K else None,
        "a0": args.a0, "b0": args.b0, "e0": args.e0, "f0": args.f0,
        "alpha0": args.alpha0,
        "burnin": args.burnin, "iters": args.iters, "thin": args.thin,
        "seed": args.seed,
        "resume": args.resume,
        "core_cell_limit": args.core_cell_limit,
        "argv": argv,
    }
    if len(q_values) == 1:
        _fit_single({**base, "Q": q_values[0], "out": args.out})
        return 0
    jobs = [{**base, "Q": q, "out": os.path.join(args.out, f"Q{q:04d}")}
            for q in q_values]
    workers = min(_threads(), len(jobs))
    if workers == 1:
        for job in jobs:
            _fit_single(job)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_fit_single, jobs))
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _existing_result_keys(path) -> set[str]:
    if not os.path.exists(path):
        return set()
    keys = set()
    with open(path) as f:
        header = f.readline()
        if not header:
            return keys
        for line in f:
            if line.strip():
                keys.add(line.split("\t", 1)[0])
    return keys


def _eval_run(run_dir) -> dict:
    man_path = os.path.join(run_dir, "manifest.txt")
    if not os.path.exists(man_path):
        raise ValueError(f"{run_dir}: no manifest; not a fit output directory")
    man = _read_manifest(man_path)
    if not man.get("mask"):
        raise ValueError(f"{run_dir}: run was fit without a mask; nothing held out")
    tensor = load_coo(man["data"])
    mask = load_mask(os.path.join(run_dir, man["mask"]))
    train, heldout = split(tensor, mask)
    try:
        samples = load_samples(run_dir)
    except ValueError as exc:
        raise ValueError(f"{run_dir}: missing samples ({exc})") from None

    wall = 0.0
    log_path = os.path.join(run_dir, "chain_log.tsv")
    if os.path.exists(log_path):
        with open(log_path) as f:
            for line in f:
                if line.startswith("#") or line.startswith("iteration"):
                    continue
                parts = line.split("\t")
                if len(parts) >= 2:
                    wall += float(parts[-1])
    return {
        "run": os.path.basename(os.path.normpath(run_dir)),
        "dataset": os.path.basename(man["data"]),
        "mode": man.get("mode", "?"),
        "Q": man.get("Q", "?"),
        "K": man.get("K", "?"),
        "seed": man.get("seed", "?"),
        "S": samples.S,
        "ppd_full": f"{ppd(samples, heldout):.8g}",
        "ppd_positive": f"{ppd_positive(samples, heldout):.8g}",
        "ppd_baseline": f"{ppd_constant_baseline(train, heldout):.8g}",
        "wall_seconds": f"{wall:.3f}",
    }


def cmd_eval(args, argv) -> int:
    runs = list(args.runs)

    def q_of(run_dir):
        man_path = os.path.join(run_dir, "manifest.txt")
        if os.path.exists(man_path):
            try:
                return int(_read_manifest(man_path).get("Q", "0"))
            except ValueError:
                return 0
        return 0

    runs.sort(key=q_of)
    existing = _existing_result_keys(args.out)
    new_file = not os.path.exists(args.out)
    appended = 0
    with open(args.out, "a") as f:
        if new_file:
            f.write("\t".join(RESULT_COLUMNS) + "\n")
        for run_dir in runs:
            row = _eval_run(run_dir)
            if row["run"] in existing:
                print(f"{row['run']}: already evaluated, skipping")
                continue
            f.write("\t".join(str(row[c]) for c in RESULT_COLUMNS) + "\n")
            appended += 1
            print(f"{row['run']}: ppd_full={row['ppd_full']} "
                  f"ppd_positive={row['ppd_positive']} "
                  f"baseline={row['ppd_baseline']}")
    print(f"appended {appended} row(s) to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args, argv) -> int:
    if args.shape or args.true_dims or args.true_Q:
        config = SyntheticConfig(
            shape=tuple(_int_list(args.shape)) if args.shape else (40, 40, 5),
            true_dims=tuple(_int_list(args.true_dims)) if args.true_dims else (4, 4, 2),
            true_budget=args.true_Q or 6,
            column_scale=args.scale,
            column_concentration=args.concentration,
            lambda_shape=args.lambda_shape,
            lambda_rate=args.lambda_rate,
            seed=args.seed,
        )
    else:
        config = default_config(seed=args.seed)
    tensor, truth = generate(config)
    os.makedirs(args.out, exist_ok=True)
    write_coo(tensor, os.path.join(args.out, "tensor.coo"))
    write_config(config, os.path.join(args.out, "config.txt"))
    from .state import save_state
    save_state(truth.state, os.path.join(args.out, "truth"))
    _write_manifest(args.out, "synth", argv, {
        "shape": " ".join(str(d) for d in config.shape),
        "true_dims": " ".join(str(k) for k in config.true_dims),
        "true_budget": config.true_budget,
        "seed": config.seed,
        "nnz": tensor.nnz,
        "total": tensor.total(),
        "q_eff": truth.q_eff,
        "k_eff": " ".join(str(k) for k in truth.k_eff),
    })
    print(f"shape: {'x'.join(str(d) for d in config.shape)}")
    print(f"true_dims: {','.join(str(k) for k in config.true_dims)} "
          f"true_budget: {config.true_budget}")
    print(f"nnz: {tensor.nnz} total: {tensor.total()}")
    print(f"effective: q_eff={truth.q_eff} "
          f"k_eff={','.join(str(k) for k in truth.k_eff)}")
    return 0


# ---------------------------------------------------------------------------
# classes
# ---------------------------------------------------------------------------

def cmd_classes(args, argv) -> int:
    if args.state:
        state = load_state(args.state)
    elif args.run:
        samples = load_samples(args.run)
        state = samples.samples[-1]
    else:
        raise ValueError("classes needs --state or --run")
    vocabs = None
    if args.vocab:
        vocabs = []
        for m in range(state.M):
            path = os.path.join(args.vocab, f"vocab_{m + 1}.txt")
            vocabs.append(load_vocab(path) if os.path.exists(path)
                          else [str(i + 1) for i in range(state.shape[m])])
    classes = export_classes(state, args.out, args.n, args.threshold, vocabs)
    _write_manifest(args.out, "classes", argv, {
        "n": args.n,
        "threshold": args.threshold,
        "exported": len(classes),
    })
    print(f"exported {len(classes)} classes to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# trace (recovery diagnostics for a fitted run)
# ---------------------------------------------------------------------------

def cmd_trace(args, argv) -> int:
    samples = load_samples(args.run)
    os.makedirs(args.out, exist_ok=True)
    write_trace(samples, os.path.join(args.out, "trace.tsv"))
    write_histograms(samples, os.path.join(args.out, "histograms.tsv"))
    _write_manifest(args.out, "trace", argv, {"run": os.path.abspath(args.run)})
    print(f"wrote trace and histograms for {samples.S} samples to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_schema_flags(p):
    p.add_argument("--mode-cols", help="comma list of event columns, one per mode")
    p.add_argument("--count-col", default=None, help="optional count column")
    p.add_argument("--delimiter", default=None,
                   help="field delimiter (default: ',' for .csv, tab otherwise)")
    p.add_argument("--vocab", action="append", default=None, metavar="MODE=PATH",
                   help="fixed vocabulary file for a 1-based mode; repeatable")
    p.add_argument("--time-col", default=None, help="mode column holding dates")
    p.add_argument("--time-bin", default="month", choices=["month", "year"])
    p.add_argument("--time-start", default=None, help="first bin, e.g. 2000-01")
    p.add_argument("--time-end", default=None, help="last bin, e.g. 2006-12")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="allocore",
        description="Sparse-core Poisson Tucker decomposition toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="aggregate an event log into a COO tensor")
    p.add_argument("--data", required=True)
    p.add_argument("--format", choices=["coo", "events"], default="events")
    _add_schema_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("mask", help="generate seeded fiber-holdout masks")
    p.add_argument("--data", required=True)
    p.add_argument("--mask-mode", type=int, required=True,
                   help="1-based free mode of the held-out fibers")
    p.add_argument("--mask-frac", type=float, default=0.01)
    p.add_argument("--mask-seed", type=int, default=1)
    p.add_argument("--num-masks", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("fit", help="run a Gibbs chain")
    p.add_argument("--data", required=True)
    p.add_argument("--format", choices=["coo", "events"], default="coo")
    p.add_argument("--mode", choices=["allocore", "cp", "tucker"],
                   default="allocore")
    p.add_argument("--Q", required=True,
                   help="core budget; a comma list runs one chain per value")
    p.add_argument("--K", default=None,
                   help="comma list of per-mode core dimensions "
                        "(default: K_m = Q in every mode)")
    p.add_argument("--a0", type=float, default=1.0)
    p.add_argument("--b0", type=float, default=1.0)
    p.add_argument("--e0", type=float, default=1.0)
    p.add_argument("--f0", type=float, default=10.0)
    p.add_argument("--alpha0", type=float, default=0.1)
    p.add_argument("--burnin", type=int, default=1000)
    p.add_argument("--iters", type=int, default=4000)
    p.add_argument("--thin", type=int, default=20)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--mask", default=None, help="mask file to hold out")
    p.add_argument("--mask-frac", type=float, default=None)
    p.add_argument("--mask-mode", type=int, default=None)
    p.add_argument("--mask-seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true",
                   help="continue from the checkpoint in --out")
    p.add_argument("--core-cell-limit", type=int, default=10 ** 6)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="score fitted runs on their heldout fibers")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True, help="results table to append to")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a ground-truth tensor")
    p.add_argument("--out", required=True)
    p.add_argument("--shape", default=None)
    p.add_argument("--true-dims", default=None)
    p.add_argument("--true-Q", type=int, default=None)
    p.add_argument("--scale", type=float, default=5.0)
    p.add_argument("--concentration", type=float, default=0.01)
    p.add_argument("--lambda-shape", type=float, default=2.0)
    p.add_argument("--lambda-rate", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("classes", help="export ranked latent classes")
    p.add_argument("--run", default=None, help="fitted run (uses last sample)")
    p.add_argument("--state", default=None, help="explicit state directory")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--threshold", type=float, default=0.02)
    p.add_argument("--vocab", default=None,
                   help="directory holding vocab_<m>.txt label files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_classes)

    p = sub.add_parser("trace", help="export effective-dimension traces")
    p.add_argument("--run", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trace)

    return ap


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args, argv)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
