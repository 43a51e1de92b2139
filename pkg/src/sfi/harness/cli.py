"""Command-line entry point: ``sfi {run,stability,bench,oracle,defaults}``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from ..checks import run_oracle_suite
from ..core import default_config, dump_config, read_config_file
from ..errors import SFIError
from .bench import bench_attention, bench_csv, monotone_inversions
from .experiment import ExperimentSpec, run_experiment
from .metrics import stability_sweep


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def cmd_run(args) -> int:
    spec = ExperimentSpec.from_file(args.spec, config=args.config)
    if args.seed is not None:
        spec = replace(spec, model_seed=args.seed)
    if args.out is not None:
        spec = replace(spec, out=Path(args.out))
    report = run_experiment(spec)
    agg = report.aggregates
    print(f"requests={agg['requests']} match={agg['token_match_rate']} cosine={agg['mean_cosine']} "
          f"slow={agg['slow_fraction']} retention={agg['mean_retention']} flop_ratio={agg['flop_ratio']}")
    print(f"wrote {spec.out}/report.json, steps.jsonl, summary.csv")
    for v in report.violations:
        print(f"VIOLATION {v}", file=sys.stderr)
    return 0 if report.ok else 1


def cmd_stability(args) -> int:
    _, trig, _ = read_config_file(args.config) if args.config else default_config()
    base = 0 if args.seed is None else args.seed
    rows = []
    sweep = stability_sweep(range(base, base + args.seeds), trig, k=args.k, n_segments=args.segments,
                            max_new=args.max_new, vocab_size=args.vocab)
    for seed, rep in sweep:
        rows.append({"seed": seed, **rep.to_dict()})
        print(f"seed={seed} within={rep.within_mean:.4f} crossing={rep.crossing_mean:.4f} "
              f"holds={rep.direction_holds}")
    held = sum(r["direction_holds"] for r in rows)
    print(f"direction holds in {held}/{len(rows)} seeds")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "stability.json").write_text(json.dumps({"k": args.k, "seeds": rows}, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_bench(args) -> int:
    rows = bench_attention(_ints(args.lengths), _floats(args.retentions), repeats=args.repeats,
                           seed=0 if args.seed is None else args.seed)
    text = bench_csv(rows)
    print(text, end="")
    for L in sorted({r.L for r in rows}):
        print(f"L={L}: speedup inversions vs retention = {monotone_inversions(rows, L)} "
              f"(beyond 10% noise: {monotone_inversions(rows, L, rel_tol=0.1)})")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.csv").write_text(text)
    return 0


def cmd_oracle(args) -> int:
    reports = run_oracle_suite(quick=args.quick, seed=args.seed)
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name}: trials={r.trials} violations={r.violations} "
              f"max_abs={r.max_abs_error:.3g} max_rel={r.max_rel_error:.3g} ({r.seconds:.1f}s)")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "oracle.json").write_text("[\n" + ",\n".join(r.to_json() for r in reports) + "\n]\n")
    return 0 if all(r.passed for r in reports) else 1


def cmd_defaults(args) -> int:
    cfg = read_config_file(args.config) if args.config else default_config()
    print(dump_config(*cfg), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the run seed")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--config", default=None, help="key=value selector/trigger/cache config file")

    p = argparse.ArgumentParser(prog="sfi", description="Slow-fast sparse decoding experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="run an experiment spec file")
    run.add_argument("spec", help="experiment key=value file")
    run.set_defaults(fn=cmd_run)

    st = sub.add_parser("stability", parents=[common], help="within vs across segment support overlap")
    st.add_argument("--seeds", type=int, default=5)
    st.add_argument("--k", type=int, default=8)
    st.add_argument("--segments", type=int, default=10)
    st.add_argument("--max-new", type=int, default=32)
    st.add_argument("--vocab", type=int, default=64)
    st.set_defaults(fn=cmd_stability)

    b = sub.add_parser("bench", parents=[common], help="sparse vs dense attention timing")
    b.add_argument("--lengths", default="1024,4096,8192,16384")
    b.add_argument("--retentions", default="0.016,0.125,0.25,0.5,1.0")
    b.add_argument("--repeats", type=int, default=5)
    b.set_defaults(fn=cmd_bench)

    o = sub.add_parser("oracle", parents=[common], help="run the oracle suite")
    o.add_argument("--quick", action="store_true", help="reduced trial counts")
    o.set_defaults(fn=cmd_oracle)

    d = sub.add_parser("defaults", parents=[common], help="print the default configuration")
    d.set_defaults(fn=cmd_defaults)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SFIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
