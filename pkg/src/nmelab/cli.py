"""Command line entry point: ``nmelab <command> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import curvature as cv
from .harness import (
    DEFAULT_SWEEP_ACTIVATIONS,
    DEFAULT_SWEEP_RHOS,
    PROBE_KINDS,
    RunConfig,
    probe_checkpoint,
    sweep,
    train,
)
from .quadratic import QuadraticProblem, evolve, step_doubling_closed_form, step_doubling_residual, trajectory_rows
from .verify import CHECKS, run_all, scan_problem, write_results


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    return cfg


def cmd_train(args) -> int:
    res = train(_load_config(args))
    print(json.dumps({k: res.summary[k] for k in ("status", "steps", "final_train_loss", "final_test_acc")}))
    print(f"wrote {res.out}")
    return 3 if res.diverged else 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    rows = sweep(cfg, _floats(args.rhos), args.activations.split(","), workers=args.workers)
    for r in rows:
        print(f"{r['cell']}: status={r['status']} test_acc={r['final_test_acc']}")
    print(f"wrote {Path(cfg.out) / 'sweep.csv'}")
    return 0 if all(r["status"] != "diverged" for r in rows) else 3


def cmd_probe(args) -> int:
    cfg = _load_config(args)
    out = args.out or str(Path(args.checkpoint).parent / "probes")
    opts = {"n_samples": args.samples, "seed": cfg.seed}
    if args.kind == "scan":
        opts.update(resolution=args.resolution, span=(args.lo, args.hi))
        if args.index_a is not None:
            opts.update(index_a=args.index_a, index_b=args.index_b)
    paths = probe_checkpoint(args.checkpoint, cfg, args.kind, out, n_points=args.points, **opts)
    print("\n".join(f"wrote {p}" for p in paths))
    return 0


def cmd_scan(args) -> int:
    out = Path(args.out or "scan")
    rows = []
    for beta in _floats(args.betas):
        model, x, y, ia, ib = scan_problem(beta, args.seed)
        grid = cv.nme_scan(model, x, y, "mse", ia, ib, (args.lo, args.hi), args.resolution)
        grid.write(out, f"scan_beta{beta:g}")
        rows.append({"beta": beta, "census": grid.census(args.threshold),
                     "max_nme_norm": float(grid.nme_norm.max())})
        print(f"beta={beta:g}: census={rows[-1]['census']:.4f}")
    cv.write_csv(out / "census.csv", rows, "census/1")
    print(f"wrote {out}")
    return 0


def cmd_quadratic(args) -> int:
    lam = _floats(args.eigenvalues)
    theta0 = _floats(args.theta0) if args.theta0 else [1.0] * len(lam)
    prob = QuadraticProblem(theta0, args.alpha, args.rho, eigenvalues=lam)
    out = Path(args.out or "quadratic")
    out.mkdir(parents=True, exist_ok=True)
    traj = evolve(prob, args.steps)
    cv.write_csv(out / "trajectory.csv", trajectory_rows(traj), "trajectory/1")
    rows = [{"alpha_lambda": a, "residual": step_doubling_residual(a, 1.0),
             "closed_form": step_doubling_closed_form(a, 1.0)} for a in _floats(args.alpha_lambda)]
    cv.write_csv(out / "residuals.csv", rows, "residuals/1")
    print("mode factors: " + ", ".join(f"{f:.6g}" for f in prob.mode_factors()))
    print(f"wrote {out}")
    return 0


def cmd_verify(args) -> int:
    ids = args.only.split(",") if args.only else None
    results = run_all(ids, echo=lambda line: print(line, flush=True), quick=args.quick)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        print(f"wrote {write_results(results, Path(args.out) / 'verify.json')}")
    failed = [r.id for r in results if r.gating and not r.passed]
    print("all gating checks passed" if not failed else f"failed: {', '.join(failed)}")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nmelab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", required=True, help="run config (JSON)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="override the output directory")

    sp = sub.add_parser("train", help="train one configuration")
    with_config(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sweep", help="train a grid of regularisation strengths and activations")
    with_config(sp)
    sp.add_argument("--rhos", default=",".join(map(str, DEFAULT_SWEEP_RHOS)))
    sp.add_argument("--activations", default=",".join(DEFAULT_SWEEP_ACTIVATIONS),
                    help="comma list, e.g. relu,gelu,beta_gelu:16")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("probe", help="curvature probes on a checkpoint")
    with_config(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--kind", choices=PROBE_KINDS, required=True)
    sp.add_argument("--points", type=int, default=16, help="training examples in the probe batch")
    sp.add_argument("--samples", type=int, default=1000, help="estimator samples")
    sp.add_argument("--resolution", type=int, default=41)
    sp.add_argument("--lo", type=float, default=-3.0)
    sp.add_argument("--hi", type=float, default=3.0)
    sp.add_argument("--index-a", type=int)
    sp.add_argument("--index-b", type=int)
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("scan", help="NME landscape over two weights for several beta values")
    sp.add_argument("--betas", default="1,2,4,8,16")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--resolution", type=int, default=41)
    sp.add_argument("--lo", type=float, default=-3.0)
    sp.add_argument("--hi", type=float, default=3.0)
    sp.add_argument("--threshold", type=float, default=1e-3)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_scan)

    sp = sub.add_parser("quadratic", help="closed-form penalised GD on a quadratic")
    sp.add_argument("--eigenvalues", default="0.5,1,2")
    sp.add_argument("--theta0")
    sp.add_argument("--alpha", type=float, default=0.1)
    sp.add_argument("--rho", type=float, default=0.0)
    sp.add_argument("--steps", type=int, default=100)
    sp.add_argument("--alpha-lambda", default="0.01,0.1,1")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_quadratic)

    sp = sub.add_parser("verify", help="run the oracle checks")
    sp.add_argument("--only", help=f"comma list of check ids ({','.join(CHECKS)},12)")
    sp.add_argument("--quick", action="store_true", help="smaller qualitative smoke check")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
