"""Command-line front end: ``gmlm-lab <subcommand> ...``.

Exit codes: 0 success, 1 verification failure, 2 usage or validation error,
3 capacity limit exceeded.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .asymptotics import (
    DegenerateHessianError,
    RealizabilityError,
    asymptotic_report,
    dump_reports,
    summary_csv,
)
from .chains import (
    AdaptiveBlock,
    IndependentParallel,
    KGibbs,
    UnsupportedSamplerError,
    WeightedBlock,
    adaptive_marginal_matrix,
    poincare_constant,
    reversibility_defect,
    run_hitting_trials,
    transition_matrix,
)
from .experiments import (
    FIG_FLAT,
    FIG_PEAKY,
    FIG_SAMPLING,
    HIT_COLUMNS,
    ConfigError,
    ExperimentConfig,
    run,
)
from .ising import (
    AssumptionError,
    CapacityError,
    CliqueParams,
    IsingModel,
    build_clique_ising,
    check_strongly_ferromagnetic,
)
from .masking import (
    Adaptive,
    FitOptions,
    MaskedDataset,
    UniformK,
    design_from_dataset,
    fit_mple,
    load_mask,
    make_dataset,
    population_mask_design,
)
from .numerics import ConvergenceError, RngStream, SingularMatrixError
from .verify import SUITES, run_suite

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_CAPACITY = 0, 1, 2, 3

FIGURES = {
    "flat": FIG_FLAT,
    "peaky": FIG_PEAKY,
    "sampling": FIG_SAMPLING,
    "separation": ExperimentConfig("separation", trials=500),
    "normality": ExperimentConfig(
        "normality", ks=(1, 4), n_sequences=(20000,), trials=200
    ),
}


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# argument helpers


def parse_k_range(text: str) -> list[int]:
    """'3' -> [3]; '1..4' -> [1, 2, 3, 4]; '1,3' -> [1, 3]."""
    out: list[int] = []
    try:
        for part in text.split(","):
            part = part.strip()
            if ".." in part:
                lo, hi = part.split("..", 1)
                lo_i, hi_i = int(lo), int(hi)
                if lo_i > hi_i:
                    raise UsageError(f"empty k range {part!r}")
                out.extend(range(lo_i, hi_i + 1))
            else:
                out.append(int(part))
    except ValueError as exc:
        if isinstance(exc, UsageError):
            raise
        raise UsageError(f"cannot parse k values from {text!r}") from exc
    return out


def parse_int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


def parse_float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc


def default_jobs() -> int:
    raw = os.environ.get("GMLM_LAB_JOBS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _emit(text: str, out: str | None) -> None:
    if out:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _provenance(command: str, seed: int | None, payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    digest = hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
    seed_part = "" if seed is None else f" seed={seed}"
    return f"# gmlm_lab {__version__} command={command}{seed_part} config_sha256={digest}\n"


def _load_model(path: str) -> IsingModel:
    try:
        return IsingModel.load(path)
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read model {path!r}: {exc}") from exc


def _mask_law(args, n: int):
    if getattr(args, "mask_file", None):
        try:
            d = load_mask(args.mask_file)
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read mask file {args.mask_file!r}: {exc}") from exc
        if d.n != n:
            raise UsageError(f"mask file is for n={d.n}, model has n={n}")
        return d
    if getattr(args, "k", None) is None:
        raise UsageError("give --k or --mask-file")
    ks = parse_k_range(args.k)
    if len(ks) != 1:
        raise UsageError("this command takes a single k")
    return UniformK(n, ks[0])


def _sampler(args, m: IsingModel):
    name = args.sampler
    if name == "k-gibbs":
        if args.k is None:
            raise UsageError("k-gibbs needs --k")
        ks = parse_k_range(args.k)
        if len(ks) != 1:
            raise UsageError("k-gibbs takes a single k")
        return KGibbs(ks[0])
    if name == "independent-parallel":
        return IndependentParallel()
    d = _mask_law(args, m.n)
    if name == "weighted":
        if isinstance(d, Adaptive):
            raise UsageError("weighted sampler needs a non-adaptive mask law")
        return WeightedBlock(d)
    if name == "adaptive":
        if not isinstance(d, Adaptive):
            raise UsageError("adaptive sampler needs an adaptive mask file")
        return AdaptiveBlock(d)
    raise UsageError(f"unknown sampler {name!r}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_model(args) -> int:
    if args.h_file:
        with open(args.h_file, encoding="utf-8") as fh:
            h = [float(v) for v in json.load(fh)]
    else:
        h = parse_float_list(args.h)
    if len(h) not in (1, args.n):
        raise UsageError(f"--h needs 1 or n={args.n} values, got {len(h)}")
    if args.clique is not None:
        clique = parse_int_list(args.clique)
        if args.J is None:
            raise UsageError("a clique model needs --J")
        h_vec = np.broadcast_to(np.asarray(h, dtype=float), (args.n,)).copy()
        if args.fields == "clique-only" and len(h) == 1:
            keep = np.zeros(args.n, dtype=bool)
            keep[[c for c in clique if 0 <= c < args.n]] = True
            h_vec[~keep] = 0.0
        p = CliqueParams(args.n, clique, args.J, h_vec)
        model = build_clique_ising(p)
        rep = check_strongly_ferromagnetic(p)
        if not rep.holds:
            print(f"note: strongly ferromagnetic assumption fails: {rep.failing()}", file=sys.stderr)
    else:
        couplings = []
        for spec in args.coupling or []:
            parts = spec.split(",")
            if len(parts) != 3:
                raise UsageError(f"--coupling expects i,j,value; got {spec!r}")
            couplings.append((int(parts[0]), int(parts[1]), float(parts[2])))
        model = IsingModel.from_couplings(
            args.n, np.broadcast_to(np.asarray(h, dtype=float), (args.n,)), couplings
        )
    _emit(model.to_json() + "\n", args.out)
    return EXIT_OK


def cmd_estimate(args) -> int:
    truth = _load_model(args.model)
    d = _mask_law(args, truth.n)
    if args.data:
        data = MaskedDataset.read_csv(args.data, truth.n)
    else:
        if args.n_seq is None:
            raise UsageError("give --n-seq (or --data)")
        data = make_dataset(
            truth,
            d,
            args.n_seq,
            args.m,
            RngStream.derive(args.seed, 0),
            RngStream.derive(args.seed, 1),
        )
    if args.data_out:
        data.write_csv(args.data_out)
    if args.population_masks:
        if not isinstance(d, UniformK):
            raise UsageError("--population-masks needs a uniform k mask law")
        design = population_mask_design(data, d)
    else:
        design = design_from_dataset(data, d)
    opts = FitOptions(args.step_size, args.max_iters, args.grad_tol)
    fit = fit_mple(design, d, opts)
    out = fit.to_dict()
    out["theta_star"] = [float(v) for v in truth.theta]
    out["squared_error_per_param"] = float(
        np.sum((fit.theta_hat - truth.theta) ** 2) / truth.theta.size
    )
    out["n_sequences"] = data.n_sequences
    out["masks_per_sequence"] = data.m_masks
    _emit(json.dumps(out, indent=2) + "\n", args.out)
    return EXIT_OK


def cmd_asymptotics(args) -> int:
    truth = _load_model(args.model)
    if args.mask_file:
        d = _mask_law(args, truth.n)
        rep = asymptotic_report(truth, d, label=args.mask_file)
        _emit(dump_reports([rep]) + "\n", args.out)
        return EXIT_OK
    ks = parse_k_range(args.k or f"1..{truth.n}")
    if any(not 1 <= k <= truth.n for k in ks):
        raise UsageError(f"k values must lie in [1, {truth.n}]")
    if args.json:
        reps = [asymptotic_report(truth, UniformK(truth.n, k), label=f"k={k}") for k in ks]
        _emit(dump_reports(reps) + "\n", args.out)
        return EXIT_OK
    header = _provenance("asymptotics", None, {"model": truth.to_dict(), "ks": ks})
    _emit(header + summary_csv(truth, ks), args.out)
    return EXIT_OK


def cmd_chain(args) -> int:
    m = _load_model(args.model)
    spec = _sampler(args, m)
    cm = transition_matrix(m, spec)
    out: dict = {"sampler": spec.name, "n": m.n, "states": cm.size}
    if isinstance(spec, IndependentParallel):
        out["poincare_constant"] = None
        out["note"] = "no stationarity claim for the independent parallel chain"
    else:
        C = poincare_constant(cm)
        out["reversibility_defect"] = reversibility_defect(cm)
        out["poincare_constant"] = None if math.isinf(C) else C
        out["poincare_infinite"] = math.isinf(C)
        if isinstance(spec, AdaptiveBlock):
            Cm = poincare_constant(adaptive_marginal_matrix(m, spec.d))
            out["poincare_constant_redrawn_blocks"] = Cm
    if args.matrix:
        out["P"] = [[float(v) for v in row] for row in cm.P]
        out["mu"] = None if cm.mu is None else [float(v) for v in cm.mu]
    _emit(json.dumps(out, indent=2) + "\n", args.out)
    return EXIT_OK


def cmd_hit(args) -> int:
    m = _load_model(args.model)
    spec = _sampler(args, m)
    clique = parse_int_list(args.clique) if args.clique else m.clique
    if not clique:
        raise UsageError("give --clique (the model has no clique metadata)")
    records = run_hitting_trials(
        m, spec, args.start, clique, args.budget, args.trials, args.seed, args.jobs
    )
    k = spec.k if isinstance(spec, KGibbs) else m.n
    J = "" if m.J_clique is None else repr(float(m.J_clique))
    buf = io.StringIO()
    buf.write(
        _provenance(
            "hit",
            args.seed,
            {
                "model": m.to_dict(),
                "sampler": spec.name,
                "k": k,
                "start": args.start,
                "clique": list(clique),
                "budget": args.budget,
                "trials": args.trials,
            },
        )
    )
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HIT_COLUMNS)
    for r in records:
        w.writerow([spec.name, k, J, r.trial, r.steps, int(r.hit), r.seed])
    _emit(buf.getvalue(), args.out)
    return EXIT_OK


def cmd_figure(args) -> int:
    if args.config:
        cfg = ExperimentConfig.load(args.config)
    elif args.name:
        cfg = FIGURES[args.name]
    else:
        raise UsageError("give a figure name or --config")
    overrides = {} if args.seed is None else {"seed": args.seed}
    if args.trials is not None:
        overrides["trials"] = args.trials
    if args.fields is not None:
        overrides["fields"] = args.fields.replace("-", "_")
    if args.budget is not None:
        overrides["budget"] = args.budget
    if args.k is not None:
        overrides["ks"] = tuple(parse_k_range(args.k))
    if args.n_seq is not None:
        overrides["n_sequences"] = tuple(parse_int_list(args.n_seq))
    if args.J is not None:
        overrides["Js"] = tuple(parse_float_list(args.J))
    cfg = replace(cfg, **overrides)
    report = run(cfg, jobs=args.jobs)
    _emit(report.to_csv(), args.out)
    if args.records:
        if not report.record_columns:
            raise UsageError(f"{cfg.experiment} has no per-trial records")
        _emit(report.records_csv(), args.records)
    return EXIT_OK


def cmd_verify(args) -> int:
    suites = SUITES if args.suite == "all" else (args.suite,)
    failed = None
    for name in suites:
        for check in run_suite(name, args.seed):
            print(f"[{name}] {check.line()}")
            if not check.passed and failed is None:
                failed = (name, check)
    if failed is not None:
        name, check = failed
        print(f"first failure in suite {name!r}, seed {args.seed}: {check.name}", file=sys.stderr)
        for inst in check.failing[:5]:
            print(f"  instance: {inst}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    jobs = default_jobs()
    ap = argparse.ArgumentParser(prog="gmlm-lab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True, out=True, jobs_flag=False, seed_default=0):
        if seed:
            p.add_argument("--seed", type=int, default=seed_default)
        if out:
            p.add_argument("--out", help="output file (default stdout)")
        if jobs_flag:
            p.add_argument("--jobs", type=int, default=jobs, help="worker processes (env GMLM_LAB_JOBS)")

    p = sub.add_parser("model", help="build a model JSON file")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--h", default="0", help="one value or n comma-separated values")
    p.add_argument("--h-file", help="JSON list of n fields")
    p.add_argument("--clique", help="comma-separated clique members")
    p.add_argument("--J", type=float, help="intra-clique coupling")
    p.add_argument("--coupling", action="append", help="i,j,value (general models; repeatable)")
    p.add_argument("--fields", choices=("all", "clique-only"), default="all")
    common(p)
    p.set_defaults(func=cmd_model)

    p = sub.add_parser("estimate", help="fit the masked pseudolikelihood estimator")
    p.add_argument("--model", required=True)
    p.add_argument("--k")
    p.add_argument("--mask-file")
    p.add_argument("--n-seq", type=int)
    p.add_argument("--m", type=int, default=1, help="masks per sequence")
    p.add_argument("--data", help="dataset CSV to fit instead of sampling")
    p.add_argument("--data-out", help="write the sampled dataset CSV here")
    p.add_argument("--population-masks", action="store_true")
    p.add_argument("--step-size", type=float, default=FitOptions.step_size)
    p.add_argument("--max-iters", type=int, default=FitOptions.max_iters)
    p.add_argument("--grad-tol", type=float, default=FitOptions.grad_tol)
    common(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("asymptotics", help="exact population Hessians and Gamma traces")
    p.add_argument("--model", required=True)
    p.add_argument("--k", help="k values, e.g. 1..4 or 1,3")
    p.add_argument("--mask-file")
    p.add_argument("--json", action="store_true", help="full matrices instead of the CSV summary")
    common(p)
    p.set_defaults(func=cmd_asymptotics)

    samplers = ("k-gibbs", "weighted", "adaptive", "independent-parallel")
    p = sub.add_parser("chain", help="transition matrix diagnostics")
    p.add_argument("--model", required=True)
    p.add_argument("--sampler", choices=samplers, default="k-gibbs")
    p.add_argument("--k")
    p.add_argument("--mask-file")
    p.add_argument("--matrix", action="store_true", help="include P and mu in the output")
    common(p)
    p.set_defaults(func=cmd_chain)

    p = sub.add_parser("hit", help="simulate hitting times of R_plus")
    p.add_argument("--model", required=True)
    p.add_argument("--sampler", choices=samplers, default="k-gibbs")
    p.add_argument("--k")
    p.add_argument("--mask-file")
    p.add_argument("--clique")
    p.add_argument("--start", type=int, default=0, help="start configuration bits (default all -1)")
    p.add_argument("--budget", type=int, default=1000)
    p.add_argument("--trials", type=int, default=10)
    common(p, jobs_flag=True)
    p.set_defaults(func=cmd_hit)

    p = sub.add_parser("figure", help="reproduce an experiment CSV")
    p.add_argument("name", nargs="?", choices=tuple(FIGURES))
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--trials", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--k")
    p.add_argument("--n-seq", help="comma-separated data sizes")
    p.add_argument("--J", help="comma-separated coupling grid")
    p.add_argument("--fields", choices=("all", "clique-only"))
    p.add_argument("--records", help="also write per-trial records CSV here")
    common(p, jobs_flag=True, seed_default=None)
    p.set_defaults(func=cmd_figure)

    p = sub.add_parser("verify", help="run a randomized verification suite")
    p.add_argument("--suite", choices=(*SUITES, "all"), required=True)
    common(p, out=False)
    p.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be at least 1")
    try:
        return args.func(args)
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except (
        UsageError,
        ConfigError,
        AssumptionError,
        RealizabilityError,
        DegenerateHessianError,
        SingularMatrixError,
        UnsupportedSamplerError,
        ConvergenceError,
        ValueError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
