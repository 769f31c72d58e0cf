"""Command-line front end.

Six commands: `validate` (is a design's covariance structure identified),
`asymptotics` (large-sample SE and missing-information report), `power` and
`samplesize` (Wald tests against the design), and the two experiment drivers
`explore` and `simulate` (CSV table plus JSON summary).

Every run emits a manifest: command, fully resolved configuration, seed,
package version, timestamps, and output paths. Single-document commands embed
it in their stdout JSON; the drivers also write it as a sidecar file next to
the CSV. The CSV tables carry no timestamps, so reruns of the same manifest
produce byte-identical tables however many worker threads compute them.

Exit codes: 0 success; 1 usage, file, or document-parse problems; 2 domain
errors (singular design, vacuous effect, impossible allocation); 3 numerical
failures (lost positive definiteness, no convergence, rank deficiency).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .asymptotics import report
from .design import builtin_bigfive, parse_design, validate_estimability
from .errors import (
    DomainError,
    MatrixPowerError,
    NoConvergence,
    NotPositiveDefinite,
    RankDeficient,
    SchemaError,
)
from .experiments import (
    SIM_METHODS,
    ExploreConfig,
    SimConfig,
    explore,
    population_model,
    simulate,
)
from .moments import bigfive_correlation, build_moments, parse_model_document
from .numerics import normal_quantile
from .power import (
    PowerSpec,
    overall_test,
    r2_increase_single,
    r2_increase_uniform,
    sample_size,
    single_slope_test,
    wald_power,
    noncentrality_rate,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DOMAIN = 2
EXIT_NUMERICAL = 3

_NUMERICAL_ERRORS = (NotPositiveDefinite, NoConvergence, RankDeficient)


class _UsageError(Exception):
    """Command-line level mistake; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; this package reserves 2 for
    # domain errors, so usage problems are rethrown and handled in main().
    def error(self, message):
        raise _UsageError(message)


@dataclass(frozen=True)
class RunManifest:
    """What ran, with what inputs, when, and where the results went."""

    command: str
    config: dict
    seed: int | None
    version: str
    started_utc: str
    finished_utc: str
    outputs: dict


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _read_text(path) -> str:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return handle.read()
    except OSError as exc:
        raise _UsageError(f"cannot read {path}: {exc.strerror or exc}") from exc


def _resolve_seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    env = os.environ.get("MATRIXPOWER_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise _UsageError(
                f"MATRIXPOWER_SEED must be an integer, got {env!r}"
            ) from None
    return 0


def _load_design(args):
    if args.bigfive:
        if args.design is not None:
            raise _UsageError("--bigfive and --design are mutually exclusive")
        return builtin_bigfive()
    if args.design is None:
        raise _UsageError("a --design file (or --bigfive) is required")
    return parse_design(_read_text(args.design))


def _load_model(args):
    """Returns (moments, model) from --model or the built-in population."""
    if args.bigfive:
        if getattr(args, "model", None) is not None:
            raise _UsageError("--bigfive and --model are mutually exclusive")
        model = population_model()
        return build_moments(np.zeros(5), bigfive_correlation(), model), model
    if getattr(args, "model", None) is None:
        raise _UsageError("a --model file (or --bigfive) is required")
    return parse_model_document(_read_text(args.model))


def _emit(payload: dict, path=None):
    text = json.dumps(payload, indent=2)
    if path is None:
        print(text)
    else:
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(text + "\n")


def _manifest(command, config, seed, started, outputs) -> dict:
    return asdict(
        RunManifest(
            command=command,
            config=config,
            seed=seed,
            version=__version__,
            started_utc=started,
            finished_utc=_now(),
            outputs=outputs,
        )
    )


# ---------------------------------------------------------------------------
# Hypothesis plumbing shared by power and samplesize


def _coefficient_index(args, p: int) -> int:
    if args.coefficient is None:
        raise _UsageError(f"--hypothesis {args.hypothesis} needs --coefficient")
    j = int(args.coefficient)
    if not 1 <= j <= p:
        raise DomainError(f"--coefficient must lie in 1..{p}, got {j}")
    return j - 1


def _build_hypothesis(args, moments, model):
    """Returns (hypothesis, alternative model, description dict)."""
    p = model.p
    sigma_xx = moments.sigma[:p, :p]
    kind = args.hypothesis
    if kind == "overall":
        hypothesis, alternative = overall_test(model), model
        detail = {}
    elif kind == "r2-uniform":
        spec = r2_increase_uniform(model, sigma_xx, args.delta)
        hypothesis, alternative = spec.hypothesis, spec.alternative
        detail = {"delta": args.delta}
    elif kind == "r2-single":
        j = _coefficient_index(args, p)
        spec = r2_increase_single(model, sigma_xx, args.delta, j)
        hypothesis, alternative = spec.hypothesis, spec.alternative
        detail = {"delta": args.delta, "coefficient": j + 1}
    else:  # slope-zero
        j = _coefficient_index(args, p)
        hypothesis, alternative = single_slope_test(p, j), model
        detail = {"coefficient": j + 1}
    description = {
        "kind": kind,
        "q": hypothesis.q,
        "constraint": hypothesis.constraint.tolist(),
        "value": hypothesis.value.tolist(),
        **detail,
    }
    return hypothesis, alternative, description


def _report_at(moments, alternative, design):
    """Asymptotic report with the covariance evaluated at the alternative."""
    p = alternative.p
    mu_x = moments.mu[:p]
    sigma_xx = moments.sigma[:p, :p]
    return report(build_moments(mu_x, sigma_xx, alternative), design, 1.0)


# ---------------------------------------------------------------------------
# Commands


def cmd_validate(args) -> int:
    started = _now()
    design = _load_design(args)
    estimability = validate_estimability(design)
    payload = {
        "manifest": _manifest(
            "validate",
            {"design": args.design or "builtin:bigfive"},
            _resolve_seed(args),
            started,
            {"report": "-"},
        ),
        "estimable": not estimability.singular,
        "uncovered_pairs": [list(pair) for pair in estimability.uncovered_pairs],
        "pair_coverage": [
            {"pair": list(pair), "forms": list(forms)}
            for pair, forms in estimability.pair_coverage.items()
        ],
    }
    _emit(payload)
    return EXIT_OK if not estimability.singular else EXIT_DOMAIN


def cmd_asymptotics(args) -> int:
    started = _now()
    design = _load_design(args)
    moments, _ = _load_model(args)
    result = report(moments, design, float(args.n))
    payload = {
        "manifest": _manifest(
            "asymptotics",
            {
                "design": args.design or "builtin:bigfive",
                "model": getattr(args, "model", None) or "builtin:bigfive",
                "n": args.n,
            },
            _resolve_seed(args),
            started,
            {"report": "-"},
        ),
        **result.to_json_dict(),
    }
    _emit(payload)
    return EXIT_OK


def cmd_power(args) -> int:
    started = _now()
    design = _load_design(args)
    moments, model = _load_model(args)
    hypothesis, alternative, description = _build_hypothesis(args, moments, model)
    shape = _report_at(moments, alternative, design)
    masked_power = wald_power(
        hypothesis, alternative, shape.cov_beta_unit, args.n, alpha=args.alpha
    )
    complete_power = wald_power(
        hypothesis, alternative, shape.cov_beta_complete_unit, args.n, alpha=args.alpha
    )
    rate = noncentrality_rate(hypothesis, alternative, shape.cov_beta_unit)
    payload = {
        "manifest": _manifest(
            "power",
            {
                "design": args.design or "builtin:bigfive",
                "model": getattr(args, "model", None) or "builtin:bigfive",
                "hypothesis": args.hypothesis,
                "n": args.n,
                "alpha": args.alpha,
                "delta": args.delta,
                "coefficient": args.coefficient,
            },
            _resolve_seed(args),
            started,
            {"report": "-"},
        ),
        "hypothesis": description,
        "alpha": args.alpha,
        "n_total": args.n,
        "noncentrality": args.n * rate,
        "power": masked_power,
        "complete": {"power": complete_power},
    }
    _emit(payload)
    return EXIT_OK


def cmd_samplesize(args) -> int:
    started = _now()
    design = _load_design(args)
    moments, model = _load_model(args)
    hypothesis, alternative, description = _build_hypothesis(args, moments, model)
    spec = PowerSpec(
        hypothesis, alternative, alpha=args.alpha, target_power=args.power
    )
    shape = _report_at(moments, alternative, design)
    masked = sample_size(
        spec, shape.cov_beta_unit, design.form_count, design.allocation
    )
    complete = sample_size(spec, shape.cov_beta_complete_unit)
    payload = {
        "manifest": _manifest(
            "samplesize",
            {
                "design": args.design or "builtin:bigfive",
                "model": getattr(args, "model", None) or "builtin:bigfive",
                "hypothesis": args.hypothesis,
                "alpha": args.alpha,
                "power": args.power,
                "delta": args.delta,
                "coefficient": args.coefficient,
                "oracle": args.oracle,
            },
            _resolve_seed(args),
            started,
            {"report": "-"},
        ),
        "hypothesis": description,
        "alpha": args.alpha,
        "target_power": args.power,
        "masked": {
            "n_total": masked.n_total,
            "per_form": list(masked.per_form),
            "achieved_power": masked.achieved_power,
            "noncentrality": masked.noncentrality,
        },
        "complete": {
            "n_total": complete.n_total,
            "achieved_power": complete.achieved_power,
        },
    }
    if args.oracle:
        payload["oracle"] = _z_oracle(
            hypothesis, alternative, shape.cov_beta_unit, args, masked, design
        )
    _emit(payload)
    return EXIT_OK


def _z_oracle(hypothesis, alternative, cov_unit, args, masked, design) -> dict:
    """Closed-form z-test size for one-constraint tests, next to the search."""
    if hypothesis.q != 1:
        raise DomainError(
            f"--oracle applies to single-constraint hypotheses, got q={hypothesis.q}"
        )
    effect = float(
        (hypothesis.constraint @ alternative.beta_full - hypothesis.value)[0]
    )
    variance_unit = float(
        (hypothesis.constraint @ cov_unit @ hypothesis.constraint.T)[0, 0]
    )
    z_sum = normal_quantile(1.0 - args.alpha / 2.0) + normal_quantile(args.power)
    n_exact = z_sum**2 * variance_unit / effect**2
    return {
        "n_continuous": n_exact,
        "n": int(math.ceil(n_exact)),
        "search_n_total": masked.n_total,
        "granule": design.form_count,
        "agrees_within_granule": abs(masked.n_total - n_exact)
        <= design.form_count + 1,
    }


def cmd_explore(args) -> int:
    started = _now()
    config = ExploreConfig(
        draws=args.draws,
        r2=args.r2,
        delta=args.delta,
        alpha=args.alpha,
        power=args.power,
        n_reference=args.n_reference,
        seed=_resolve_seed(args),
    )
    result = explore(config, threads=args.threads)
    result.write_csv(args.csv)
    sidecar = str(Path(args.csv).with_suffix(".manifest.json"))
    manifest = _manifest(
        "explore",
        {**asdict(config), "threads": args.threads},
        config.seed,
        started,
        {
            "csv": str(args.csv),
            "summary": args.json or "-",
            "manifest": sidecar,
        },
    )
    _emit(manifest, sidecar)
    payload = result.to_json_dict()
    payload["manifest"] = manifest
    _emit(payload, args.json)
    return EXIT_OK


def cmd_simulate(args) -> int:
    started = _now()
    methods = tuple(m for m in args.methods.split(",") if m)
    config = SimConfig(
        n=args.n,
        reps=args.reps,
        m_small=args.m_small,
        m_large=args.m_large,
        methods=methods,
        seed=_resolve_seed(args),
    )
    result = simulate(config, threads=args.threads)
    result.write_csv(args.csv)
    sidecar = str(Path(args.csv).with_suffix(".manifest.json"))
    config_dict = asdict(config)
    config_dict["methods"] = list(config.methods)
    manifest = _manifest(
        "simulate",
        {**config_dict, "threads": args.threads},
        config.seed,
        started,
        {
            "csv": str(args.csv),
            "summary": args.json or "-",
            "manifest": sidecar,
        },
    )
    _emit(manifest, sidecar)
    payload = result.to_json_dict()
    payload["manifest"] = manifest
    _emit(payload, args.json)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def _add_input_arguments(parser, with_model=True):
    parser.add_argument("--design", metavar="FILE", help="design JSON file")
    if with_model:
        parser.add_argument(
            "--model",
            metavar="FILE",
            help="model JSON file (mu_x, sigma_xx, beta0, beta, sigma2 or r2)",
        )
    parser.add_argument(
        "--bigfive",
        action="store_true",
        help="use the built-in five-trait pairwise plan and its population model",
    )
    # Accepted everywhere for a uniform interface; the analytic commands
    # consume no randomness and only record the resolved value.
    parser.add_argument("--seed", type=int, default=None)


def _add_hypothesis_arguments(parser):
    parser.add_argument(
        "--hypothesis",
        choices=("overall", "r2-uniform", "r2-single", "slope-zero"),
        default="overall",
        help="overall: all slopes zero; r2-uniform: all slopes inflated to "
        "raise R^2 by delta; r2-single: one slope moved alone; slope-zero: "
        "one slope tested against zero",
    )
    parser.add_argument("--delta", type=float, default=0.01,
                        help="target R^2 increase for the r2-* hypotheses")
    parser.add_argument("--coefficient", type=int, default=None, metavar="J",
                        help="1-based slope index for r2-single / slope-zero")
    parser.add_argument("--alpha", type=float, default=0.05)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="matrixpower", description=__doc__.splitlines()[0])
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("validate", help="check a design identifies every moment")
    _add_input_arguments(p, with_model=False)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("asymptotics", help="large-sample SE / FMI report")
    _add_input_arguments(p)
    p.add_argument("--n", type=float, default=1000.0, help="total respondents")
    p.set_defaults(func=cmd_asymptotics)

    p = sub.add_parser("power", help="Wald test power at a given sample size")
    _add_input_arguments(p)
    _add_hypothesis_arguments(p)
    p.add_argument("--n", type=float, required=True, help="total respondents")
    p.set_defaults(func=cmd_power)

    p = sub.add_parser("samplesize", help="smallest n reaching target power")
    _add_input_arguments(p)
    _add_hypothesis_arguments(p)
    p.add_argument("--power", type=float, default=0.8, help="target power")
    p.add_argument(
        "--oracle",
        action="store_true",
        help="also print the closed-form z-test size (single-constraint tests)",
    )
    p.set_defaults(func=cmd_samplesize)

    p = sub.add_parser("explore", help="analytic sample-size sweep over slopes")
    p.add_argument("--draws", type=int, default=1000)
    p.add_argument("--r2", type=float, default=0.15)
    p.add_argument("--delta", type=float, default=0.01)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--power", type=float, default=0.8)
    p.add_argument("--n-reference", type=int, default=1000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--csv", required=True, metavar="FILE",
                   help="per-draw table destination")
    p.add_argument("--json", default=None, metavar="FILE",
                   help="summary destination (default: stdout)")
    p.set_defaults(func=cmd_explore)

    p = sub.add_parser("simulate", help="finite-sample estimator comparison")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--reps", type=int, default=1200)
    p.add_argument("--m-small", type=int, default=5)
    p.add_argument("--m-large", type=int, default=50)
    p.add_argument("--methods", default=",".join(SIM_METHODS),
                   help="comma-separated subset of " + ",".join(SIM_METHODS))
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--csv", required=True, metavar="FILE",
                   help="per-replicate table destination")
    p.add_argument("--json", default=None, metavar="FILE",
                   help="summary destination (default: stdout)")
    p.set_defaults(func=cmd_simulate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SchemaError as exc:
        print(f"SchemaError: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _NUMERICAL_ERRORS as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except MatrixPowerError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def run():
    raise SystemExit(main())


if __name__ == "__main__":
    run()
