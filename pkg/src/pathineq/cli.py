"""Batch command line over the experiment and constant layers.

Three subcommands::

    pathineq run SPEC.toml [--out DIR] [--seed N] [--n-paths N] [--steps N]
    pathineq suite [--out DIR] [--seed N] [--parallel N] [--n-paths N]
                   [--steps N] [-v]
    pathineq constants key=value [key=value ...]

``run`` executes one TOML experiment spec (schema: see ``experiments``,
versioned ``[experiment]`` header) and exits 0 on Pass or
StatisticallyInconclusive, 2 on Fail, 1 on any parse/IO error.  ``suite``
runs the pinned standard battery, optionally across processes — results
are deterministic for a given seed regardless of parallelism — prints a
one-row-per-spec summary, and exits by the worst verdict.  ``constants``
evaluates every constant calculator the given metadata supports and
prints one JSON object with formula tags.

Stdout stays human-readable (the ``constants`` JSON is the one structured
printout); machine artifacts land only in files under ``--out``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .bsdesolve import constants_from_metadata
from .experiments import (
    ExperimentResult,
    ExperimentSpec,
    load_spec,
    run_experiment,
    standard_suite,
)
from .inequalities import lipschitz_pushforward_constant
from .pathcore import make_grid
from .sdesolve import build_zvonkin, sde_model_library, zvonkin_constants
from .stopping import stopping_constants

_VERDICT_EXIT = {"Pass": 0, "StatisticallyInconclusive": 0, "Fail": 2}


class _CliError(Exception):
    """Raised for anything that should become exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; 2 is the Fail exit here,
    # so reroute parse errors through the ordinary error path instead
    def error(self, message):
        raise _CliError(message)


@dataclass(frozen=True)
class CliConfig:
    """Parsed invocation: subcommand plus the shared flag set."""

    subcommand: str
    spec_path: Optional[Path] = None
    out_dir: Optional[Path] = None
    seed: Optional[int] = None
    parallel: int = 1
    n_paths: Optional[int] = None
    steps: Optional[int] = None
    verbose: bool = False
    pairs: tuple = ()


def _build_parser() -> _Parser:
    parser = _Parser(prog="pathineq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)

    run = sub.add_parser("run", help="run one TOML experiment spec")
    run.add_argument("spec", type=Path, help="experiment spec file (TOML)")
    run.add_argument("--out", type=Path, default=None,
                     help="directory for report.json/tails.csv/samples.bin")
    run.add_argument("--seed", type=int, default=None,
                     help="override the spec seed")
    run.add_argument("--n-paths", type=int, default=None,
                     help="override the verifier sample size")
    run.add_argument("--steps", type=int, default=None,
                     help="override the time-grid step count")

    suite = sub.add_parser("suite", help="run the pinned standard battery")
    suite.add_argument("--out", type=Path, default=Path("runs"),
                       help="artifact root, one subdirectory per spec")
    suite.add_argument("--seed", type=int, default=None,
                       help="rebase every spec seed (spec i gets seed+i)")
    suite.add_argument("--parallel", type=int, default=1,
                       help="number of worker processes")
    suite.add_argument("--n-paths", type=int, default=None,
                       help="override the verifier sample size")
    suite.add_argument("--steps", type=int, default=None,
                       help="override the time-grid step count")
    suite.add_argument("-v", "--verbose", action="store_true",
                       help="print the per-tilt table for each spec")

    cons = sub.add_parser(
        "constants", help="evaluate constant formulas from metadata")
    cons.add_argument("pairs", nargs="*", metavar="key=value",
                      help="model metadata, e.g. L_F=1 L_g=0 T=1")
    return parser


def _config_from(args: argparse.Namespace) -> CliConfig:
    return CliConfig(
        subcommand=args.subcommand,
        spec_path=getattr(args, "spec", None),
        out_dir=getattr(args, "out", None),
        seed=getattr(args, "seed", None),
        parallel=int(getattr(args, "parallel", 1) or 1),
        n_paths=getattr(args, "n_paths", None),
        steps=getattr(args, "steps", None),
        verbose=bool(getattr(args, "verbose", False)),
        pairs=tuple(getattr(args, "pairs", ()) or ()),
    )


# ---------------------------------------------------------------------------
# run / suite


def _override(spec: ExperimentSpec, cfg: CliConfig,
              seed: Optional[int]) -> ExperimentSpec:
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if cfg.n_paths is not None:
        changes["n_paths"] = cfg.n_paths
    if cfg.steps is not None:
        changes["steps"] = cfg.steps
    return dataclasses.replace(spec, **changes) if changes else spec


def _tilt_table(result: ExperimentResult, indent: str = "  ") -> str:
    rows = [(r.label, f"{r.entropy:.4f}", f"{r.debiased_w2:.4f}",
             f"{r.rhs:.4f}", f"{r.margin:+.4f}", r.verdict)
            for r in result.transport.records]
    head = ("tilt", "entropy", "debiased_W2", "rhs", "margin", "verdict")
    widths = [max(len(head[j]), *(len(row[j]) for row in rows))
              for j in range(len(head))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [indent + fmt.format(*head)]
    lines += [indent + fmt.format(*row) for row in rows]
    return "\n".join(lines)


def _check_word(report: dict) -> str:
    if report.get("passed") is True:
        return "pass"
    if report.get("passed") is False:
        return "FAIL"
    return str(report.get("flag", "done"))


def _checks_summary(checks: dict) -> str:
    return " ".join(f"{name}:{_check_word(rep)}"
                    for name, rep in sorted(checks.items())) or "-"


def _print_run(result: ExperimentResult) -> None:
    spec = result.spec
    ver = json.loads(result.transport.to_json())
    derived = "derived" if spec.verifier.get("C") is None else "pinned"
    print(f"{spec.name} [{spec.recipe}] seed={spec.seed} "
          f"n={spec.n_paths} steps={spec.steps} T={spec.horizon:g}")
    print(f"  C = {ver['C']:g} ({derived})  theta = {ver['theta']:g}  "
          f"p = {ver['p']:g}")
    print(_tilt_table(result))
    if result.checks:
        print(f"  checks: {_checks_summary(result.checks)}")
    if result.out_dir is not None:
        print(f"  artifacts: {result.out_dir}")
    print(f"verdict: {result.verdict}")


def cmd_run(cfg: CliConfig) -> int:
    spec = _override(load_spec(cfg.spec_path), cfg, cfg.seed)
    result = run_experiment(spec, out_dir=cfg.out_dir)
    _print_run(result)
    return _VERDICT_EXIT[result.verdict]


def _run_one(task) -> dict:
    spec, out_dir = task
    result = run_experiment(spec, out_dir=out_dir)
    return {
        "name": spec.name,
        "recipe": spec.recipe,
        "claim": spec.claim,
        "verdict": result.verdict,
        "worst_margin": min(r.margin for r in result.transport.records),
        "checks": _checks_summary(result.checks),
        "out": "" if result.out_dir is None else str(result.out_dir),
        "table": _tilt_table(result),
    }


def cmd_suite(cfg: CliConfig) -> int:
    specs = [_override(s, cfg, None if cfg.seed is None else cfg.seed + i)
             for i, s in enumerate(standard_suite())]
    tasks = [(s, cfg.out_dir) for s in specs]
    if cfg.parallel > 1:
        with ProcessPoolExecutor(max_workers=cfg.parallel) as pool:
            rows = list(pool.map(_run_one, tasks))
    else:
        rows = [_run_one(t) for t in tasks]

    head = ("name", "recipe", "verdict", "worst-margin", "checks")
    cells = [(r["name"], r["recipe"], r["verdict"],
              f"{r['worst_margin']:+.4f}", r["checks"]) for r in rows]
    widths = [max(len(head[j]), *(len(c[j]) for c in cells))
              for j in range(len(head))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    print(fmt.format(*head))
    for row, cell in zip(rows, cells):
        print(fmt.format(*cell))
        if cfg.verbose:
            print(row["table"])
    counts = {v: sum(r["verdict"] == v for r in rows)
              for v in ("Pass", "StatisticallyInconclusive", "Fail")}
    worst = max(_VERDICT_EXIT[r["verdict"]] for r in rows)
    print(f"suite verdict: {'Fail' if worst else 'Pass'} "
          f"({len(rows)} specs: {counts['Pass']} Pass, "
          f"{counts['Fail']} Fail, "
          f"{counts['StatisticallyInconclusive']} Inconclusive)")
    if cfg.out_dir is not None:
        print(f"artifacts: {cfg.out_dir}")
    return worst


# ---------------------------------------------------------------------------
# constants

_NUMERIC_KEYS = ("L_F", "L_g", "T", "m", "d", "linear_L_G", "L_Gamma",
                 "C", "L", "steps", "n_x")
_STRING_KEYS = ("cls", "sde")

_USAGE_GROUPS = (
    "BSDE constants need L_F (optional: L_g=0, T=1, m=1, d=1, "
    "cls=lipschitz|linear|quadratic_convex, linear_L_G); "
    "stopped-value constants need L_Gamma; "
    "Lipschitz pushforward needs C and L; "
    "drift-transform constants need sde=<model name> "
    "(optional: sde.<param>, T, steps, n_x)"
)


def _parse_pairs(pairs) -> dict:
    values: dict = {}
    for raw in pairs:
        key, sep, text = raw.partition("=")
        if not sep or not key:
            raise _CliError(f"expected key=value, got {raw!r}")
        if key in _STRING_KEYS:
            values[key] = text
            continue
        if key in _NUMERIC_KEYS or key.startswith("sde."):
            try:
                values[key] = int(text)
            except ValueError:
                try:
                    values[key] = float(text)
                except ValueError:
                    raise _CliError(
                        f"field {key} needs a number, got {text!r}"
                    ) from None
            continue
        known = ", ".join(_NUMERIC_KEYS + _STRING_KEYS + ("sde.<param>",))
        raise _CliError(f"unknown field {key!r}; known fields: {known}")
    return values


def _bsde_block(v: dict) -> dict:
    if "L_F" not in v:
        raise _CliError("BSDE constants missing fields: L_F")
    cls = v.get("cls", "linear" if "linear_L_G" in v else "lipschitz")
    cons = constants_from_metadata(
        cls, float(v["L_F"]), float(v.get("L_g", 0.0)),
        float(v.get("T", 1.0)), m=int(v.get("m", 1)), d=int(v.get("d", 1)),
        linear_L_G=(None if v.get("linear_L_G") is None
                    else float(v["linear_L_G"])),
    )
    block = {k: val for k, val in dataclasses.asdict(cons).items()
             if val is not None}
    if cls == "quadratic_convex":
        block["formulas"] = {
            "C_y": "2 L_F^2",
            "L_Y": "L_F",
            "lsi": "T * C_y",
        }
    else:
        block["formulas"] = {
            "C_y": "2 (L_F + T L_g)^2 exp(2 T L_g)",
            "L_Y": "(L_F + T L_g) exp(T L_g)",
            "lsi": "T * C_y",
            "z_bound": "m L_F^2 exp((2 L_g + L_g^2 + 1) T) + m L_g^2 T",
            "C_z_quartic": "2 (1 + z_bound^4)^(1/4)",
            "Lambda": "sqrt(2 d m (L_F^2 + T L_g^2))",
        }
        if cls == "linear":
            block["formulas"]["C_z"] = "2 (L_F + T L_G)^2 exp(2 T L_G)"
            block["formulas"]["C_yz"] = "max(C_y, C_z)"
    return block


def _zvonkin_block(v: dict) -> dict:
    params = {key[4:]: val for key, val in v.items()
              if key.startswith("sde.")}
    model = sde_model_library(v["sde"], **params)
    grid = make_grid(float(v.get("T", 1.0)), int(v.get("steps", 100)))
    transform = build_zvonkin(model, grid, n_x=int(v.get("n_x", 2001)))
    cons = zvonkin_constants(model, transform)
    block = json.loads(cons.to_json())
    block["formula"] = (
        "C_x = 2 exp(2 c2 (2 + c1 c3 T)^2) over the admissible "
        "variant readings; see log_variants for all of them"
    )
    return block


def cmd_constants(cfg: CliConfig) -> int:
    values = _parse_pairs(cfg.pairs)
    out: dict = {"inputs": values}
    if {"L_F", "L_g", "cls", "linear_L_G"} & set(values):
        out["bsde"] = _bsde_block(values)
    if "L_Gamma" in values:
        L_Gamma = float(values["L_Gamma"])
        out["stopping"] = {
            "L_Gamma": L_Gamma,
            "C_s": stopping_constants(L_Gamma),
            "formula": "C_s = 2 L_Gamma^2",
        }
    if {"C", "L"} & set(values):
        missing = sorted({"C", "L"} - set(values))
        if missing:
            raise _CliError(
                "pushforward constants missing fields: " + ", ".join(missing)
            )
        out["pushforward"] = {
            "C": float(values["C"]),
            "L": float(values["L"]),
            "C_image": lipschitz_pushforward_constant(
                float(values["C"]), float(values["L"])),
            "formula": "C_image = C L^2",
        }
    if "sde" in values:
        out["zvonkin"] = _zvonkin_block(values)
    if len(out) == 1:
        raise _CliError("no model metadata given; " + _USAGE_GROUPS)
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        cfg = _config_from(parser.parse_args(argv))
        if cfg.subcommand == "run":
            return cmd_run(cfg)
        if cfg.subcommand == "suite":
            return cmd_suite(cfg)
        return cmd_constants(cfg)
    except _CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, TypeError, RuntimeError) as err:
        message = err.args[0] if err.args else str(err)
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
