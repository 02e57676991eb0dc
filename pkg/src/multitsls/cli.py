"""Command-line entry point: simulate, estimate, diagnose, test, decompose.

Exit status is 0 on success, 1 for invalid input and 2 when a numerical
identification condition fails. Reports carry a hash of their inputs and the
package version and contain no timestamps, so reruns are byte-identical.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .design import Population
from .errors import RankError, ShapeError, ValidationError
from .estimator import tsls_estimate, tsls_population_estimand
from .implications import (
    DEFAULT_BOOT,
    covary_similarly_test,
    kitagawa_test,
    linearity_test,
    subsample_first_stage_test,
)
from .io import (
    config_hash,
    dumps,
    file_digest,
    load_coding,
    read_dataset,
    read_json,
    write_dataset,
    write_text,
)
from .oracle import (
    bias_decomposition,
    covariate_weight_analysis,
    identification_report,
    just_identified_analysis,
    monotonicity_checks,
)
from .simulate import sample_dataset

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2


def _provenance(args, keys) -> dict:
    inputs = {}
    for attr in ("config", "data"):
        path = getattr(args, attr, None)
        if path:
            inputs[attr] = file_digest(path)
    settings = {k: getattr(args, k) for k in keys}
    payload = {"command": args.command, "inputs": inputs, "settings": settings}
    return {"config_hash": config_hash(payload), "version": __version__, "settings": settings}


def _emit(args, name: str, report: dict, text: str | None = None) -> None:
    body = dumps(report)
    if args.out is None:
        sys.stdout.write(text if text is not None else body)
        return
    out = Path(args.out)
    targets = [(out / f"{name}.json", body)]
    if text is not None:
        targets.append((out / f"{name}.txt", text))
    for path, _ in targets:
        if path.exists() and not args.force:
            raise FileExistsError(f"{path} exists; pass --force to overwrite")
    for path, content in targets:
        write_text(path, content, args.force)


def _population(args) -> Population:
    if not args.config:
        raise ValidationError("--config is required")
    return Population.from_dict(read_json(args.config))


def cmd_simulate(args) -> dict:
    cfg = read_json(args.config)
    pop = Population.from_dict(cfg)
    opts = dict(cfg.get("sample", {}))
    n = args.n if args.n is not None else opts.get("n")
    if n is None:
        raise ValidationError("sample size missing: give --n or sample.n in the config")
    seed = args.seed if args.seed is not None else opts.get("seed", 0)
    data = sample_dataset(
        pop,
        int(n),
        int(seed),
        noise_sd=float(opts.get("noise_sd", 1.0)),
        flags=opts.get("flags"),
        binary_cut=opts.get("binary_cut"),
    )
    report = _provenance(args, ["n", "seed"]) | {"n_obs": data.n_obs, "seed": int(seed), "n": int(n)}
    report["population_estimand"] = tsls_population_estimand(pop).tolist()
    if args.out is None:
        raise ValidationError("--out is required for simulate")
    csv_path = Path(args.out) / "data.csv"
    if csv_path.exists() and not args.force:
        raise FileExistsError(f"{csv_path} exists; pass --force to overwrite")
    Path(args.out).mkdir(parents=True, exist_ok=True)
    write_dataset(data, csv_path)
    report["data_sha256"] = file_digest(csv_path)
    _emit(args, "simulate", report)
    return report


def _coding_and_data(args):
    if not args.data:
        raise ValidationError("--data is required")
    if not args.config:
        raise ValidationError("--config with a treatment coding is required")
    coding = load_coding(args.config)
    data = read_dataset(args.data, cell_column=args.fe)
    return coding, data


def cmd_estimate(args) -> dict:
    coding, data = _coding_and_data(args)
    result = tsls_estimate(data, coding, fe_cell=args.fe is not None)
    report = _provenance(args, ["fe"]) | result.to_dict()
    lines = [f"2SLS, {result.n_obs} observations" + (f", fixed effects by {args.fe}" if args.fe else "")]
    for k, (b, s) in enumerate(zip(result.beta, result.se)):
        lines.append(f"  D{k + 1}: {b: .6f}  ({s:.6f})")
    _emit(args, "estimate", report, "\n".join(lines) + "\n")
    return report


def cmd_diagnose(args) -> dict:
    pop = _population(args)
    report = _provenance(args, [])
    ident = identification_report(pop)
    report["identification"] = ident.to_dict()
    report["estimand"] = tsls_population_estimand(pop).tolist()
    mono = monotonicity_checks(pop)
    report["monotonicity"] = {"joint": mono.joint, "unordered": mono.unordered, "kirkeboen": mono.kirkeboen}
    if pop.design.n_points == pop.coding.n_treatments and pop.design.m == pop.n:
        ji = just_identified_analysis(pop)
        report["just_identified"] = {
            "passes": ji.passes,
            "labeling": ji.labeling,
            "unique": ji.unique,
            "classes": list(ji.classes),
        }
    if pop.has_cells:
        report["covariates"] = covariate_weight_analysis(pop).to_dict()
    return _finish(args, "diagnose", report)


def _finish(args, name, report, text=None):
    _emit(args, name, report, text)
    return report


def cmd_test(args) -> dict:
    coding, data = _coding_and_data(args)
    fe = args.fe is not None
    if args.kind == "kitagawa":
        res = kitagawa_test(data, coding, bins=args.bins, fe_cell=fe)
    elif args.kind == "subsample":
        if not args.flag:
            raise ValidationError("--flag is required for the subsample test")
        res = subsample_first_stage_test(data, coding, args.flag, fe_cell=fe)
    elif args.kind == "covary":
        if not fe:
            raise ValidationError("--fe names the cell column needed by the covary test")
        res = covary_similarly_test(data, coding, boot=args.boot, seed=args.seed or 0)
    else:
        out = linearity_test(data, (1, 0), coding=coding, fe_cell=fe, bins=args.bins or 20)
        report = _provenance(args, ["kind", "fe", "bins"]) | {"linearity": out}
        return _finish(args, f"test_{args.kind}", report)
    report = _provenance(args, ["kind", "fe", "flag", "bins", "boot", "seed"]) | res.to_dict()
    return _finish(args, f"test_{args.kind}", report, res.to_text())


def cmd_decompose(args) -> dict:
    pop = _population(args)
    rows = range(pop.n) if args.row is None else [args.row - 1]
    report = _provenance(args, ["row"])
    report["decompositions"] = [bias_decomposition(pop, k).to_dict() for k in rows]
    return _finish(args, "decompose", report)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multitsls", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON population or coding file")
        p.add_argument("--out", help="output directory (stdout when omitted)")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        return p

    p = common(sub.add_parser("simulate", help="draw a dataset from a population"))
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int)
    p.set_defaults(func=cmd_simulate)

    p = common(sub.add_parser("estimate", help="2SLS with HC0 standard errors"))
    p.add_argument("--data", help="CSV with y, t, z_* columns")
    p.add_argument("--fe", metavar="COLUMN", help="cell column for fixed effects")
    p.set_defaults(func=cmd_estimate)

    p = common(sub.add_parser("diagnose", help="exact weights and identification checks"))
    p.set_defaults(func=cmd_diagnose)

    p = common(sub.add_parser("test", help="sample tests of the implied restrictions"))
    p.add_argument("--kind", choices=["kitagawa", "subsample", "linearity", "covary"], required=True)
    p.add_argument("--data")
    p.add_argument("--fe", metavar="COLUMN")
    p.add_argument("--flag", help="0/1 column selecting the subsample")
    p.add_argument("--bins", type=int)
    p.add_argument("--boot", type=int, default=DEFAULT_BOOT)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_test)

    p = common(sub.add_parser("decompose", help="complier/defier/cross decomposition"))
    p.add_argument("--row", type=int, help="1-based coefficient (all when omitted)")
    p.set_defaults(func=cmd_decompose)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except RankError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValidationError, ShapeError, FileExistsError, FileNotFoundError, json.JSONDecodeError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except np.linalg.LinAlgError as exc:
        print(f"error: rank condition: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
