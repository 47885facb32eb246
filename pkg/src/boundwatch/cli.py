"""Command-line front end.

Exit codes: 0 = WD, 1 = OOD, 3 = UNKNOWN (``detect`` only), 2 = usage or input error.
Other subcommands exit 0 on success; `validate` exits 1 when a guarantee check fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from boundwatch.certificates import build_certificate, certificate_id, certificate_to_json, load_certificate
from boundwatch.detectors import Verdict, detect_confidence_interval, detect_hypothesis
from boundwatch.distributions import DiagonalGaussian, renyi2_divergence
from boundwatch.harness import (
    load_config,
    persist_results,
    prepare_policy,
    run_detection_sweep,
    run_guarantee_validation,
    run_lower_bound_validation,
    run_rate_tuning,
)

log = logging.getLogger("boundwatch")

EXIT_CODES = {Verdict.WD: 0, Verdict.OOD: 1, Verdict.UNKNOWN: 3}
EXIT_ERROR = 2

_EPILOG = "detect exit codes: 0 = WD, 1 = OOD, 3 = UNKNOWN, 2 = error"


class CliError(Exception):
    pass


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the master seed")
    common.add_argument("--output", default=None, help="output directory (or file for certify)")
    common.add_argument("-v", "--verbose", action="count", default=0)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="boundwatch", description=__doc__.splitlines()[0], epilog=_EPILOG)
    sub = parser.add_subparsers(dest="command", metavar="{train,certify,detect,sweep,validate}")

    p = sub.add_parser("train", parents=[common], help="train a posterior and certify one policy")
    p.add_argument("--config", required=True)

    p = sub.add_parser("certify", parents=[common], help="certificate from training costs and D2")
    p.add_argument("--posterior", required=True, help="posterior JSON {mean, log_variance}")
    p.add_argument("--prior", required=True, help="prior JSON {mean, log_variance}")
    p.add_argument("--costs", required=True, help="training costs, one per line")
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--m", type=int, required=True, help="training set size")
    p.add_argument("--policy-seed", type=int, default=0)

    p = sub.add_parser("detect", parents=[common], help="OOD / WD / UNKNOWN verdict for a test cost file", epilog=_EPILOG)
    p.add_argument("--cert", required=True)
    p.add_argument("--costs", required=True, help="test costs, one per line")
    p.add_argument("--method", choices=("ht", "ci"), required=True)
    p.add_argument(
        "--rates",
        type=float,
        nargs=2,
        default=(0.05, 0.05),
        metavar=("OOD_RATE", "WD_RATE"),
        help="ht: significance levels; ci: total false-positive / false-negative rates",
    )

    p = sub.add_parser("sweep", parents=[common], help="detector sweep and rate tuning")
    p.add_argument("--config", required=True)

    p = sub.add_parser("validate", parents=[common], help="Monte-Carlo check of every guarantee")
    p.add_argument("--config", required=True)
    p.add_argument("--lower-bound-datasets", type=int, default=0, help="also check the gap lower bound on this many datasets")
    return parser


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        raise SystemExit(EXIT_ERROR)
    return args


def read_costs(path) -> np.ndarray:
    """One cost in [0, 1] per line; errors name the offending line."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}") from exc
    costs = []
    for lineno, raw in enumerate(lines, start=1):
        text = raw.strip()
        try:
            value = float(text)
        except ValueError:
            raise CliError(f"{path}:{lineno}: not a number: {raw!r}") from None
        if not 0.0 <= value <= 1.0:
            raise CliError(f"{path}:{lineno}: cost {value} outside [0, 1]")
        costs.append(value)
    if not costs:
        raise CliError(f"{path}: no costs")
    return np.array(costs)


def _read_gaussian(path) -> DiagonalGaussian:
    try:
        return DiagonalGaussian.from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot load distribution from {path}: {exc}") from exc


def _write_json(path: Path, payload):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _config(args):
    config = load_config(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    return config


def _out_dir(args, config) -> Path:
    out = Path(args.output) if args.output else Path(config.output_dir) / config.run_id
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save_prepared(out: Path, config, prepared):
    _write_json(out / "config.json", config.to_dict())
    _write_json(out / "certificate.json", certificate_to_json(prepared.cert_upper, prepared.prior, prepared.posterior))


def cmd_train(args) -> int:
    config = _config(args)
    out = _out_dir(args, config)
    prepared = prepare_policy(config)
    _save_prepared(out, config, prepared)
    _write_json(out / "prior.json", prepared.prior.to_dict())
    _write_json(out / "posterior.json", prepared.posterior.to_dict())
    _write_json(out / "policy.json", {"seed": prepared.policy.seed_tag, "weights": prepared.policy.weights.tolist()})
    prepared.trace.to_csv(out / "trace.csv")
    (out / "training_costs.csv").write_text("".join(f"{c!r}\n" for c in prepared.training_costs.tolist()))
    cert = prepared.cert_upper
    print(f"C_S={cert.empirical_cost:.6g} upper={cert.upper_bound:.6g} lower={cert.lower_bound:.6g} d2={cert.d2:.6g} -> {out}")
    return 0


def cmd_certify(args) -> int:
    posterior, prior = _read_gaussian(args.posterior), _read_gaussian(args.prior)
    costs = read_costs(args.costs)
    if len(costs) != args.m:
        raise CliError(f"--m {args.m} does not match {len(costs)} costs in {args.costs}")
    d2 = renyi2_divergence(posterior, prior)
    cert = build_certificate(costs.mean(), d2, args.m, args.delta, args.policy_seed)
    text = json.dumps(certificate_to_json(cert, prior, posterior), indent=2, sort_keys=True) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def run_detect_file(cert_path, costs_path, method: str, rates=(0.05, 0.05)) -> tuple[int, str]:
    """Verdict for a cost file; returns (exit code, verdict line)."""
    try:
        cert, _, _ = load_certificate(cert_path)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise CliError(f"cannot load certificate {cert_path}: {exc}") from exc
    costs = read_costs(costs_path)
    rate_o, rate_w = rates
    if method == "ht":
        verdict = detect_hypothesis(costs.mean(), len(costs), cert, alpha_o=rate_o, alpha_w=rate_w)
    else:
        if rate_o <= cert.delta or rate_w <= cert.delta:
            raise CliError(f"rates must exceed the certificate delta {cert.delta}")
        verdict = detect_confidence_interval(
            costs.mean(), len(costs), cert, delta_o_prime=rate_o - cert.delta, delta_w_prime=rate_w - cert.delta
        )
    log.info("certificate %s, n=%d, mean cost %.6g", certificate_id(cert), len(costs), costs.mean())
    return EXIT_CODES[verdict.verdict], verdict.line()


def cmd_detect(args) -> int:
    code, line = run_detect_file(args.cert, args.costs, args.method, tuple(args.rates))
    print(line)
    return code


def cmd_sweep(args) -> int:
    config = _config(args)
    out = _out_dir(args, config)
    prepared = prepare_policy(config)
    _save_prepared(out, config, prepared)
    sweep = run_detection_sweep(config, prepared)
    persist_results(sweep, out)
    if config.rate_grid:
        persist_results(run_rate_tuning(config, prepared=prepared, sweep=sweep), out)
    print(f"{len(sweep.cells)} cells -> {out}")
    return 0


def cmd_validate(args) -> int:
    config = _config(args)
    out = _out_dir(args, config)
    _write_json(out / "config.json", config.to_dict())
    report = run_guarantee_validation(config)
    persist_results(report, out)
    for check in report.checks.values():
        status = "ok" if check.passed else "FAIL"
        print(f"{check.name}: {check.count}/{check.trials} = {check.rate:.4g} (bound {check.bound:.4g}) {status}")
    if args.lower_bound_datasets > 0:
        persist_results(run_lower_bound_validation(config, args.lower_bound_datasets), out)
    return 0 if report.passed else 1


COMMANDS = {
    "train": cmd_train,
    "certify": cmd_certify,
    "detect": cmd_detect,
    "sweep": cmd_sweep,
    "validate": cmd_validate,
}


def main(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_ERROR
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (CliError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
