"""Derandomized PAC-Bayes upper and lower bounds on expected cost."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from boundwatch._validation import check_open_unit, check_positive_int
from boundwatch.distributions import DiagonalGaussian

SCHEMA_VERSION = "cert_v1"
MIN_TRAINING_SIZE = 8


def regularizer(d2: float, m: int, delta: float) -> float:
    """``(d2 + ln(2 sqrt(m) / (delta/2)^3)) / (2m)``; infinite when `d2` is."""
    m = check_positive_int(m, "m", minimum=MIN_TRAINING_SIZE)
    delta = check_open_unit(delta, "delta")
    if math.isnan(d2) or d2 < 0.0:
        raise ValueError(f"d2 must be non-negative, got {d2}")
    if math.isinf(d2):
        return math.inf
    log_term = math.log(2.0) + 0.5 * math.log(m) - 3.0 * math.log(delta / 2.0)
    return (d2 + log_term) / (2.0 * m)


@dataclass(frozen=True)
class Certificate:
    """PAC-Bayes certificate for one deterministic policy drawn from a posterior.

    Both bounds are kept unclamped so detector arithmetic sees the raw values.
    """

    empirical_cost: float
    regularizer: float
    upper_bound: float
    lower_bound: float
    delta: float
    m: int
    d2: float
    policy_seed: int

    @property
    def width(self) -> float:
        return self.upper_bound - self.lower_bound

    def to_dict(self) -> dict:
        return asdict(self)


def build_certificate(
    empirical_cost: float, d2: float, m: int, delta: float, policy_seed: int = 0
) -> Certificate:
    """Bound the expected cost of the policy from its training cost and D2."""
    empirical_cost = float(empirical_cost)
    if not 0.0 <= empirical_cost <= 1.0:
        raise ValueError(f"empirical_cost must lie in [0, 1], got {empirical_cost}")
    reg = regularizer(d2, m, delta)
    slack = math.sqrt(reg)
    return Certificate(
        empirical_cost=empirical_cost,
        regularizer=reg,
        upper_bound=empirical_cost + slack,
        lower_bound=empirical_cost - slack,
        delta=float(delta),
        m=int(m),
        d2=float(d2),
        policy_seed=int(policy_seed),
    )


def certificate_to_json(
    cert: Certificate, prior: DiagonalGaussian, posterior: DiagonalGaussian
) -> dict:
    record = {"schema": SCHEMA_VERSION}
    record.update(cert.to_dict())
    for key in ("regularizer", "upper_bound", "lower_bound", "d2"):
        if math.isinf(record[key]):
            record[key] = "inf" if record[key] > 0 else "-inf"
    record["prior"] = prior.to_dict()
    record["posterior"] = posterior.to_dict()
    return record


def certificate_from_json(record: dict) -> tuple[Certificate, DiagonalGaussian, DiagonalGaussian]:
    if record.get("schema") != SCHEMA_VERSION:
        raise ValueError(f"unsupported certificate schema {record.get('schema')!r}")
    names = {f.name for f in fields(Certificate)}
    unknown = set(record) - names - {"schema", "prior", "posterior"}
    if unknown:
        raise ValueError(f"unknown certificate keys: {sorted(unknown)}")
    values = {name: record[name] for name in names}
    for key in ("regularizer", "upper_bound", "lower_bound", "d2"):
        values[key] = float(values[key])
    values["m"] = int(values["m"])
    values["policy_seed"] = int(values["policy_seed"])
    cert = Certificate(**values)
    return (
        cert,
        DiagonalGaussian.from_dict(record["prior"]),
        DiagonalGaussian.from_dict(record["posterior"]),
    )


def save_certificate(path, cert, prior, posterior) -> Path:
    path = Path(path)
    try:
        path.write_text(json.dumps(certificate_to_json(cert, prior, posterior), indent=2))
    except OSError as exc:
        raise OSError(f"could not write certificate to {path}: {exc}") from exc
    return path


def load_certificate(path) -> tuple[Certificate, DiagonalGaussian, DiagonalGaussian]:
    path = Path(path)
    with path.open() as fh:
        return certificate_from_json(json.load(fh))


def certificate_id(cert: Certificate) -> str:
    """Short content hash identifying a certificate."""
    payload = json.dumps(cert.to_dict(), sort_keys=True, default=repr).encode()
    return hashlib.sha256(payload).hexdigest()[:12]
