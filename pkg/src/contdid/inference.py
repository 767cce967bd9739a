"""Unit-level (cluster) bootstrap for any estimator of a :class:`Panel`."""

from __future__ import annotations

from collections.abc import Callable, Mapping
from dataclasses import dataclass

import numpy as np

from .errors import ContDidError, TooManyFailures
from .panel import Panel

__all__ = ["BootstrapSpec", "BootstrapResult", "bootstrap", "bootstrap_many", "resample_index", "attach"]


@dataclass(frozen=True)
class BootstrapSpec:
    """Number of replicates, seed and confidence level."""

    replications: int = 200
    seed: int = 0
    ci_level: float = 0.95

    def __post_init__(self):
        if int(self.replications) != self.replications or self.replications < 2:
            raise ValueError(f"replications must be an integer >= 2, got {self.replications}")
        if not 0.0 < self.ci_level < 1.0:
            raise ValueError(f"ci_level must lie in (0, 1), got {self.ci_level}")
        if int(self.seed) != self.seed or self.seed < 0 or self.seed >= 2**64:
            raise ValueError(f"seed must be an integer in [0, 2**64), got {self.seed}")


@dataclass(frozen=True)
class BootstrapResult:
    se: float
    ci_low: float
    ci_high: float
    n_failed: int
    replicates: np.ndarray
    ci_level: float

    def to_dict(self) -> dict:
        return {"se": self.se, "ci_low": self.ci_low, "ci_high": self.ci_high,
                "n_failed": self.n_failed, "ci_level": self.ci_level}


def resample_index(n: int, seed: int, r: int) -> np.ndarray:
    """Units drawn for replicate ``r``; depends on ``(seed, r)`` only."""
    return np.random.default_rng([int(seed), int(r)]).integers(0, n, size=n)


def _one(estimator, panel, seed, r):
    try:
        out = estimator(panel.take(resample_index(panel.n_units, seed, r)))
    except ContDidError:
        return None
    if isinstance(out, Mapping):
        return {k: float(v) for k, v in out.items()}
    return float(out)


def _summarise(values, B, ci_level, key=None) -> BootstrapResult:
    vals = np.sort(np.asarray([v for v in values if np.isfinite(v)], dtype=float))
    n_failed = B - vals.size
    if n_failed > B / 2:
        label = "" if key is None else f" for {key}"
        raise TooManyFailures(f"{n_failed} of {B} bootstrap replicates failed{label}")
    alpha = 1.0 - ci_level
    se = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
    lo, hi = np.quantile(vals, [alpha / 2, 1 - alpha / 2])
    return BootstrapResult(se, float(lo), float(hi), int(n_failed), vals, ci_level)


def _replicates(estimator, panel, spec, map_fn):
    B = int(spec.replications)
    mapper = map if map_fn is None else map_fn
    return list(mapper(lambda r: _one(estimator, panel, spec.seed, r), range(B)))


def bootstrap(
    estimator: Callable[[Panel], float],
    panel: Panel,
    spec: BootstrapSpec = BootstrapSpec(),
    map_fn=None,
) -> BootstrapResult:
    """Bootstrap standard error and percentile interval of a scalar estimator.

    Units are drawn with replacement and keep all their periods. A replicate
    in which ``estimator`` raises a :class:`ContDidError` (or returns a
    non-finite value) is dropped and counted; more than ``B/2`` such
    failures raise :class:`TooManyFailures`.

    ``map_fn`` may be any ``map``-like callable (e.g. ``executor.map``);
    replicate ``r`` is seeded from ``(seed, r)`` alone and values are sorted
    before reduction, so the result does not depend on execution order.
    """
    raw = _replicates(estimator, panel, spec, map_fn)
    values = [np.nan if v is None else v for v in raw]
    return _summarise(values, spec.replications, spec.ci_level)


def bootstrap_many(
    estimator: Callable[[Panel], Mapping[str, float]],
    panel: Panel,
    spec: BootstrapSpec = BootstrapSpec(),
    keys=None,
    map_fn=None,
) -> tuple[dict[str, BootstrapResult], dict[str, ContDidError]]:
    """Bootstrap an estimator returning several named values.

    Returns per-key results and, separately, the keys whose replicates
    failed too often (mapped to the :class:`TooManyFailures` raised).
    """
    raw = _replicates(estimator, panel, spec, map_fn)
    if keys is None:
        keys = sorted({k for v in raw if v is not None for k in v})
    results, errors = {}, {}
    for key in keys:
        values = [np.nan if v is None or key not in v else v[key] for v in raw]
        try:
            results[key] = _summarise(values, spec.replications, spec.ci_level, key)
        except TooManyFailures as exc:
            errors[key] = exc
    return results, errors


def attach(estimate, result: BootstrapResult, heuristic: bool = False):
    """Copy bootstrap output onto an :class:`~contdid.estimators.Estimate`."""
    estimate.se = result.se
    estimate.ci_low = result.ci_low
    estimate.ci_high = result.ci_high
    estimate.ci_level = result.ci_level
    estimate.n_boot_failed = result.n_failed
    if estimate.ci_kind is None:
        estimate.ci_kind = "heuristic" if heuristic else "percentile"
    return estimate
