"""Monte Carlo runner: repeated simulation, estimation and comparison with the oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import estimators as est
from .errors import ContDidError, InvalidSpec
from .inference import BootstrapSpec, bootstrap_many
from .simulate import DgpSpec, generate, oracle

__all__ = ["ESTIMATORS", "McRow", "run_montecarlo", "replication_seed", "summary_tsv"]


def _ampos(panel, **kw):
    return {"delta1": est.ampos_reg(panel, **kw).value}


def _wampos_reg(panel, **kw):
    return est.wampos_reg(panel, **kw).values_dict()


def _wampos_ps(panel, **kw):
    return est.wampos_ps(panel, **kw).values_dict()


def _ampos_nostayers(panel, **kw):
    return {"delta1": est.ampos_nostayers(panel, **kw).value}


def _wampos_ps_nostayers(panel, **kw):
    return est.wampos_ps_nostayers(panel, **kw).values_dict()


def _long_run(panel, ell=1, **kw):
    return {"delta1_t_to_t+l": est.long_run_reg(panel, ell, **kw).value}


def _dynamic(method):
    def run(panel, **kw):
        return est.dynamic_effects(panel, method=method, **kw).values_dict()
    return run


def _twfe(panel, **kw):
    return {"twfe": est.twfe_reference(panel).value}


# name -> function(panel, **options) returning {target: value}
ESTIMATORS = {
    "ampos_reg": _ampos,
    "wampos_reg": _wampos_reg,
    "wampos_ps": _wampos_ps,
    "ampos_nostayers": _ampos_nostayers,
    "wampos_ps_nostayers": _wampos_ps_nostayers,
    "long_run_reg": _long_run,
    "dynamic_reg": _dynamic("regression"),
    "dynamic_ps": _dynamic("pscore"),
    "twfe": _twfe,
}


def replication_seed(master_seed: int, r: int) -> int:
    """Seed of replication ``r``; a function of ``(master_seed, r)`` only."""
    return int(np.random.SeedSequence([int(master_seed), int(r)]).generate_state(1, dtype=np.uint64)[0])


def _truth(truth, target, options):
    if target == "twfe":
        return None
    if target.startswith("delta_plus_"):
        return oracle(truth, "delta_plus_l", ell=int(target.rsplit("_", 1)[1]))
    if target.startswith("delta_D_plus_"):
        return oracle(truth, "delta_D_plus_l", ell=int(target.rsplit("_", 1)[1]))
    if target == "delta_plus":
        return oracle(truth, "delta_plus", ell_max=options.get("ell_max"))
    if target == "delta1_t_to_t+l":
        return oracle(truth, target, ell=options.get("ell", 1), controls=options.get("controls", "stayers"))
    return oracle(truth, target)


def _one_replication(spec, names, options, r, master_seed, boot, ci_level):
    seed = replication_seed(master_seed, r)
    panel, truth = generate(spec.replace(seed=seed))
    out = {}
    for name in names:
        fn = ESTIMATORS[name]
        kw = options.get(name, {})
        try:
            values = fn(panel, **kw)
        except ContDidError as exc:
            out[name] = {"error": exc.code}
            continue
        rows = {}
        cis = {}
        if boot:
            res, _ = bootstrap_many(lambda p: fn(p, **kw), panel,
                                    BootstrapSpec(boot, replication_seed(seed, 0), ci_level), keys=list(values))
            cis = {k: (v.ci_low, v.ci_high) for k, v in res.items()}
        for target, value in values.items():
            try:
                truth_value = None if "/" in target else _truth(truth, target, kw)
            except ContDidError:
                truth_value = None
            rows[target] = (value, truth_value, cis.get(target))
        out[name] = rows
    return out


@dataclass
class McRow:
    estimator: str
    target: str
    R: int
    n_ok: int
    mean_estimate: float | None
    truth_mean: float | None
    mean_bias: float | None
    rmse: float | None
    mcse: float | None
    coverage: float | None
    estimates: list = field(default_factory=list, repr=False)
    truths: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("estimator", "target", "R", "n_ok", "mean_estimate", "truth_mean", "mean_bias", "rmse", "mcse",
                 "coverage")}


def _summary(name, target, R, cells):
    vals = np.array([c[0] for c in cells], dtype=float)
    truths = [c[1] for c in cells]
    n_ok = vals.size
    row = McRow(name, target, R, n_ok, None, None, None, None, None, None, vals.tolist(), truths)
    if n_ok == 0:
        return row
    row.mean_estimate = float(vals.mean())
    if all(t is not None for t in truths):
        tv = np.array(truths, dtype=float)
        err = vals - tv
        row.truth_mean = float(tv.mean())
        row.mean_bias = float(err.mean())
        row.rmse = float(np.sqrt(np.mean(err ** 2)))
        if n_ok > 1:
            row.mcse = float(np.std(err, ddof=1) / math.sqrt(n_ok))
        cis = [c[2] for c in cells]
        if all(ci is not None for ci in cis):
            row.coverage = float(np.mean([lo <= t <= hi for (lo, hi), t in zip(cis, tv)]))
    elif n_ok > 1:
        row.mcse = float(np.std(vals, ddof=1) / math.sqrt(n_ok))
    return row


def run_montecarlo(
    spec: DgpSpec,
    estimators=("ampos_reg", "wampos_reg", "wampos_ps"),
    R: int = 100,
    master_seed: int = 0,
    options: dict | None = None,
    boot: int = 0,
    ci_level: float = 0.95,
    map_fn=None,
) -> list[McRow]:
    """Simulate ``R`` panels from ``spec`` and summarise each estimator against its oracle.

    The DGP seed of replication ``r`` is derived from ``(master_seed, r)``,
    so results do not depend on ``spec.seed`` or on execution order.
    ``options`` maps estimator names to keyword arguments. With ``boot > 0``
    each replication also gets a bootstrap percentile interval and the row
    reports its coverage of the truth. The MCSE is the standard deviation of
    the estimation errors divided by ``sqrt(R)``; it is empty when ``R = 1``.
    """
    if int(R) != R or R < 1:
        raise InvalidSpec(f"R must be a positive integer, got {R}")
    unknown = [e for e in estimators if e not in ESTIMATORS]
    if unknown:
        raise InvalidSpec(f"unknown estimator(s) {unknown}; known: {sorted(ESTIMATORS)}")
    options = options or {}
    mapper = map if map_fn is None else map_fn
    reps = list(mapper(lambda r: _one_replication(spec, estimators, options, r, master_seed, boot, ci_level),
                       range(R)))
    rows = []
    for name in estimators:
        targets = []
        for rep in reps:
            for t in rep[name]:
                if t != "error" and t not in targets:
                    targets.append(t)
        for target in targets:
            cells = [rep[name][target] for rep in reps if target in rep[name]]
            rows.append(_summary(name, target, R, cells))
    return rows


def summary_tsv(rows) -> str:
    cols = ["estimator", "target", "R", "n_ok", "mean_estimate", "truth_mean", "mean_bias", "rmse", "mcse", "coverage"]
    lines = ["\t".join(cols)]
    for row in rows:
        d = row.to_dict()
        lines.append("\t".join("" if d[c] is None else (f"{d[c]:.10g}" if isinstance(d[c], float) else str(d[c]))
                               for c in cols))
    return "\n".join(lines) + "\n"
