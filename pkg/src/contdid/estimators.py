"""Heterogeneity-robust DID estimators for a continuously distributed treatment.

All estimators compare units whose treatment moves with units whose treatment
stays put at the same baseline treatment level, either through a kernel
regression of the controls' outcome change on baseline treatment
(``*_reg``) or by odds-reweighting the controls (``*_ps``).

Conventions: period indices ``t`` are 1-based, the transition ``t`` goes
from period ``t-1`` to period ``t``; unit weights multiply every sample
average; population shares are weighted sample frequencies.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AllMoversTrimmed,
    CollinearTreatment,
    InsufficientSupport,
    NoEligibleControls,
    NoEligibleMovers,
    NoMovers,
    NoNeverMovers,
    NoQuasiStayers,
    NoStayers,
    TooFewObservations,
)
from .panel import MoverStatus, Panel, check_monotone_baseline, classify
from .propensity import fit_pscore, reweight
from .smoothing import fit_cef, select_bandwidth

__all__ = [
    "Estimate",
    "EstimateSet",
    "ampos_reg",
    "wampos_reg",
    "wampos_ps",
    "ampos_nostayers",
    "wampos_ps_nostayers",
    "long_run_reg",
    "dynamic_effects",
    "twfe_reference",
    "resolve_trim",
    "default_delta_grid",
    "frozen_tuning",
]


@dataclass
class Estimate:
    """Point estimate of one target parameter, with inference once attached."""

    target: str
    value: float
    method: str
    n_movers_used: int = 0
    n_movers_dropped: int = 0
    n_controls: int = 0
    se: float | None = None
    ci_low: float | None = None
    ci_high: float | None = None
    ci_level: float | None = None
    ci_kind: str | None = None
    n_boot_failed: int | None = None
    tuning: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "method": self.method,
            "value": _num(self.value),
            "se": _num(self.se),
            "ci_low": _num(self.ci_low),
            "ci_high": _num(self.ci_high),
            "ci_level": self.ci_level,
            "ci_kind": self.ci_kind,
            "n_boot_failed": self.n_boot_failed,
            "n_movers_used": int(self.n_movers_used),
            "n_movers_dropped": int(self.n_movers_dropped),
            "n_controls": int(self.n_controls),
            "tuning": self.tuning,
            "diagnostics": self.diagnostics,
        }


class EstimateSet(dict):
    """Mapping of target name to :class:`Estimate` plus non-fatal errors."""

    def __init__(self, *args, errors=None, diagnostics=None, **kwargs):
        super().__init__(*args, **kwargs)
        self.errors = list(errors or [])
        self.diagnostics = dict(diagnostics or {})

    def values_dict(self) -> dict:
        return {k: v.value for k, v in self.items()}


def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if np.isfinite(x) else None


def _wmean(x, w):
    return float(np.dot(w, x) / w.sum())


# tuning helpers ---------------------------------------------------------------

def resolve_trim(dd_movers, trim) -> float:
    """``"auto"`` trims |dD| at 1% of the movers' dD standard deviation."""
    if trim is None:
        return 0.0
    if isinstance(trim, str):
        if trim != "auto":
            raise ValueError(f"trim must be a number or 'auto', got {trim!r}")
        dd_movers = np.asarray(dd_movers, dtype=float)
        if dd_movers.size < 2:
            return 0.0
        return 0.01 * float(np.std(dd_movers, ddof=1))
    trim = float(trim)
    if trim < 0:
        raise ValueError("trim must be nonnegative")
    return trim


def _bandwidth(spec, key, x, dy, w, kernel, degree, min_ess):
    if isinstance(spec, Mapping):
        spec = spec.get(key)
    if spec is None or spec in ("rot", "rule-of-thumb"):
        return select_bandwidth(x, method="rule-of-thumb")
    if spec in ("cv", "leave-one-out-cv"):
        return select_bandwidth(x, dy, method="cv", w=w, kernel=kernel, degree=degree, min_ess=min_ess)
    return float(spec)


def _tuning_echo(spec):
    if isinstance(spec, Mapping) or spec is None:
        return "rule-of-thumb"
    return spec


@dataclass
class _Cell:
    """One comparison: movers vs controls for one outcome change."""

    key: str
    t: int
    base: np.ndarray
    dy: np.ndarray
    dd: np.ndarray
    movers: np.ndarray
    controls: np.ndarray
    share: float
    direction: str = "any"


def _cef_adjust(cell: _Cell, w, bandwidth, kernel, degree, min_ess):
    """Fit the control CEF and evaluate it at the movers' baseline treatment."""
    xc, yc, wc = cell.base[cell.controls], cell.dy[cell.controls], w[cell.controls]
    h = _bandwidth(bandwidth, cell.key, xc, yc, wc, kernel, degree, min_ess)
    cef = fit_cef(xc, yc, wc, h=h, kernel=kernel, degree=degree, min_ess=min_ess)
    ev = cef.evaluate(cell.base[cell.movers])
    return ev, h


# AMPOS ------------------------------------------------------------------------

def _ampos_cells(cells, w, *, bandwidth, kernel, degree, min_ess, trim, target, extra_tuning=None,
                 min_controls=2, no_controls_error=NoStayers, drop_missing_controls=False):
    per_t = []
    num = den = 0.0
    used_total = dropped_total = controls_total = 0
    n_movers_total = 0
    bandwidths = {}
    dropped_cells = []
    for cell in cells:
        n_mv = int(cell.movers.sum())
        if n_mv == 0:
            continue
        n_ctrl = int(cell.controls.sum())
        if n_ctrl < min_controls:
            if drop_missing_controls:
                dropped_cells.append({"t": cell.t, "reason": "no_eligible_controls", "n_movers": n_mv})
                continue
            raise no_controls_error(f"{n_ctrl} control unit(s) at t={cell.t} ({cell.key}); need {min_controls}")
        n_movers_total += n_mv
        dd = cell.dd[cell.movers]
        keep = np.abs(dd) > trim
        n_trim = int((~keep).sum())
        if keep.any():
            sub = _Cell(cell.key, cell.t, cell.base, cell.dy, cell.dd,
                        _subset_mask(cell.movers, keep), cell.controls, cell.share)
            ev, h = _cef_adjust(sub, w, bandwidth, kernel, degree, min_ess)
            bandwidths[cell.key] = h
            ok = ev.ok
            mv = sub.movers
            ratio = (cell.dy[mv][ok] - ev.values[ok]) / cell.dd[mv][ok]
            wm = w[mv][ok]
            n_used = int(ok.sum())
            n_fallback = int(ev.fallback.sum())
        else:
            n_used, n_fallback = 0, 0
        n_unsupported = int(keep.sum()) - n_used
        used_total += n_used
        dropped_total += n_mv - n_used
        controls_total += n_ctrl
        row = {
            "t": cell.t, "key": cell.key, "n_movers": n_mv, "n_used": n_used, "n_trimmed": n_trim,
            "n_unsupported": n_unsupported, "n_fallback": n_fallback, "n_controls": n_ctrl,
            "weight": cell.share, "bandwidth": bandwidths.get(cell.key), "value": None,
        }
        if n_used > 0 and wm.sum() > 0:
            v = _wmean(ratio, wm)
            row["value"] = v
            num += cell.share * v
            den += cell.share
        per_t.append(row)
    if n_movers_total == 0:
        if dropped_cells:
            raise NoEligibleControls(f"every period with eligible movers lacks controls: {dropped_cells}")
        raise NoMovers("no movers in the sample")
    if den == 0.0:
        if used_total == 0 and all(r["n_trimmed"] == r["n_movers"] for r in per_t):
            raise AllMoversTrimmed(f"every mover has |dD| <= trim = {trim:g}")
        raise InsufficientSupport("no mover has enough controls around its baseline treatment")
    tuning = {
        "bandwidth": bandwidths, "bandwidth_rule": _tuning_echo(bandwidth), "kernel": kernel,
        "degree": degree, "min_ess": min_ess, "trim": trim,
    }
    tuning.update(extra_tuning or {})
    diag = {"per_t": per_t}
    if dropped_cells:
        diag["dropped"] = dropped_cells
    return Estimate(target, num / den, "regression", used_total, dropped_total, controls_total,
                    tuning=tuning, diagnostics=diag)


def _subset_mask(mask, keep):
    out = np.zeros_like(mask)
    out[np.flatnonzero(mask)[keep]] = True
    return out


def _transition_cells(panel: Panel, movers, controls):
    """Cells for consecutive-period comparisons, one per transition."""
    w = panel.w
    wsum = w.sum()
    cells = []
    for k in range(panel.n_periods - 1):
        t = k + 2
        cells.append(_Cell(
            key=f"t{t}", t=t,
            base=panel.d[:, k],
            dy=panel.y[:, k + 1] - panel.y[:, k],
            dd=panel.d[:, k + 1] - panel.d[:, k],
            movers=movers[:, k] & (w > 0),
            controls=controls[:, k] & (w > 0),
            share=float(w[movers[:, k]].sum() / wsum),
        ))
    return cells


def _status(panel, status, tol):
    return status if status is not None else classify(panel, tol)


def ampos_reg(
    panel: Panel,
    status: MoverStatus | None = None,
    *,
    tol: float = 0.0,
    bandwidth=None,
    kernel: str = "epanechnikov",
    degree: int = 1,
    min_ess: float = 5.0,
    trim="auto",
) -> Estimate:
    """Average of movers' potential outcome slopes (``delta1``), regression form.

    For every mover the outcome change net of the stayers' CEF at its
    baseline treatment is divided by its treatment change; ratios are
    averaged within transition and transitions are combined with weights
    proportional to their mover shares. Movers with ``|dD| <= trim`` or too
    few stayers nearby are dropped and counted.
    """
    status = _status(panel, status, tol)
    trim = resolve_trim(status.dd[status.m], trim)
    cells = _transition_cells(panel, status.m, ~status.m)
    return _ampos_cells(cells, panel.w, bandwidth=bandwidth, kernel=kernel, degree=degree,
                        min_ess=min_ess, trim=trim, target="delta1", extra_tuning={"tol": status.tol})


# WAMPOS -----------------------------------------------------------------------

def _direction_cells(panel, inc, dec, controls):
    w = panel.w
    wsum = w.sum()
    cells = []
    for k in range(panel.n_periods - 1):
        t = k + 2
        common = dict(t=t, base=panel.d[:, k], dy=panel.y[:, k + 1] - panel.y[:, k],
                      dd=panel.d[:, k + 1] - panel.d[:, k], controls=controls[:, k] & (w > 0))
        for direction, mask in (("increase", inc[:, k]), ("decrease", dec[:, k])):
            cells.append(_Cell(key=f"t{t}", movers=mask & (w > 0), direction=direction,
                               share=float(w[mask].sum() / wsum), **common))
    return cells


def _aggregate_wampos(rows, method, tuning, n_controls, extra_diag=None):
    """Combine per-(t, direction) ratios into delta2i, delta2d and delta2."""
    out = EstimateSet()
    usable = [r for r in rows if r["value"] is not None]
    any_movers = any(r["n_movers"] for r in rows)
    if not any_movers:
        raise NoMovers("no movers in the sample")
    if not usable:
        raise InsufficientSupport("no mover has usable controls at its baseline treatment")
    total = sum(r["weight"] for r in usable)
    for direction, target in (("increase", "delta2i"), ("decrease", "delta2d")):
        rs = [r for r in rows if r["direction"] == direction and r["n_movers"]]
        ok = [r for r in rs if r["value"] is not None]
        if not rs:
            out.errors.append({"target": target, "code": "NoIncreasers" if direction == "increase" else "NoDecreasers",
                               "message": f"no {direction} movers"})
            continue
        if not ok:
            out.errors.append({"target": target, "code": "InsufficientSupport",
                               "message": f"no {direction} mover has usable controls"})
            continue
        wt = sum(r["weight"] for r in ok)
        val = sum(r["weight"] * r["value"] for r in ok) / wt
        used = sum(r["n_used"] for r in rs)
        nmv = sum(r["n_movers"] for r in rs)
        out[target] = Estimate(target, val, method, used, nmv - used, n_controls, tuning=tuning,
                               diagnostics={"per_t": rs, "share_of_movers": wt / total})
    share_i = sum(r["weight"] for r in usable if r["direction"] == "increase") / total
    value = sum(r["weight"] * r["value"] for r in usable) / total
    used = sum(r["n_used"] for r in rows)
    nmv = sum(r["n_movers"] for r in rows)
    diag = {"share_increase": share_i, "per_t": rows,
            "dropped_cells": [{"t": r["t"], "direction": r["direction"]} for r in rows
                              if r["n_movers"] and r["value"] is None]}
    diag.update(extra_diag or {})
    out["delta2"] = Estimate("delta2", value, method, used, nmv - used, n_controls, tuning=tuning, diagnostics=diag)
    return out


def _wampos_reg_core(panel, inc, dec, controls, *, bandwidth, kernel, degree, min_ess, extra_tuning=None,
                     min_controls=2, no_controls_error=NoStayers, control_label="stayers"):
    w = panel.w
    rows = []
    bandwidths = {}
    cef_cache = {}
    n_controls = 0
    for cell in _direction_cells(panel, inc, dec, controls):
        n_mv = int(cell.movers.sum())
        row = {"t": cell.t, "direction": cell.direction, "n_movers": n_mv, "n_used": 0,
               "weight": cell.share, "value": None}
        rows.append(row)
        if n_mv == 0:
            continue
        n_ctrl = int(cell.controls.sum())
        if n_ctrl < min_controls:
            raise no_controls_error(f"{n_ctrl} control unit(s) at t={cell.t}; need {min_controls}")
        if cell.key not in cef_cache:
            xc, yc, wc = cell.base[cell.controls], cell.dy[cell.controls], w[cell.controls]
            h = _bandwidth(bandwidth, cell.key, xc, yc, wc, kernel, degree, min_ess)
            cef_cache[cell.key] = fit_cef(xc, yc, wc, h=h, kernel=kernel, degree=degree, min_ess=min_ess,
                                          control=control_label)
            bandwidths[cell.key] = h
            n_controls += n_ctrl
        ev = cef_cache[cell.key].evaluate(cell.base[cell.movers])
        ok = ev.ok
        wm = w[cell.movers][ok]
        row.update(n_used=int(ok.sum()), n_unsupported=int((~ok).sum()), n_fallback=int(ev.fallback.sum()),
                   n_controls=n_ctrl, bandwidth=bandwidths[cell.key])
        if ok.any() and wm.sum() > 0:
            numer = _wmean(cell.dy[cell.movers][ok] - ev.values[ok], wm)
            denom = _wmean(cell.dd[cell.movers][ok], wm)
            row.update(numerator=numer, denominator=denom, value=numer / denom)
    tuning = {"bandwidth": bandwidths, "bandwidth_rule": _tuning_echo(bandwidth), "kernel": kernel,
              "degree": degree, "min_ess": min_ess}
    tuning.update(extra_tuning or {})
    return _aggregate_wampos(rows, "regression", tuning, n_controls)


def wampos_reg(
    panel: Panel,
    status: MoverStatus | None = None,
    *,
    tol: float = 0.0,
    bandwidth=None,
    kernel: str = "epanechnikov",
    degree: int = 1,
    min_ess: float = 5.0,
) -> EstimateSet:
    """Weighted average of movers' slopes, regression form.

    Returns ``delta2i`` (increasers), ``delta2d`` (decreasers, reported as a
    slope per unit increase) and their mover-share weighted combination
    ``delta2``. A direction with no movers is absent and noted in
    ``.errors``.
    """
    status = _status(panel, status, tol)
    return _wampos_reg_core(panel, status.m_i, status.m_d, ~status.m, bandwidth=bandwidth, kernel=kernel,
                            degree=degree, min_ess=min_ess, extra_tuning={"tol": status.tol})


def _wampos_ps_core(panel, inc, dec, controls, *, degree, clip, extra_tuning=None, min_controls=2,
                    no_controls_error=NoStayers):
    w = panel.w
    rows = []
    models = {}
    n_controls = 0
    for k in range(panel.n_periods - 1):
        t = k + 2
        ik, dk, ck = inc[:, k] & (w > 0), dec[:, k] & (w > 0), controls[:, k] & (w > 0)
        share_i, share_d = float(w[ik].sum() / w.sum()), float(w[dk].sum() / w.sum())
        row_i = {"t": t, "direction": "increase", "n_movers": int(ik.sum()), "n_used": 0,
                 "weight": share_i, "value": None}
        row_d = {"t": t, "direction": "decrease", "n_movers": int(dk.sum()), "n_used": 0,
                 "weight": share_d, "value": None}
        rows += [row_i, row_d]
        if not (ik.any() or dk.any()):
            continue
        if ck.sum() < min_controls:
            raise no_controls_error(f"{int(ck.sum())} control unit(s) at t={t}; need {min_controls}")
        n_controls += int(ck.sum())
        base = panel.d[:, k]
        dy = panel.y[:, k + 1] - panel.y[:, k]
        dd = panel.d[:, k + 1] - panel.d[:, k]
        sample = ik | dk | ck
        labels = np.where(ik, 1, np.where(dk, 2, 0))[sample]
        model = fit_pscore(base[sample], labels, w[sample], degree=degree)
        models[f"t{t}"] = model.diagnostics()
        for row, mask, cls in ((row_i, ik, 1), (row_d, dk, 2)):
            if not mask.any():
                continue
            wv = reweight(model, base[ck], cls, 0, clip=clip)
            omega = w[ck] * wv.weights
            counterfactual = float(np.dot(omega, dy[ck]) / omega.sum())
            numer = _wmean(dy[mask], w[mask]) - counterfactual
            denom = _wmean(dd[mask], w[mask])
            row.update(n_used=int(mask.sum()), n_controls=int(ck.sum()), numerator=numer,
                       denominator=denom, value=numer / denom, weights=wv.diagnostics())
    tuning = {"pscore_degree": degree, "clip": clip}
    tuning.update(extra_tuning or {})
    return _aggregate_wampos(rows, "pscore", tuning, n_controls, extra_diag={"pscore_models": models})


def wampos_ps(
    panel: Panel,
    status: MoverStatus | None = None,
    *,
    tol: float = 0.0,
    degree: int = 2,
    clip: float | None = 20.0,
) -> EstimateSet:
    """Weighted average of movers' slopes, propensity-score reweighting form.

    Per transition a multinomial logit of (stayer, increaser, decreaser) on
    baseline treatment gives odds weights for the stayers; the numerator is
    the movers' mean outcome change minus the reweighted stayers' mean.
    """
    status = _status(panel, status, tol)
    return _wampos_ps_core(panel, status.m_i, status.m_d, ~status.m, degree=degree, clip=clip,
                           extra_tuning={"tol": status.tol})


# no stayers -------------------------------------------------------------------

def default_delta_grid(abs_dd, quantiles=(0.4, 0.3, 0.2, 0.1)) -> list[float]:
    """Decreasing quasi-stayer thresholds at quantiles of the nonzero ``|dD|``."""
    abs_dd = np.asarray(abs_dd, dtype=float).ravel()
    abs_dd = abs_dd[abs_dd > 0]
    if abs_dd.size == 0:
        raise NoMovers("no unit changes treatment")
    grid = sorted({float(np.quantile(abs_dd, q)) for q in quantiles}, reverse=True)
    return [g for g in grid if g > 0]


def _check_grid(delta_grid, abs_dd):
    if delta_grid is None:
        return default_delta_grid(abs_dd)
    grid = sorted({float(g) for g in np.atleast_1d(delta_grid)}, reverse=True)
    if not grid or grid[-1] <= 0:
        raise ValueError("delta grid must hold positive values")
    return grid


def _curve(grid, run, min_quasi):
    curve = []
    best = None
    for delta in grid:
        point = {"delta": delta, "value": None, "feasible": False}
        try:
            res = run(delta)
        except (NoQuasiStayers, NoStayers, TooFewObservations) as exc:
            point["reason"] = f"{type(exc).__name__}: {exc}"
        else:
            point.update(feasible=True, value=res.value, n_movers_used=res.n_movers_used,
                         n_controls=res.n_controls, bandwidth=res.tuning.get("bandwidth"))
            best = (delta, res)
        curve.append(point)
    if best is None:
        raise NoQuasiStayers(f"no delta in the grid leaves {min_quasi} quasi-stayers in every period")
    return curve, best


def ampos_nostayers(
    panel: Panel,
    *,
    delta_grid=None,
    bandwidth=None,
    kernel: str = "epanechnikov",
    degree: int = 1,
    min_ess: float = 5.0,
    trim="auto",
    min_quasi: int = 10,
) -> Estimate:
    """``delta1`` with quasi-stayers (``|dD| <= delta``) as controls.

    Runs the regression estimator for every ``delta`` in a decreasing grid
    (movers are units with ``|dD| > delta``) and reports the result at the
    smallest feasible ``delta`` together with the whole sensitivity curve.
    """
    dd = np.diff(panel.d, axis=1)
    abs_dd = np.abs(dd)
    grid = _check_grid(delta_grid, abs_dd)
    trim = resolve_trim(dd[abs_dd > 0], trim)

    def run(delta):
        movers = abs_dd > delta
        controls = ~movers
        cells = _transition_cells(panel, movers, controls)
        return _ampos_cells(cells, panel.w, bandwidth=bandwidth, kernel=kernel, degree=degree,
                            min_ess=min_ess, trim=trim, target="delta1",
                            extra_tuning={"delta": delta}, min_controls=min_quasi,
                            no_controls_error=NoQuasiStayers)

    curve, (delta, est) = _curve(grid, run, min_quasi)
    est.tuning.update(delta_grid=grid, delta=delta, min_quasi=min_quasi)
    est.diagnostics["curve"] = curve
    est.diagnostics["controls"] = "quasi-stayers"
    est.ci_kind = "heuristic"
    return est


def wampos_ps_nostayers(
    panel: Panel,
    *,
    delta_grid=None,
    degree: int = 2,
    clip: float | None = 20.0,
    min_quasi: int = 10,
) -> EstimateSet:
    """Propensity-score WAMPOS with quasi-stayers, over a decreasing ``delta`` grid.

    At each ``delta`` increasers have ``dD > delta``, decreasers
    ``dD < -delta`` and controls ``|dD| <= delta``; the propensity model is
    refit per ``delta``. The headline is at the smallest feasible ``delta``.
    """
    dd = np.diff(panel.d, axis=1)
    abs_dd = np.abs(dd)
    grid = _check_grid(delta_grid, abs_dd)
    exact_share = float((abs_dd == 0).mean())

    def run(delta):
        res = _wampos_ps_core(panel, dd > delta, dd < -delta, abs_dd <= delta, degree=degree, clip=clip,
                              extra_tuning={"delta": delta}, min_controls=min_quasi,
                              no_controls_error=NoQuasiStayers)
        run.last = res
        return res["delta2"]

    curve, (delta, _) = _curve(grid, run, min_quasi)
    # rerun at the headline delta: run.last may belong to a later infeasible attempt
    res = _wampos_ps_core(panel, dd > delta, dd < -delta, abs_dd <= delta, degree=degree, clip=clip,
                          extra_tuning={"delta": delta}, min_controls=min_quasi, no_controls_error=NoQuasiStayers)
    for est in res.values():
        est.tuning.update(delta_grid=grid, delta=delta, min_quasi=min_quasi)
        est.ci_kind = "heuristic"
        est.diagnostics["controls"] = "quasi-stayers"
    res["delta2"].diagnostics["curve"] = curve
    res["delta2"].diagnostics["exact_stayer_share"] = exact_share
    if exact_share >= 0.01:
        res["delta2"].diagnostics["warning"] = (
            f"{exact_share:.1%} of unit-transitions are exact stayers; the stayer estimators apply"
        )
    return res


# long-run effects -------------------------------------------------------------

def long_run_reg(
    panel: Panel,
    ell: int,
    status: MoverStatus | None = None,
    *,
    tol: float = 0.0,
    bandwidth=None,
    kernel: str = "epanechnikov",
    degree: int = 1,
    min_ess: float = 5.0,
    trim="auto",
    controls: str = "stayers",
) -> Estimate:
    """Effect, ``ell`` periods later, of moving at ``t`` among movers that then stay put.

    For each ``t`` the movers are units with ``M_t = 1`` that do not move
    again through ``t + ell``; controls have ``M_t = 0`` and no move through
    ``t + ell``. The outcome change is ``Y_{t+ell} - Y_{t-1}``. Periods
    lacking eligible movers or controls are dropped and reported.

    ``controls="not_yet_moved"`` additionally requires controls never to
    have moved before ``t + ell`` and movers to move for the first time at
    ``t``, which keeps lagged effects of earlier moves out of the comparison.
    """
    if controls not in ("stayers", "not_yet_moved"):
        raise ValueError(f"controls must be 'stayers' or 'not_yet_moved', got {controls!r}")
    status = _status(panel, status, tol)
    T = panel.n_periods
    if not 0 <= ell <= T - 2:
        raise ValueError(f"ell must lie in 0..{T - 2}")
    trim = resolve_trim(status.dd[status.m], trim)
    w = panel.w
    cells = []
    skipped = []
    for t in range(2, T - ell + 1):
        k = t - 2
        stays = ~status.m[:, k + 1:k + 1 + ell].any(axis=1)
        mv = status.m[:, k] & stays & (w > 0)
        ct = ~status.m[:, k] & stays & (w > 0)
        if controls == "not_yet_moved":
            mv &= status.f == t
            ct &= status.f > t + ell
        if not mv.any():
            skipped.append({"t": t, "reason": "no_eligible_movers"})
            continue
        cells.append(_Cell(key=f"t{t}", t=t, base=panel.d[:, t - 2], dy=panel.y[:, t + ell - 1] - panel.y[:, t - 2],
                           dd=panel.d[:, t - 1] - panel.d[:, t - 2], movers=mv, controls=ct,
                           share=float(w[mv].sum() / w.sum())))
    if not cells:
        raise NoEligibleMovers(f"no unit moves and then keeps its treatment for {ell} period(s)")
    est = _ampos_cells(cells, w, bandwidth=bandwidth, kernel=kernel, degree=degree, min_ess=min_ess, trim=trim,
                       target="delta1_t_to_t+l", extra_tuning={"ell": ell, "controls": controls, "tol": status.tol},
                       drop_missing_controls=True)
    est.diagnostics["dropped"] = skipped + est.diagnostics.get("dropped", [])
    return est


# dynamic effects --------------------------------------------------------------

def _dynamic_core(panel, f, *, ell_max, method, bandwidth, kernel, cef_degree, min_ess, degree, clip):
    T = panel.n_periods
    w = panel.w
    wsum = w.sum()
    base = panel.d[:, 0]
    out = EstimateSet()
    per_ell = {}
    bandwidths = {}
    truncated = []
    for ell in range(ell_max + 1):
        cells = []
        for t in range(ell + 2, T + 1):
            g = t - ell
            mv = (f == g) & (w > 0)
            if not mv.any():
                continue
            ct = (f > t) & (w > 0)
            share = float(w[mv].sum() / wsum)
            cell = {"t": t, "cohort": g, "n_movers": int(mv.sum()), "n_controls": int(ct.sum()),
                    "weight": share, "value": None}
            if ct.sum() < 2:
                truncated.append({"ell": ell, "t": t, "reason": "NoNeverMovers"})
                cell["reason"] = "NoNeverMovers"
                cells.append(cell)
                continue
            dy = panel.y[:, t - 1] - panel.y[:, t - ell - 2]
            dD = panel.d[:, t - 1] - panel.d[:, 0]
            key = f"l{ell}_t{t}"
            try:
                if method == "regression":
                    h = _bandwidth(bandwidth, key, base[ct], dy[ct], w[ct], kernel, cef_degree, min_ess)
                    bandwidths[key] = h
                    cef = fit_cef(base[ct], dy[ct], w[ct], h=h, kernel=kernel, degree=cef_degree, min_ess=min_ess,
                                  control="not yet moved")
                    ev = cef.evaluate(base[mv])
                    ok = ev.ok
                    if not ok.any():
                        raise InsufficientSupport("no mover has usable controls")
                    wm = w[mv][ok]
                    value = _wmean(dy[mv][ok] - ev.values[ok], wm)
                    value_d = _wmean(dD[mv][ok], wm)
                    cell.update(n_used=int(ok.sum()), n_fallback=int(ev.fallback.sum()), bandwidth=h)
                else:
                    sample = mv | ct
                    model = fit_pscore(base[sample], mv[sample].astype(int), w[sample], degree=degree)
                    wv = reweight(model, base[ct], 1, 0, clip=clip)
                    omega = w[ct] * wv.weights
                    value = _wmean(dy[mv], w[mv]) - float(np.dot(omega, dy[ct]) / omega.sum())
                    value_d = _wmean(dD[mv], w[mv])
                    cell.update(n_used=int(mv.sum()), weights=wv.diagnostics())
            except InsufficientSupport as exc:
                cell["reason"] = f"InsufficientSupport: {exc}"
                cells.append(cell)
                continue
            cell.update(value=value, value_d=value_d)
            cells.append(cell)
        usable = [c for c in cells if c["value"] is not None]
        if not usable:
            per_ell[ell] = None
            if cells:
                out.errors.append({"target": f"delta_plus_{ell}", "code": "NoNeverMovers",
                                   "message": f"no comparison units for any period at ell={ell}"})
            else:
                out.errors.append({"target": f"delta_plus_{ell}", "code": "NoMovers",
                                   "message": f"no unit observed {ell} period(s) after its first move"})
            continue
        tot = sum(c["weight"] for c in usable)
        val = sum(c["weight"] * c["value"] for c in usable) / tot
        val_d = sum(c["weight"] * c["value_d"] for c in usable) / tot
        used = sum(c.get("n_used", 0) for c in cells)
        nmv = sum(c["n_movers"] for c in cells)
        nct = sum(c["n_controls"] for c in usable)
        per_ell[ell] = {"value": val, "value_d": val_d, "mass": tot}
        out[f"delta_plus_{ell}"] = Estimate(f"delta_plus_{ell}", val, method, used, nmv - used, nct,
                                            diagnostics={"ell": ell, "per_t": cells})
        out[f"delta_D_plus_{ell}"] = Estimate(f"delta_D_plus_{ell}", val_d, "descriptive", used, nmv - used, nct,
                                              diagnostics={"ell": ell})
    ok = {ell: v for ell, v in per_ell.items() if v is not None}
    if not ok:
        if any(e["code"] == "NoNeverMovers" for e in out.errors):
            raise NoNeverMovers("no unit stays at its baseline treatment long enough to serve as control")
        raise NoMovers("no unit ever moves off its baseline treatment")
    mass = sum(v["mass"] for v in ok.values())
    wl = {ell: v["mass"] / mass for ell, v in ok.items()}
    num = sum(wl[ell] * ok[ell]["value"] for ell in ok)
    den = sum(wl[ell] * ok[ell]["value_d"] for ell in ok)
    tuning = {"ell_max": ell_max, "method": method}
    if method == "regression":
        tuning.update(bandwidth=bandwidths, bandwidth_rule=_tuning_echo(bandwidth), kernel=kernel,
                      degree=cef_degree, min_ess=min_ess)
    else:
        tuning.update(pscore_degree=degree, clip=clip)
    for est in out.values():
        est.tuning = dict(tuning)
    if abs(den) < 1e-12:
        out.errors.append({"target": "delta_plus", "code": "ZeroDenominator",
                           "message": "weighted treatment increments sum to zero"})
    else:
        out["delta_plus"] = Estimate("delta_plus", num / den, method,
                                     sum(e.n_movers_used for k, e in out.items() if k.startswith("delta_plus_")),
                                     sum(e.n_movers_dropped for k, e in out.items() if k.startswith("delta_plus_")),
                                     0, tuning=dict(tuning),
                                     diagnostics={"w_ell": {str(k): v for k, v in wl.items()},
                                                  "numerator": num, "denominator": den})
    out.diagnostics["truncated"] = truncated
    return out


def dynamic_effects(
    panel: Panel,
    *,
    ell_max: int | None = None,
    method: str = "regression",
    tol: float = 0.0,
    bandwidth=None,
    kernel: str = "epanechnikov",
    cef_degree: int = 1,
    min_ess: float = 5.0,
    degree: int = 2,
    clip: float | None = 20.0,
    sign_split: bool = False,
) -> EstimateSet:
    """Reduced-form effects ``ell`` periods after a unit's first treatment change.

    Returns ``delta_plus_<ell>`` for ``ell = 0..ell_max``, the matching
    cumulated treatment increments ``delta_D_plus_<ell>``, and their
    weighted ratio ``delta_plus``. Cohorts first moving at ``t - ell`` are
    compared with units that have not moved by ``t``, at the same period-one
    treatment, through a kernel regression (``method="regression"``) or odds
    reweighting (``method="pscore"``).

    Units whose treatment goes both above and below its period-one level are
    excluded. Units that only go below are excluded too unless
    ``sign_split`` is set, in which case they are analysed separately
    (together with never-movers) and reported under ``below/`` keys with
    the sign of every effect flipped.
    """
    if method not in ("regression", "pscore"):
        raise ValueError(f"method must be 'regression' or 'pscore', got {method!r}")
    T = panel.n_periods
    ell_max = T - 2 if ell_max is None else int(ell_max)
    if not 0 <= ell_max <= T - 2:
        raise ValueError(f"ell_max must lie in 0..{T - 2}")
    part = check_monotone_baseline(panel)
    status = classify(panel, tol)
    kwargs = dict(ell_max=ell_max, method=method, bandwidth=bandwidth, kernel=kernel, cef_degree=cef_degree,
                  min_ess=min_ess, degree=degree, clip=clip)
    above = part.above
    below = part.below & ~part.constant
    n_mixed = int(part.mixed.sum())
    exclusions = {"n_mixed_excluded": n_mixed}
    if not sign_split:
        exclusions["n_below_excluded"] = int(below.sum())
    sub = panel.take(np.flatnonzero(above))
    out = _dynamic_core(sub, status.f[above], **kwargs)
    if sign_split and below.any():
        keep = below | part.constant
        low = _dynamic_core(panel.take(np.flatnonzero(keep)), status.f[keep], **kwargs)
        for key, est in low.items():
            if key != "delta_plus":
                est.value = -est.value
            est.target = f"below/{est.target}"
            est.diagnostics["subsample"] = "below baseline, sign flipped"
            out[f"below/{key}"] = est
        out.errors += [dict(e, target=f"below/{e['target']}") for e in low.errors]
    for est in out.values():
        est.diagnostics.update(exclusions)
    out.diagnostics.update(exclusions)
    return out


# TWFE -------------------------------------------------------------------------

def twfe_reference(panel: Panel) -> Estimate:
    """Coefficient on treatment in a unit and period fixed effects regression."""
    w = panel.w
    W = w.sum()

    def within(a):
        return a - a.mean(axis=1, keepdims=True) - (w @ a / W)[None, :] + (w @ a.mean(axis=1)) / W

    dt = within(panel.d)
    yt = within(panel.y)
    sxx = float(w @ (dt * dt).sum(axis=1))
    scale = float(w @ ((panel.d - panel.d.mean()) ** 2).sum(axis=1))
    if not sxx > 1e-12 * max(scale, 1e-300):
        raise CollinearTreatment("treatment has no variation left after removing unit and period effects")
    beta = float(w @ (dt * yt).sum(axis=1)) / sxx
    n_movers = int(classify(panel).m.any(axis=1).sum())
    return Estimate("twfe", beta, "twfe", n_movers, 0, panel.n_units - n_movers)


def frozen_tuning(estimate: Estimate) -> dict:
    """Keyword arguments that rerun an estimator with the tuning it actually used.

    The bootstrap holds bandwidths, trim thresholds and the headline
    quasi-stayer threshold fixed across replicates unless asked to reselect.
    """
    tu = estimate.tuning
    out = {}
    if isinstance(tu.get("bandwidth"), dict) and tu["bandwidth"]:
        out["bandwidth"] = dict(tu["bandwidth"])
    if "trim" in tu:
        out["trim"] = tu["trim"]
    if "delta" in tu and "delta_grid" in tu:
        out["delta_grid"] = [tu["delta"]]
    return out
