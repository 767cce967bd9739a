"""Kernel local-polynomial regression of outcome changes on baseline treatment."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import (
    DegenerateBandwidth,
    DegenerateFit,
    InsufficientSupport,
    NoQuasiStayers,
    TooFewObservations,
)

__all__ = [
    "KERNELS",
    "CefModel",
    "CefEval",
    "fit_cef",
    "fit_cef_quasi_stayers",
    "select_bandwidth",
    "rule_of_thumb",
    "quasi_stayer_schedule",
]


def _epanechnikov(u):
    k = 1.0 - u * u
    np.maximum(k, 0.0, out=k)
    return 0.75 * k


def _gaussian(u):
    return np.exp(-0.5 * u * u) / np.sqrt(2.0 * np.pi)


def _rectangular(u):
    return np.where(np.abs(u) <= 1.0, 0.5, 0.0)


class _Kernel(NamedTuple):
    fn: object
    compact: bool
    k0: float


KERNELS = {
    "epanechnikov": _Kernel(_epanechnikov, True, 0.75),
    "gaussian": _Kernel(_gaussian, False, 1.0 / np.sqrt(2.0 * np.pi)),
    "rectangular": _Kernel(_rectangular, True, 0.5),
}

# relative determinant below which the local linear design counts as singular
_SINGULAR = 1e-10
_MAX_PAIRS = 1 << 21


def _get_kernel(name: str) -> _Kernel:
    try:
        return KERNELS[name]
    except KeyError:
        raise ValueError(f"unknown kernel {name!r}; choose from {sorted(KERNELS)}") from None


def _moments(x, dy, w, q, h, kernel: _Kernel):
    """Kernel moments at each query point.

    ``x`` must be sorted. Returns ``s0, s1, s2, t0, t1`` where
    ``s_j = sum K w (x-q)^j`` and ``t_j = sum K w (x-q)^j dy``. For compact
    kernels only the controls inside ``[q-h, q+h]`` are visited; the
    (query, control) pairs are laid out flat and summed per query with
    ``np.add.reduceat``.
    """
    q = np.asarray(q, dtype=float)
    m, n = q.size, x.size
    out = np.zeros((5, m))
    if m == 0 or n == 0:
        return out
    if kernel.compact:
        lo = np.searchsorted(x, q - h, side="left")
        hi = np.searchsorted(x, q + h, side="right")
    else:
        lo = np.zeros(m, dtype=np.intp)
        hi = np.full(m, n, dtype=np.intp)
    counts = hi - lo
    ends = np.cumsum(counts)
    # split the queries so that no block holds more than _MAX_PAIRS pairs
    cuts = [0]
    while cuts[-1] < m:
        base = ends[cuts[-1] - 1] if cuts[-1] else 0
        nxt = int(np.searchsorted(ends, base + _MAX_PAIRS, side="right"))
        cuts.append(max(nxt, cuts[-1] + 1))
    for a, b in zip(cuts[:-1], cuts[1:]):
        c = counts[a:b]
        total = int(c.sum())
        if total == 0:
            continue
        starts = np.cumsum(c) - c
        idx = np.arange(total) - np.repeat(starts - lo[a:b], c)
        dx = x[idx] - np.repeat(q[a:b], c)
        k = kernel.fn(dx * (1.0 / h)) * w[idx]
        kdx = k * dx
        d = dy[idx]
        nz = c > 0
        seg = starts[nz]
        rows = np.arange(a, b)[nz]
        out[0, rows] = np.add.reduceat(k, seg)
        out[1, rows] = np.add.reduceat(kdx, seg)
        out[2, rows] = np.add.reduceat(kdx * dx, seg)
        out[3, rows] = np.add.reduceat(k * d, seg)
        out[4, rows] = np.add.reduceat(kdx * d, seg)
    return out


def _solve(mom, degree):
    """Local intercepts from moments; returns values and a fallback mask."""
    s0, s1, s2, t0, t1 = mom
    with np.errstate(invalid="ignore", divide="ignore"):
        const = t0 / s0
        if degree == 0:
            return const, np.zeros(s0.shape, dtype=bool)
        det = s0 * s2 - s1 * s1
        singular = ~(det > _SINGULAR * s0 * s2)
        lin = (s2 * t0 - s1 * t1) / det
    return np.where(singular, const, lin), singular & (s0 > 0)


class CefEval(NamedTuple):
    values: np.ndarray
    ess: np.ndarray
    ok: np.ndarray
    fallback: np.ndarray


@dataclass(frozen=True, eq=False)
class CefModel:
    """Fitted conditional expectation of outcome changes given baseline treatment.

    Weights are stored normalised to mean one, so ``ess`` reads as a kernel
    weighted count of control units (a control sitting exactly at the query
    point counts as one).
    """

    x: np.ndarray
    dy: np.ndarray
    w: np.ndarray
    h: float
    kernel: str
    degree: int
    min_ess: float
    control: str = "stayers"
    delta: float | None = None

    @property
    def n_controls(self) -> int:
        return self.x.size

    def evaluate(self, q) -> CefEval:
        q = np.atleast_1d(np.asarray(q, dtype=float))
        kern = _get_kernel(self.kernel)
        mom = _moments(self.x, self.dy, self.w, q, self.h, kern)
        values, fallback = _solve(mom, self.degree)
        ess = mom[0] / kern.k0
        ok = (ess >= self.min_ess) & (mom[0] > 0)
        values = np.where(ok, values, np.nan)
        return CefEval(values, ess, ok, fallback & ok)

    def ess(self, q) -> np.ndarray:
        return self.evaluate(q).ess

    def eval(self, q) -> np.ndarray:
        """Estimated conditional mean at ``q``; raises where support is too thin."""
        res = self.evaluate(q)
        if not res.ok.all():
            bad = np.atleast_1d(np.asarray(q, dtype=float))[~res.ok]
            raise InsufficientSupport(
                f"{(~res.ok).sum()} query point(s) have effective sample size below {self.min_ess:g} "
                f"(first: {bad[0]:g})"
            )
        if res.fallback.any():
            warnings.warn(
                f"local linear fit singular at {int(res.fallback.sum())} point(s); used locally constant fit",
                DegenerateFit,
                stacklevel=2,
            )
        return res.values

    __call__ = eval


def rule_of_thumb(x) -> float:
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        raise TooFewObservations(f"rule-of-thumb bandwidth needs at least 2 observations, got {x.size}")
    sd = float(np.std(x, ddof=1))
    h = 1.06 * sd * x.size ** (-0.2)
    if not h > 0:
        raise DegenerateBandwidth("baseline treatment has zero spread among controls; bandwidth would be 0")
    return h


def _prepare(x, dy, w):
    x = np.asarray(x, dtype=float).ravel()
    dy = np.asarray(dy, dtype=float).ravel()
    if x.shape != dy.shape:
        raise ValueError("x and dy must have the same length")
    w = np.ones_like(x) if w is None else np.asarray(w, dtype=float).ravel()
    if w.shape != x.shape:
        raise ValueError("w must have the same length as x")
    keep = w > 0
    x, dy, w = x[keep], dy[keep], w[keep]
    order = np.argsort(x, kind="mergesort")
    x, dy, w = x[order], dy[order], w[order]
    if x.size:
        w = w / w.mean()
    return x, dy, w


def fit_cef(
    x,
    dy,
    w=None,
    h: float | None = None,
    kernel: str = "epanechnikov",
    degree: int = 1,
    min_ess: float = 5.0,
    control: str = "stayers",
) -> CefModel:
    """Fit a local polynomial regression of ``dy`` on ``x``.

    Parameters
    ----------
    x, dy : array-like
        Baseline treatments and outcome changes of the control units.
    w : array-like, optional
        Unit weights.
    h : float, optional
        Bandwidth in treatment units; rule-of-thumb when omitted.
    kernel : {"epanechnikov", "gaussian", "rectangular"}
    degree : {0, 1}
        Locally constant or locally linear.
    min_ess : float
        Evaluation below this kernel-weighted count of controls is refused.
    """
    _get_kernel(kernel)
    if degree not in (0, 1):
        raise ValueError(f"degree must be 0 or 1, got {degree}")
    x, dy, w = _prepare(x, dy, w)
    if x.size < 2:
        raise TooFewObservations(f"need at least 2 control observations, got {x.size}")
    if h is None:
        h = rule_of_thumb(x)
    if not (np.isfinite(h) and h > 0):
        raise ValueError(f"bandwidth must be positive, got {h}")
    for arr in (x, dy, w):
        arr.setflags(write=False)
    return CefModel(x, dy, w, float(h), kernel, int(degree), float(min_ess), control)


def fit_cef_quasi_stayers(
    x,
    dy,
    abs_dd,
    w=None,
    h: float | None = None,
    delta: float = 0.0,
    kernel: str = "epanechnikov",
    degree: int = 1,
    min_ess: float = 5.0,
) -> CefModel:
    """Like :func:`fit_cef` but restricted to units with ``abs_dd <= delta``."""
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    abs_dd = np.abs(np.asarray(abs_dd, dtype=float))
    keep = abs_dd <= delta
    if keep.sum() < 2:
        raise NoQuasiStayers(f"only {int(keep.sum())} unit(s) with |dD| <= {delta:g}")
    x = np.asarray(x, dtype=float)[keep]
    dy = np.asarray(dy, dtype=float)[keep]
    w = None if w is None else np.asarray(w, dtype=float)[keep]
    model = fit_cef(x, dy, w, h=h, kernel=kernel, degree=degree, min_ess=min_ess,
                    control=f"quasi-stayers |dD| <= {delta:g}")
    object.__setattr__(model, "delta", float(delta))
    return model


def quasi_stayer_schedule(abs_dd, x, q: float = 0.1) -> tuple[float, float]:
    """Default ``(delta, h)``: the ``q`` quantile of ``|dD|`` and a rule-of-thumb ``h``."""
    abs_dd = np.abs(np.asarray(abs_dd, dtype=float))
    x = np.asarray(x, dtype=float)
    delta = float(np.quantile(abs_dd, q))
    if not delta > 0:
        raise NoQuasiStayers(f"the {q:g} quantile of |dD| is zero; use the stayer estimators")
    return delta, rule_of_thumb(x[abs_dd <= delta])


def _loo_scores(x, dy, w, grid, kernel, degree, min_ess, min_valid=0.9):
    kern = _get_kernel(kernel)
    scores = np.full(len(grid), np.inf)
    for j, h in enumerate(grid):
        mom = _moments(x, dy, w, x, h, kern)
        self_w = kern.k0 * w
        mom[0] -= self_w
        mom[3] -= self_w * dy
        ess = mom[0] / kern.k0
        pred, _ = _solve(mom, degree)
        ok = (ess >= min_ess) & np.isfinite(pred)
        if ok.mean() < min_valid:
            continue
        scores[j] = np.sum(w[ok] * (dy[ok] - pred[ok]) ** 2) / np.sum(w[ok])
    return scores


def select_bandwidth(
    x,
    dy=None,
    method: str = "rule-of-thumb",
    w=None,
    kernel: str = "epanechnikov",
    degree: int = 1,
    min_ess: float = 5.0,
) -> float:
    """Choose a bandwidth for :func:`fit_cef`.

    ``rule-of-thumb`` gives ``1.06 sd(x) n^(-1/5)``. ``leave-one-out-cv``
    minimises the leave-one-out squared prediction error over 20
    log-spaced multiples of the rule-of-thumb value in ``[0.1, 10]``.
    """
    if method in ("rule-of-thumb", "rot"):
        return rule_of_thumb(x)
    if method not in ("leave-one-out-cv", "cv"):
        raise ValueError(f"unknown bandwidth method {method!r}")
    if dy is None:
        raise ValueError("cross-validation needs outcome changes")
    x, dy, w = _prepare(x, dy, w)
    if x.size < 10:
        raise TooFewObservations(f"cross-validation needs at least 10 controls, got {x.size}")
    h0 = rule_of_thumb(x)
    grid = h0 * np.logspace(-1.0, 1.0, 20)
    scores = _loo_scores(x, dy, w, grid, kernel, degree, min_ess)
    if not np.isfinite(scores).any():
        raise TooFewObservations("no candidate bandwidth leaves enough controls around every point")
    return float(grid[int(np.argmin(scores))])
