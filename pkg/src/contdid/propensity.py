"""Multinomial logit propensity scores on a polynomial in baseline treatment."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import Polynomial

from .errors import ConvergenceWarning, SeparationDetected, TooFewObservations, ZeroControlProbability

__all__ = ["PscoreModel", "WeightVector", "fit_pscore", "reweight"]

MAX_COEF = 30.0


def _basis(z, degree):
    return np.vander(z, degree + 1, increasing=True)


def _softmax(eta):
    # eta: (n, K-1) linear predictors relative to the reference class
    full = np.concatenate([np.zeros((eta.shape[0], 1)), eta], axis=1)
    full -= full.max(axis=1, keepdims=True)
    e = np.exp(full)
    return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class PscoreModel:
    """Fitted class probabilities given baseline treatment.

    ``coef`` has one row per non-reference class (the reference is
    ``classes[0]``) and is expressed on the standardised basis
    ``z = (d - center) / scale``; :attr:`coef_original` maps it back.
    """

    classes: np.ndarray
    degree: int
    center: float
    scale: float
    coef: np.ndarray
    shares: np.ndarray
    loglik: float
    n_iter: int
    converged: bool

    def predict(self, d) -> np.ndarray:
        z = (np.atleast_1d(np.asarray(d, dtype=float)) - self.center) / self.scale
        return _softmax(_basis(z, self.degree) @ self.coef.T)

    def _index(self, label) -> int:
        hit = np.flatnonzero(self.classes == label)
        if hit.size == 0:
            raise KeyError(f"class {label!r} not in model (classes: {list(self.classes)})")
        return int(hit[0])

    def predict_class(self, d, label) -> np.ndarray:
        return self.predict(d)[:, self._index(label)]

    def share(self, label) -> float:
        return float(self.shares[self._index(label)])

    @property
    def coef_original(self) -> np.ndarray:
        sub = Polynomial([-self.center / self.scale, 1.0 / self.scale])
        rows = []
        for row in self.coef:
            c = Polynomial(row)(sub).coef
            rows.append(np.pad(c, (0, self.degree + 1 - c.size)))
        return np.array(rows)

    def diagnostics(self) -> dict:
        return {
            "classes": [int(c) if np.issubdtype(type(c), np.integer) else str(c) for c in self.classes],
            "degree": self.degree,
            "loglik": float(self.loglik),
            "iterations": int(self.n_iter),
            "converged": bool(self.converged),
        }


def fit_pscore(
    d_base,
    labels,
    w=None,
    degree: int = 2,
    max_iter: int = 200,
    tol: float = 1e-8,
) -> PscoreModel:
    """Maximum likelihood multinomial logit of ``labels`` on a polynomial in ``d_base``.

    Damped Newton iterations on the weighted mean log-likelihood; stops when
    the gradient max-norm drops below ``tol``. Coefficients beyond 30 in
    absolute value on the standardised basis, or a perfect in-sample fit,
    raise :class:`SeparationDetected`.
    """
    d = np.asarray(d_base, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if d.shape != labels.shape:
        raise ValueError("d_base and labels must have the same length")
    w = np.ones_like(d) if w is None else np.asarray(w, dtype=float).ravel()
    if not 0 <= degree <= 5:
        raise ValueError(f"degree must be between 0 and 5, got {degree}")
    keep = w > 0
    d, labels, w = d[keep], labels[keep], w[keep]
    classes = np.unique(labels)
    if classes.size < 2:
        raise TooFewObservations(f"propensity model needs at least 2 classes, got {classes.size}")
    K = classes.size
    y = np.searchsorted(classes, labels)
    onehot = np.zeros((d.size, K))
    onehot[np.arange(d.size), y] = 1.0
    wn = w / w.sum()
    shares = wn @ onehot

    center = float(wn @ d)
    scale = float(np.sqrt(wn @ (d - center) ** 2))
    if degree == 0 or not scale > 0:
        if degree > 0:
            raise TooFewObservations("baseline treatment is constant; cannot fit a slope")
        scale = 1.0
    Z = _basis((d - center) / scale, degree)
    p = Z.shape[1]

    B = np.zeros((K - 1, p))
    B[:, 0] = np.log(shares[1:] / shares[0])

    def loglik(B):
        P = _softmax(Z @ B.T)
        return float(wn @ np.log(np.maximum(P[np.arange(d.size), y], 1e-300))), P

    ll, P = loglik(B)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        R = onehot[:, 1:] - P[:, 1:]
        g = ((wn[:, None] * R).T @ Z).ravel()  # (K-1)*p, class-major
        if np.max(np.abs(g)) < tol:
            converged = True
            it -= 1
            break
        Pk = P[:, 1:]
        H = np.zeros(((K - 1) * p, (K - 1) * p))
        for a in range(K - 1):
            for b in range(a, K - 1):
                c = Pk[:, a] * ((a == b) - Pk[:, b])
                blk = (Z * (wn * c)[:, None]).T @ Z
                H[a * p:(a + 1) * p, b * p:(b + 1) * p] = blk
                H[b * p:(b + 1) * p, a * p:(a + 1) * p] = blk.T
        try:
            step = np.linalg.solve(H, g).reshape(K - 1, p)
        except np.linalg.LinAlgError:
            raise SeparationDetected("information matrix singular; classes look separated in baseline treatment") from None
        t = 1.0
        for _ in range(40):
            B_new = B + t * step
            ll_new, P_new = loglik(B_new)
            if ll_new >= ll - 1e-15:
                break
            t *= 0.5
        B, ll, P = B_new, ll_new, P_new
        if np.max(np.abs(B)) > MAX_COEF:
            raise SeparationDetected(
                f"logit coefficients diverge (max |coef| = {np.max(np.abs(B)):.1f} > {MAX_COEF:g}); "
                "some class is (nearly) perfectly predicted by baseline treatment"
            )
    if converged and np.min(P[np.arange(d.size), y]) > 1.0 - 1e-6:
        raise SeparationDetected("every unit is predicted in its own class with probability > 1 - 1e-6")
    if not converged:
        warnings.warn(f"propensity model did not converge in {max_iter} iterations", ConvergenceWarning, stacklevel=2)
    B.setflags(write=False)
    return PscoreModel(classes, int(degree), center, scale, B, shares, ll, it, converged)


@dataclass(frozen=True, eq=False)
class WeightVector:
    weights: np.ndarray
    raw: np.ndarray
    clip: float | None
    n_clipped: int

    @property
    def sum_before(self) -> float:
        return float(self.raw.sum())

    @property
    def sum_after(self) -> float:
        return float(self.weights.sum())

    def diagnostics(self) -> dict:
        return {
            "clip": self.clip,
            "n_clipped": int(self.n_clipped),
            "sum_before_clip": self.sum_before,
            "sum_after_clip": self.sum_after,
            "max_weight_before_clip": float(self.raw.max()) if self.raw.size else None,
        }


def reweight(
    model: PscoreModel,
    d_controls,
    mover_class,
    control_class=0,
    clip: float | None = 20.0,
    min_control_prob: float = 1e-6,
) -> WeightVector:
    """Odds weights that give controls the movers' baseline-treatment distribution.

    weight = P(mover | d) / P(control | d) * P(control) / P(mover), with the
    class shares taken from the weighted sample the model was fitted on.
    """
    probs = model.predict(d_controls)
    pm = probs[:, model._index(mover_class)]
    pc = probs[:, model._index(control_class)]
    if pc.size and pc.min() < min_control_prob:
        i = int(np.argmin(pc))
        raise ZeroControlProbability(
            f"predicted control probability {pc[i]:.2e} at baseline treatment {np.atleast_1d(d_controls)[i]:g}"
        )
    raw = pm / pc * (model.share(control_class) / model.share(mover_class))
    if clip is None:
        weights, n_clipped = raw, 0
    else:
        n_clipped = int((raw > clip).sum())
        weights = np.minimum(raw, clip)
    return WeightVector(weights, raw, None if clip is None else float(clip), n_clipped)
