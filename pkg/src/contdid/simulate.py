"""Simulated panels with known potential outcomes and brute-force truths.

Two treatment regimes are available.

``static``
    ``D_1 ~ U[d1_low, d1_high]``; at every later period a unit keeps its
    treatment with probability ``p_stay`` (optionally logistic in ``D_1``
    through ``stay_slope``), otherwise it moves up with probability
    ``p_increase`` and down otherwise, by a magnitude drawn from
    ``U[dd_low, dd_high]`` or from the discrete mixture ``dd_values`` /
    ``dd_probs``. Potential outcomes are
    ``Y_t(d) = alpha_i + gamma_t + lam_t * d + S_i * d + curvature * d**2``.

``staggered``
    Units that have not moved yet move at each period with probability
    ``1 - p_stay``, jump up once by a magnitude drawn as above and stay there.
    Potential outcomes depend on the whole path,
    ``Y_t(d_1..d_t) = alpha_i + gamma_t + lam_t * d_1
    + S_i * sum_s theta_{t-s} * (d_s - d_{s-1})``, where ``theta`` lists the
    effect of a unit increase on impact, one period later, and so on (its
    last entry persists).

In both regimes ``S_i = slope_mean + slope_sd * z_i + slope_corr * |jump_i|
+ slope_d1 * D_1i``, or the mixture component's entry in ``slope_values``.
Observed outcomes add iid ``N(0, noise_sd^2)`` noise.
"""

from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpec, UnsupportedTarget
from .panel import Panel, classify

__all__ = [
    "DgpSpec",
    "Truth",
    "generate",
    "oracle",
    "potential_outcomes",
    "parse_config",
    "load_config",
    "twfe_slope_weights",
    "search_twfe_adversarial",
    "ORACLE_TARGETS",
]

ORACLE_TARGETS = (
    "delta1", "delta2i", "delta2d", "delta2",
    "delta1_t_to_t+l", "delta_plus_l", "delta_D_plus_l", "delta_plus",
)


@dataclass(frozen=True)
class DgpSpec:
    n: int = 1000
    T: int = 2
    seed: int = 0
    regime: str = "static"
    d1_low: float = 0.0
    d1_high: float = 1.0
    p_stay: float = 0.5
    stay_slope: float = 0.0
    p_increase: float = 0.5
    dd_low: float = 0.5
    dd_high: float = 1.5
    dd_values: tuple = ()
    dd_probs: tuple = ()
    slope_values: tuple = ()
    slope_mean: float = 1.0
    slope_sd: float = 0.0
    slope_corr: float = 0.0
    slope_d1: float = 0.0
    curvature: float = 0.0
    alpha_sd: float = 1.0
    gamma_sd: float = 1.0
    lam: tuple = ()
    theta: tuple = (1.0,)
    noise_sd: float = 1.0

    def __post_init__(self):
        for name in ("dd_values", "dd_probs", "slope_values", "lam", "theta"):
            object.__setattr__(self, name, tuple(float(v) for v in np.atleast_1d(getattr(self, name))))
        problems = []
        if int(self.n) != self.n or self.n < 2:
            problems.append(f"n must be an integer >= 2, got {self.n}")
        if int(self.T) != self.T or self.T < 2:
            problems.append(f"T must be an integer >= 2, got {self.T}")
        if self.regime not in ("static", "staggered"):
            problems.append(f"regime must be 'static' or 'staggered', got {self.regime!r}")
        if not self.d1_low <= self.d1_high:
            problems.append("d1_low must not exceed d1_high")
        for name in ("p_stay", "p_increase"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems.append(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if not 0.0 <= self.dd_low <= self.dd_high:
            problems.append("need 0 <= dd_low <= dd_high")
        if self.dd_values:
            if len(self.dd_probs) != len(self.dd_values):
                problems.append("dd_probs must have one entry per dd_values entry")
            elif min(self.dd_probs) < 0 or abs(sum(self.dd_probs) - 1.0) > 1e-9:
                problems.append("dd_probs must be nonnegative and sum to 1")
            if min(self.dd_values) <= 0:
                problems.append("dd_values are magnitudes and must be positive")
            if self.slope_values and len(self.slope_values) != len(self.dd_values):
                problems.append("slope_values must have one entry per dd_values entry")
        elif self.slope_values:
            problems.append("slope_values requires dd_values")
        if self.lam and len(self.lam) != self.T:
            problems.append(f"lam must have T = {self.T} entries")
        if not self.theta:
            problems.append("theta needs at least one entry")
        for name in ("alpha_sd", "gamma_sd", "noise_sd", "slope_sd"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be nonnegative")
        if problems:
            raise InvalidSpec("; ".join(problems))

    def replace(self, **changes) -> "DgpSpec":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True, eq=False)
class Truth:
    """Per-unit parameters of the potential-outcome functions."""

    spec: DgpSpec
    alpha: np.ndarray
    gamma: np.ndarray
    lam: np.ndarray
    slope: np.ndarray
    d: np.ndarray = field(repr=False)


def _magnitudes(spec, rng, size):
    if spec.dd_values:
        comp = rng.choice(len(spec.dd_values), size=size, p=np.asarray(spec.dd_probs))
        return np.asarray(spec.dd_values)[comp], comp
    return rng.uniform(spec.dd_low, spec.dd_high, size=size), None


def _stay_prob(spec, d1):
    if spec.stay_slope == 0.0 or spec.p_stay in (0.0, 1.0):
        return np.full(d1.shape, spec.p_stay)
    mid = 0.5 * (spec.d1_low + spec.d1_high)
    logit = np.log(spec.p_stay / (1.0 - spec.p_stay)) + spec.stay_slope * (d1 - mid)
    return 1.0 / (1.0 + np.exp(-logit))


def generate(spec: DgpSpec) -> tuple[Panel, Truth]:
    """Draw a panel and the hidden parameters the oracle needs."""
    rng = np.random.default_rng(spec.seed)
    n, T = spec.n, spec.T
    d1 = rng.uniform(spec.d1_low, spec.d1_high, size=n)
    d = np.empty((n, T))
    d[:, 0] = d1
    stay_p = _stay_prob(spec, d1)
    first_mag = np.zeros(n)
    first_comp = np.full(n, -1)
    if spec.regime == "static":
        moved = np.zeros(n, dtype=bool)
        for t in range(1, T):
            move = rng.random(n) >= stay_p
            up = rng.random(n) < spec.p_increase
            mag, comp = _magnitudes(spec, rng, n)
            d[:, t] = d[:, t - 1] + np.where(move, np.where(up, mag, -mag), 0.0)
            fresh = move & ~moved
            moved |= move
            first_mag = np.where(fresh, mag, first_mag)
            if comp is not None:
                first_comp = np.where(fresh, comp, first_comp)
    else:
        moved = np.zeros(n, dtype=bool)
        mag, comp = _magnitudes(spec, rng, n)
        for t in range(1, T):
            now = ~moved & (rng.random(n) >= stay_p)
            moved |= now
            d[:, t] = d1 + np.where(moved, mag, 0.0)
        first_mag = np.where(moved, mag, 0.0)
        if comp is not None:
            first_comp = np.where(moved, comp, -1)
    z = rng.standard_normal(n)
    slope = spec.slope_mean + spec.slope_sd * z + spec.slope_corr * first_mag + spec.slope_d1 * d1
    if spec.slope_values:
        vals = np.asarray(spec.slope_values)
        slope = np.where(first_comp >= 0, vals[np.maximum(first_comp, 0)], slope)
    alpha = spec.alpha_sd * rng.standard_normal(n)
    gamma = spec.gamma_sd * rng.standard_normal(T)
    lam = np.asarray(spec.lam) if spec.lam else np.zeros(T)
    truth = Truth(spec, alpha, gamma, lam, slope, d)
    y = potential_outcomes(truth, d) + spec.noise_sd * rng.standard_normal((n, T))
    panel = Panel(np.arange(n), np.arange(1, T + 1), d, y)
    return panel, truth


def potential_outcomes(truth: Truth, path) -> np.ndarray:
    """Noise-free outcomes ``Y_t`` of every unit under treatment ``path`` (n, T)."""
    spec = truth.spec
    path = np.asarray(path, dtype=float)
    base = truth.alpha[:, None] + truth.gamma[None, :]
    if spec.regime == "static":
        return base + (truth.lam[None, :] + truth.slope[:, None]) * path + spec.curvature * path ** 2
    T = path.shape[1]
    theta = np.asarray(spec.theta)
    inc = np.diff(path, axis=1)
    out = base + truth.lam[None, :] * path[:, :1]
    for t in range(1, T):
        lags = t - np.arange(1, t + 1)  # lag of the change made at column s=1..t
        th = theta[np.minimum(lags, theta.size - 1)]
        out[:, t] += truth.slope * (inc[:, :t] @ th)
    return out


def _slope_events(truth):
    """Per-transition potential-outcome slopes between D_{t-1} and D_t."""
    d = truth.d
    rows = []
    y_obs = potential_outcomes(truth, d)
    for k in range(d.shape[1] - 1):
        # same history, treatment kept at D_{t-1} in period t
        cf = d.copy()
        cf[:, k + 1] = d[:, k]
        y_cf = potential_outcomes(truth, cf)
        rows.append((y_obs[:, k + 1] - y_cf[:, k + 1], d[:, k + 1] - d[:, k]))
    return rows


def oracle(truth: Truth, target: str, w=None, *, ell: int | None = None, ell_max: int | None = None,
           controls: str = "stayers") -> float:
    """Realised-sample value of ``target`` from the stored potential outcomes.

    Targets: ``delta1``, ``delta2i``, ``delta2d``, ``delta2`` (aggregated
    over transitions with mover-share weights), ``delta1_t_to_t+l`` (needs
    ``ell``), ``delta_plus_l`` / ``delta_D_plus_l`` (need ``ell``) and
    ``delta_plus`` (over ``ell = 0..ell_max``).
    """
    d = truth.d
    n, T = d.shape
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    if target in ("delta1", "delta2i", "delta2d", "delta2"):
        num = den = 0.0
        for effect, dd in _slope_events(truth):
            if target == "delta1":
                mv = dd != 0
                if mv.any():
                    share = w[mv].sum()
                    num += share * np.dot(w[mv], effect[mv] / dd[mv]) / w[mv].sum()
                    den += share
                continue
            dirs = {"delta2i": [dd > 0], "delta2d": [dd < 0], "delta2": [dd > 0, dd < 0]}[target]
            for mv in dirs:
                if mv.any():
                    share = w[mv].sum()
                    num += share * np.dot(w[mv], effect[mv]) / np.dot(w[mv], dd[mv])
                    den += share
        if den == 0:
            raise UnsupportedTarget(f"no movers in the sample, {target} undefined")
        return float(num / den)
    if target == "delta1_t_to_t+l":
        if ell is None:
            raise UnsupportedTarget("delta1_t_to_t+l needs ell")
        status = classify(Panel(np.arange(n), np.arange(T), d, d))
        y_obs = potential_outcomes(truth, d)
        num = den = 0.0
        for t in range(2, T - ell + 1):
            k = t - 2
            mv = status.m[:, k] & ~status.m[:, k + 1:k + 1 + ell].any(axis=1)
            if controls == "not_yet_moved":
                mv &= status.f == t
            if not mv.any():
                continue
            cf = d.copy()
            cf[:, k + 1:] = d[:, [k]]
            gap = y_obs[mv, t + ell - 1] - potential_outcomes(truth, cf)[mv, t + ell - 1]
            num += np.dot(w[mv], gap / (d[mv, k + 1] - d[mv, k]))
            den += w[mv].sum()
        if den == 0:
            raise UnsupportedTarget(f"no eligible movers for ell={ell}")
        return float(num / den)
    if target in ("delta_plus_l", "delta_D_plus_l", "delta_plus"):
        status = classify(Panel(np.arange(n), np.arange(T), d, d))
        f = status.f
        y_obs = potential_outcomes(truth, d)
        y_base = potential_outcomes(truth, np.repeat(d[:, :1], T, axis=1))

        def cohort(l):
            mass = eff = inc = 0.0
            for t in range(l + 2, T + 1):
                mv = f == t - l
                if not mv.any():
                    continue
                mass += w[mv].sum()
                eff += np.dot(w[mv], y_obs[mv, t - 1] - y_base[mv, t - 1])
                inc += np.dot(w[mv], d[mv, t - 1] - d[mv, 0])
            return mass, eff, inc

        if target != "delta_plus":
            if ell is None:
                raise UnsupportedTarget(f"{target} needs ell")
            mass, eff, inc = cohort(ell)
            if mass == 0:
                raise UnsupportedTarget(f"no unit observed {ell} period(s) after its first move")
            return float((eff if target == "delta_plus_l" else inc) / mass)
        ell_max = T - 2 if ell_max is None else ell_max
        parts = [cohort(l) for l in range(ell_max + 1)]
        # w_l * delta_plus_l = mass_l / total * eff_l / mass_l, so the masses cancel
        eff = sum(p[1] for p in parts if p[0] > 0)
        inc = sum(p[2] for p in parts if p[0] > 0)
        if inc == 0:
            raise UnsupportedTarget("no treatment increments, delta_plus undefined")
        return float(eff / inc)
    raise UnsupportedTarget(f"no oracle for target {target!r}; known: {', '.join(ORACLE_TARGETS)}")


# config files -----------------------------------------------------------------

_TUPLE_FIELDS = {"dd_values", "dd_probs", "slope_values", "lam", "theta"}


def parse_config(text: str) -> DgpSpec:
    """Parse ``key = value`` lines (``#`` comments, lists comma-separated)."""
    types = {f.name: f.type for f in dataclasses.fields(DgpSpec)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidSpec(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise InvalidSpec(f"line {lineno}: unknown key {key!r}")
        try:
            if key in _TUPLE_FIELDS:
                values[key] = tuple(float(v) for v in raw.split(",") if v.strip())
            elif key == "regime":
                values[key] = raw
            elif key in ("n", "T", "seed"):
                values[key] = int(raw)
            else:
                values[key] = float(raw)
        except ValueError:
            raise InvalidSpec(f"line {lineno}: cannot parse value {raw!r} for {key}") from None
    return DgpSpec(**values)


def load_config(path) -> DgpSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def to_config(spec: DgpSpec) -> str:
    lines = []
    for f in dataclasses.fields(spec):
        v = getattr(spec, f.name)
        if isinstance(v, tuple):
            v = ", ".join(repr(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# adversarial TWFE designs -------------------------------------------------------

def twfe_slope_weights(dd, probs=None) -> np.ndarray:
    """Weights on individual slopes implicit in a two-period TWFE coefficient.

    With outcome changes ``dY_i = c + S_i * dD_i``, the first-difference
    regression coefficient is ``sum_i weight_i * S_i`` where
    ``weight_i = p_i (dD_i - mean dD) dD_i / Var(dD)``. Units with ``dD_i``
    between 0 and the mean change get negative weight.
    """
    dd = np.asarray(dd, dtype=float)
    p = np.full(dd.size, 1.0 / dd.size) if probs is None else np.asarray(probs, dtype=float)
    p = p / p.sum()
    mean = p @ dd
    var = p @ (dd - mean) ** 2
    return p * (dd - mean) * dd / var


def search_twfe_adversarial(
    magnitudes=(0.25, 0.5, 1.0, 2.0, 3.0),
    slopes=(0.5, 1.0, 2.0, 5.0, 10.0),
    shares=(0.2, 0.4, 0.6),
    p_stay=(0.2, 0.4),
):
    """Brute-force search for an all-increaser design with positive slopes and negative TWFE.

    Each design has stayers and two mover types ``(|dD|, slope, share)``.
    Returns the design with the most negative TWFE relative to the
    ``|dD|``-weighted average slope, as a dict.
    """
    best = None
    for (a, b), (sa, sb), sh, ps in itertools.product(
        itertools.permutations(magnitudes, 2), itertools.product(slopes, repeat=2), shares, p_stay
    ):
        pa = sh
        pb = 1.0 - ps - sh
        if pb <= 0:
            continue
        dd = np.array([0.0, a, b])
        probs = np.array([ps, pa, pb])
        wts = twfe_slope_weights(dd, probs)
        twfe = wts @ np.array([0.0, sa, sb])
        wampos = (pa * a * sa + pb * b * sb) / (pa * a + pb * b)
        score = twfe / wampos
        if best is None or score < best["score"]:
            best = {"score": score, "twfe": float(twfe), "delta2": float(wampos), "magnitudes": (a, b),
                    "slopes": (sa, sb), "probs": (pa, pb), "p_stay": ps, "weights": wts.tolist()}
    return best


def adversarial_spec(n: int = 2000, seed: int = 0, noise_sd: float = 1.0, design=None) -> DgpSpec:
    """Two-period design from :func:`search_twfe_adversarial` as a :class:`DgpSpec`."""
    design = design or search_twfe_adversarial()
    pa, pb = design["probs"]
    move = pa + pb
    return DgpSpec(
        n=n, T=2, seed=seed, p_stay=design["p_stay"], p_increase=1.0,
        dd_values=design["magnitudes"], dd_probs=(pa / move, pb / move), slope_values=design["slopes"],
        noise_sd=noise_sd,
    )
