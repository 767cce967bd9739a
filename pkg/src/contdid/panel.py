"""Balanced panel container, CSV ingestion and mover/stayer classification."""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import pandas as pd

from .errors import (
    DuplicateObservation,
    InvalidPanel,
    NoStayers,
    ParseError,
    UnbalancedPanel,
)

__all__ = [
    "Panel",
    "ColumnSchema",
    "MoverStatus",
    "OverlapReport",
    "BaselinePartition",
    "ingest",
    "classify",
    "overlap_report",
    "check_monotone_baseline",
    "validation_report",
]


@dataclass(frozen=True, eq=False)
class Panel:
    """Balanced panel of ``n`` units observed at ``T`` ordered periods.

    Parameters
    ----------
    units : array-like, shape (n,)
        Unit identifiers.
    periods : array-like, shape (T,)
        Strictly increasing period labels. Only their order is used.
    d, y : array-like, shape (n, T)
        Treatment and outcome levels.
    w : array-like, shape (n,), optional
        Nonnegative unit weights, all ones by default.
    """

    units: np.ndarray
    periods: np.ndarray
    d: np.ndarray
    y: np.ndarray
    w: np.ndarray = None

    def __post_init__(self):
        d = np.array(self.d, dtype=float)
        y = np.array(self.y, dtype=float)
        if d.ndim != 2 or d.shape != y.shape:
            raise InvalidPanel(f"d and y must be 2-d arrays of equal shape, got {d.shape} and {y.shape}")
        n, T = d.shape
        if T < 2:
            raise InvalidPanel(f"need at least 2 periods, got {T}")
        if n < 1:
            raise InvalidPanel("panel has no units")
        periods = np.asarray(self.periods)
        if periods.shape != (T,):
            raise InvalidPanel(f"expected {T} period labels, got {periods.shape}")
        if T > 1 and not np.all(periods[1:] > periods[:-1]):
            raise InvalidPanel("period labels must be strictly increasing")
        units = np.asarray(self.units)
        if units.shape != (n,):
            raise InvalidPanel(f"expected {n} unit labels, got {units.shape}")
        if not (np.all(np.isfinite(d)) and np.all(np.isfinite(y))):
            raise InvalidPanel("treatments and outcomes must be finite")
        if self.w is None:
            w = np.ones(n)
        else:
            w = np.array(self.w, dtype=float)
            if w.shape != (n,):
                raise InvalidPanel(f"expected {n} weights, got {w.shape}")
            if not np.all(np.isfinite(w)) or np.any(w < 0) or not np.any(w > 0):
                raise InvalidPanel("weights must be finite, nonnegative and not all zero")
        for arr in (d, y, w):
            arr.setflags(write=False)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "units", units)
        object.__setattr__(self, "periods", periods)

    @property
    def n_units(self) -> int:
        return self.d.shape[0]

    @property
    def n_periods(self) -> int:
        return self.d.shape[1]

    @property
    def weighted(self) -> bool:
        return not np.all(self.w == 1.0)

    def take(self, index) -> "Panel":
        """Panel made of the units at ``index`` (repeats allowed), relabelled 0..k-1."""
        index = np.asarray(index)
        return Panel(np.arange(index.size), self.periods, self.d[index], self.y[index], self.w[index])

    def replace(self, **changes) -> "Panel":
        fields = dict(units=self.units, periods=self.periods, d=self.d, y=self.y, w=self.w)
        fields.update(changes)
        return Panel(**fields)

    def to_frame(self, schema: "ColumnSchema | None" = None) -> pd.DataFrame:
        schema = schema or ColumnSchema()
        n, T = self.d.shape
        frame = pd.DataFrame({
            schema.unit: np.repeat(self.units, T),
            schema.time: np.tile(self.periods, n),
            schema.d: self.d.ravel(),
            schema.y: self.y.ravel(),
        })
        if self.weighted:
            frame[schema.weight or "weight"] = np.repeat(self.w, T)
        return frame

    def to_csv(self, path_or_buf, schema: "ColumnSchema | None" = None) -> None:
        self.to_frame(schema).to_csv(path_or_buf, index=False, float_format="%.17g")


@dataclass(frozen=True)
class ColumnSchema:
    unit: str = "unit"
    time: str = "time"
    d: str = "d"
    y: str = "y"
    weight: str | None = None


def _to_float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        return np.nan


def _parse_numeric(frame: pd.DataFrame, column: str) -> np.ndarray:
    raw = frame[column]
    # float() parses exactly; pandas' fast text-to-number path can be off by an ulp
    values = np.array([_to_float(v) for v in raw], dtype=float)
    bad = ~np.isfinite(values)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        # +2: 1-based line numbers and the header line
        raise ParseError(
            f"row {i + 1} (line {i + 2}), column {column!r}: cannot parse {raw.iloc[i]!r} as a finite number"
        )
    return values


def ingest(source, schema: ColumnSchema | None = None, delimiter: str = ",") -> Panel:
    """Read a long-format delimited file into a balanced :class:`Panel`.

    ``source`` may be a path, an open text stream, or a string holding the
    file content (recognised by containing a newline). Rows may come in any
    order; units are sorted by identifier and periods by value.
    """
    schema = schema or ColumnSchema()
    if isinstance(source, str) and "\n" in source:
        handle = io.StringIO(source)
    elif isinstance(source, (str, os.PathLike)):
        if not os.path.isfile(source):
            raise FileNotFoundError(f"no such file: {os.fspath(source)!r}")
        handle = source
    else:
        handle = source
    frame = pd.read_csv(handle, sep=delimiter, dtype=str, keep_default_na=False)
    frame.columns = [c.strip() for c in frame.columns]
    needed = [schema.unit, schema.time, schema.d, schema.y] + ([schema.weight] if schema.weight else [])
    missing = [c for c in needed if c not in frame.columns]
    if missing:
        raise ParseError(f"missing column(s): {', '.join(missing)}")
    if len(frame) == 0:
        raise ParseError("no data rows")

    unit = frame[schema.unit].str.strip().to_numpy()
    time = _parse_numeric(frame, schema.time)
    d = _parse_numeric(frame, schema.d)
    y = _parse_numeric(frame, schema.y)
    w = _parse_numeric(frame, schema.weight) if schema.weight else None

    long = pd.DataFrame({"unit": unit, "time": time, "d": d, "y": y})
    if w is not None:
        long["w"] = w
    dup = long.duplicated(["unit", "time"], keep="first")
    if dup.any():
        i = int(np.flatnonzero(dup.to_numpy())[0])
        raise DuplicateObservation(f"unit {unit[i]!r} has more than one row for period {time[i]:g} (row {i + 1})")

    periods = np.sort(long["time"].unique())
    units = np.sort(long["unit"].unique())
    counts = long.groupby("unit")["time"].nunique()
    short = counts[counts < periods.size]
    if len(short):
        u = short.index[0]
        have = set(long.loc[long["unit"] == u, "time"])
        lacking = [p for p in periods if p not in have]
        raise UnbalancedPanel(f"unit {u!r} has no row for period(s) {', '.join(f'{p:g}' for p in lacking)}")

    long = long.sort_values(["unit", "time"], kind="mergesort")
    n, T = units.size, periods.size
    d_mat = long["d"].to_numpy().reshape(n, T)
    y_mat = long["y"].to_numpy().reshape(n, T)
    weights = None
    if w is not None:
        w_mat = long["w"].to_numpy().reshape(n, T)
        if np.any(w_mat != w_mat[:, :1]):
            i = int(np.flatnonzero(np.any(w_mat != w_mat[:, :1], axis=1))[0])
            raise InvalidPanel(f"weight of unit {units[i]!r} changes over time; weights are per unit")
        weights = w_mat[:, 0]
    return Panel(units, periods, d_mat, y_mat, weights)


def validation_report(panel: Panel) -> dict:
    """Summary of a validated panel, JSON-ready."""
    return {
        "n_units": int(panel.n_units),
        "n_periods": int(panel.n_periods),
        "periods": [float(p) for p in panel.periods],
        "weighted": bool(panel.weighted),
        "d_range": [float(panel.d.min()), float(panel.d.max())],
        "y_range": [float(panel.y.min()), float(panel.y.max())],
        "balanced": True,
    }


# classification -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MoverStatus:
    """Mover indicators for every unit and transition.

    Column ``k`` of each ``(n, T-1)`` array refers to the transition from
    period index ``k+1`` to ``k+2`` (1-based), i.e. ``t = k + 2``.
    ``f`` holds the 1-based first-move period index, ``T + 1`` for units that
    never move.
    """

    dd: np.ndarray
    tol: float
    m: np.ndarray = field(repr=False)
    m_i: np.ndarray = field(repr=False)
    m_d: np.ndarray = field(repr=False)
    f: np.ndarray = field(repr=False)

    @property
    def n_transitions(self) -> int:
        return self.dd.shape[1]

    def m_delta(self, delta: float) -> np.ndarray:
        return np.abs(self.dd) > max(delta, self.tol)

    def m_i_delta(self, delta: float) -> np.ndarray:
        return self.dd > max(delta, self.tol)

    def m_d_delta(self, delta: float) -> np.ndarray:
        return self.dd < -max(delta, self.tol)

    @property
    def stayer(self) -> np.ndarray:
        return ~self.m

    def counts(self, periods=None) -> list[dict]:
        out = []
        for k in range(self.n_transitions):
            row = {
                "t": k + 2,
                "n_movers": int(self.m[:, k].sum()),
                "n_increasers": int(self.m_i[:, k].sum()),
                "n_decreasers": int(self.m_d[:, k].sum()),
                "n_stayers": int((~self.m[:, k]).sum()),
            }
            if periods is not None:
                row["period"] = float(periods[k + 1])
            out.append(row)
        return out


def classify(panel: Panel, tol: float = 0.0) -> MoverStatus:
    """Classify every unit at every transition; a stayer has ``|dD| <= tol``."""
    if not tol >= 0:
        raise ValueError(f"tol must be nonnegative, got {tol}")
    dd = np.diff(panel.d, axis=1)
    m_i = dd > tol
    m_d = dd < -tol
    m = m_i | m_d
    T = panel.n_periods
    moved_any = m.any(axis=1)
    f = np.where(moved_any, np.argmax(m, axis=1) + 2, T + 1)
    for arr in (dd, m, m_i, m_d, f):
        arr.setflags(write=False)
    return MoverStatus(dd=dd, tol=float(tol), m=m, m_i=m_i, m_d=m_d, f=f)


# overlap diagnostics --------------------------------------------------------

@dataclass
class OverlapReport:
    entries: list[dict]

    @property
    def flagged(self) -> bool:
        return any(e["flags"] for e in self.entries)

    def to_dict(self) -> dict:
        return {"entries": self.entries, "flagged": self.flagged}


def overlap_report(
    panel: Panel,
    status: MoverStatus,
    pscores: Mapping[int, object] | None = None,
    min_prob: float = 0.01,
) -> OverlapReport:
    """Empirical support diagnostics per transition and mover class.

    ``pscores`` maps the 1-based period index ``t`` to a fitted propensity
    model whose class ``0`` denotes stayers.
    """
    entries = []
    for k in range(status.n_transitions):
        t = k + 2
        base = panel.d[:, k]
        stay = ~status.m[:, k]
        if not status.m[:, k].any():
            continue
        if not stay.any():
            raise NoStayers(f"no stayers at transition to period {panel.periods[k + 1]:g} (t={t})")
        s_lo, s_hi = float(base[stay].min()), float(base[stay].max())
        for label, mask in (("any", status.m[:, k]), ("increase", status.m_i[:, k]), ("decrease", status.m_d[:, k])):
            if not mask.any():
                continue
            mv = base[mask]
            inside = (mv >= s_lo) & (mv <= s_hi)
            entry = {
                "t": t,
                "period": float(panel.periods[k + 1]),
                "mover_class": label,
                "n_movers": int(mask.sum()),
                "n_stayers": int(stay.sum()),
                "mover_range": [float(mv.min()), float(mv.max())],
                "stayer_range": [s_lo, s_hi],
                "inside_fraction": float(inside.mean()),
                "min_stayer_probability": None,
                "flags": [],
            }
            if entry["inside_fraction"] < 1.0:
                entry["flags"].append("movers_outside_stayer_support")
            if pscores is not None and t in pscores:
                p0 = pscores[t].predict_class(mv, 0)
                entry["min_stayer_probability"] = float(p0.min())
                if p0.min() < min_prob:
                    entry["flags"].append("low_stayer_probability")
            entries.append(entry)
    return OverlapReport(entries)


@dataclass(frozen=True, eq=False)
class BaselinePartition:
    """Direction of every unit's treatment path relative to its first period.

    ``constant`` units (never off baseline) are labelled ``above``.
    """

    labels: np.ndarray
    constant: np.ndarray

    @property
    def above(self) -> np.ndarray:
        return self.labels == "above"

    @property
    def below(self) -> np.ndarray:
        return self.labels == "below"

    @property
    def mixed(self) -> np.ndarray:
        return self.labels == "mixed"

    def counts(self) -> dict:
        return {k: int((self.labels == k).sum()) for k in ("above", "below", "mixed")}


def check_monotone_baseline(panel: Panel) -> BaselinePartition:
    rel = panel.d - panel.d[:, :1]
    ge = np.all(rel >= 0, axis=1)
    le = np.all(rel <= 0, axis=1)
    labels = np.where(ge, "above", np.where(le, "below", "mixed"))
    return BaselinePartition(labels=labels, constant=ge & le)
