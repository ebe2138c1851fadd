"""Balanced panel container, long-format CSV I/O and removal of
deterministic components (unit effects, unit trends, time effects)."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError

DEFAULT_SCHEMA = {"unit": "unit", "time": "time", "y": "y", "x": "x", "z": []}


@dataclass(frozen=True)
class PanelData:
    """Balanced N x T panel with outcome ``y``, regressor of interest ``x``
    and a (possibly empty) list of control matrices ``z``."""

    y: np.ndarray
    x: np.ndarray
    z: tuple = ()
    unit_labels: Optional[tuple] = None
    period_labels: Optional[tuple] = None
    z_names: Optional[tuple] = None

    def __post_init__(self):
        y = np.array(self.y, dtype=float)
        x = np.array(self.x, dtype=float)
        z = tuple(np.array(zk, dtype=float) for zk in self.z)
        if y.ndim != 2 or y.size == 0:
            raise DataError("y must be a nonempty N x T matrix")
        for name, m in [("x", x)] + [(f"z{k + 1}", zk) for k, zk in enumerate(z)]:
            if m.shape != y.shape:
                raise DataError(f"unbalanced panel: {name} has shape {m.shape}, y has {y.shape}")
        for m in (y, x) + z:
            if not np.all(np.isfinite(m)):
                raise DataError("panel contains non-finite values")
            m.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)
        n, t = y.shape
        if self.unit_labels is not None and len(self.unit_labels) != n:
            raise DataError("unit_labels length does not match N")
        if self.period_labels is not None and len(self.period_labels) != t:
            raise DataError("period_labels length does not match T")
        if self.z_names is not None and len(self.z_names) != len(z):
            raise DataError("z_names length does not match K")

    @property
    def n_units(self) -> int:
        return self.y.shape[0]

    @property
    def n_periods(self) -> int:
        return self.y.shape[1]

    @property
    def n_controls(self) -> int:
        return len(self.z)

    @property
    def shape(self):
        return self.y.shape

    def replace(self, **changes) -> "PanelData":
        fields = dict(
            y=self.y,
            x=self.x,
            z=self.z,
            unit_labels=self.unit_labels,
            period_labels=self.period_labels,
            z_names=self.z_names,
        )
        fields.update(changes)
        return PanelData(**fields)


@dataclass(frozen=True)
class DeterministicSpec:
    """Which deterministic components to project out.

    ``unit_trend_degree`` adds unit-specific polynomial trends in time:
    1 gives linear trends, 2 adds quadratic ones.
    """

    unit_effects: bool = False
    time_effects: bool = False
    unit_trend_degree: int = 0

    def __post_init__(self):
        if not 0 <= self.unit_trend_degree <= 2:
            raise DataError("unit_trend_degree must be 0, 1 or 2")

    @property
    def is_empty(self) -> bool:
        return not (self.unit_effects or self.time_effects or self.unit_trend_degree)

    @classmethod
    def parse(cls, text: str) -> "DeterministicSpec":
        """Parse the comma separated form used on the command line,
        e.g. ``"unit,time,trend2"``. Empty string or ``"none"`` means nothing."""
        unit = time = False
        degree = 0
        for token in (t.strip().lower() for t in (text or "").split(",")):
            if token in ("", "none"):
                continue
            if token == "unit":
                unit = True
            elif token == "time":
                time = True
            elif token.startswith("trend") and token[5:].isdigit():
                degree = int(token[5:])
            elif token == "trend":
                degree = 1
            else:
                raise DataError(f"unknown profile component {token!r}")
        return cls(unit_effects=unit, time_effects=time, unit_trend_degree=degree)


def _sort_labels(labels):
    # numeric labels sort numerically, anything else lexicographically
    try:
        return sorted(labels, key=float)
    except ValueError:
        return sorted(labels)


def load_panel_csv(path, schema: Optional[dict] = None) -> PanelData:
    """Read a long-format CSV (one row per unit-period) into a PanelData.

    ``schema`` maps the roles ``unit``, ``time``, ``y``, ``x`` to column
    names and ``z`` to a list of control column names. Rows may appear in any
    order; units and periods are sorted (numerically when every label parses
    as a number).
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    z_cols = list(schema.get("z") or [])
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        needed = [schema["unit"], schema["time"], schema["y"], schema["x"], *z_cols]
        missing = [c for c in needed if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        cells = {}
        value_cols = [schema["y"], schema["x"], *z_cols]
        for lineno, row in enumerate(reader, start=2):
            key = (row[schema["unit"]].strip(), row[schema["time"]].strip())
            if key in cells:
                raise DataError(f"duplicate observation for unit={key[0]!r} time={key[1]!r} (row {lineno})")
            try:
                cells[key] = [float(row[c]) for c in value_cols]
            except (TypeError, ValueError):
                raise DataError(f"parse error at row {lineno}: non-numeric value") from None
    if not cells:
        raise DataError(f"{path}: no observations")
    units = _sort_labels({k[0] for k in cells})
    periods = _sort_labels({k[1] for k in cells})
    if len(cells) != len(units) * len(periods):
        raise DataError(
            f"unbalanced panel: {len(cells)} observations for {len(units)} units x {len(periods)} periods"
        )
    data = np.empty((len(value_cols), len(units), len(periods)))
    for i, u in enumerate(units):
        for t, p in enumerate(periods):
            data[:, i, t] = cells[(u, p)]
    return PanelData(
        y=data[0],
        x=data[1],
        z=tuple(data[2:]),
        unit_labels=tuple(units),
        period_labels=tuple(periods),
        z_names=tuple(z_cols),
    )


def save_panel_csv(panel: PanelData, path, schema: Optional[dict] = None) -> None:
    """Inverse of :func:`load_panel_csv`. Floats are written with ``repr`` so
    that a reload reproduces them bit for bit."""
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    z_cols = list(schema.get("z") or panel.z_names or [f"z{k + 1}" for k in range(panel.n_controls)])
    if len(z_cols) != panel.n_controls:
        raise DataError("schema z columns do not match the number of controls")
    units = panel.unit_labels or tuple(str(i + 1) for i in range(panel.n_units))
    periods = panel.period_labels or tuple(str(t + 1) for t in range(panel.n_periods))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([schema["unit"], schema["time"], schema["y"], schema["x"], *z_cols])
        for i, u in enumerate(units):
            for t, p in enumerate(periods):
                vals = [panel.y[i, t], panel.x[i, t], *(zk[i, t] for zk in panel.z)]
                writer.writerow([u, p, *(repr(float(v)) for v in vals)])


def deterministic_design(n: int, t: int, spec: DeterministicSpec) -> np.ndarray:
    """Design matrix (NT x p) for the vectorized panel, row index ``i*T + s``.

    Trend columns use the time index rescaled to [-1, 1]; this leaves the
    column span unchanged and keeps the quadratic columns well conditioned
    for long panels.
    """
    cols = []
    eye_n = np.eye(n)
    if spec.unit_effects:
        cols.append(np.kron(eye_n, np.ones((t, 1))))
    if spec.unit_trend_degree:
        tau = np.linspace(-1.0, 1.0, t) if t > 1 else np.zeros(1)
        for d in range(1, spec.unit_trend_degree + 1):
            cols.append(np.kron(eye_n, (tau**d)[:, None]))
    if spec.time_effects:
        cols.append(np.kron(np.ones((n, 1)), np.eye(t)))
    if not cols:
        return np.zeros((n * t, 0))
    return np.hstack(cols)


def _orthonormal_basis(design: np.ndarray) -> np.ndarray:
    if design.shape[1] == 0:
        return design
    u, s, _ = np.linalg.svd(design, full_matrices=False)
    tol = max(design.shape) * np.finfo(float).eps * s[0]
    return u[:, s > tol]


def profile_out(panel: PanelData, spec: DeterministicSpec) -> PanelData:
    """Replace y, x and every z by least-squares residuals from the
    deterministic design described by ``spec``.

    Collinear design columns (unit and time dummies share the constant) are
    handled by projecting on an orthonormal basis of the column span.
    """
    if spec.is_empty:
        return panel
    n, t = panel.shape
    if spec.unit_trend_degree and t <= spec.unit_trend_degree + 1:
        raise DataError("deterministic design not estimable: too few periods for the unit trends")
    q = _orthonormal_basis(deterministic_design(n, t, spec))
    if q.shape[1] >= n * t:
        raise DataError("deterministic design not estimable: design spans every observation")

    def resid(m):
        v = m.reshape(-1)
        e = v - q @ (q.T @ v)
        # a matrix lying in the design span leaves only round-off behind
        if np.linalg.norm(e) <= 1e-12 * np.linalg.norm(v):
            e = np.zeros_like(e)
        return e.reshape(n, t)

    return panel.replace(y=resid(panel.y), x=resid(panel.x), z=tuple(resid(zk) for zk in panel.z))
