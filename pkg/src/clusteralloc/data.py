"""Domain types and CSV persistence for logged marketing data.

A dataset is a flat table of logged units: a feature vector, the logged
treatment arm, the realized cost and revenue, and the logging propensity of
the observed arm. Arm 0 is always the control / lowest treatment. All types
are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Sequence

import numpy as np

from .errors import DatasetError

_RCT_PROPENSITY_ATOL = 1e-9


class DatasetKind(Enum):
    RCT = "rct"
    OBS = "obs"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class TreatmentSet:
    """The M discrete treatment arms with their real-valued levels.

    ``values`` must be strictly increasing; index 0 is the control / lowest
    treatment. ``normalized()`` maps the levels onto [0, 1], which is the
    scalar treatment representation used by models that need one.
    """

    values: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        values = _frozen(np.asarray(self.values, dtype=np.float64))
        object.__setattr__(self, "values", values)
        if values.ndim != 1 or values.size < 2:
            raise DatasetError("treatment set needs at least 2 arms")
        if not np.all(np.diff(values) > 0):
            raise DatasetError("treatment values must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise DatasetError("treatment values must be finite")
        if len(self.labels) != values.size:
            raise DatasetError("one label per treatment arm required")

    @classmethod
    def from_values(cls, values: Sequence[float], labels: Sequence[str] | None = None) -> "TreatmentSet":
        values = np.asarray(values, dtype=np.float64)
        if labels is None:
            labels = tuple(f"t{j}" for j in range(values.size))
        return cls(values=values, labels=tuple(labels))

    @property
    def count(self) -> int:
        return int(self.values.size)

    def normalized(self) -> np.ndarray:
        """Treatment levels rescaled to [0, 1] (control maps to 0)."""
        lo, hi = self.values[0], self.values[-1]
        return (self.values - lo) / (hi - lo)


@dataclass(frozen=True)
class Sample:
    """One logged unit."""

    features: np.ndarray
    treatment: int
    cost: float
    revenue: float
    propensity: float


@dataclass(frozen=True)
class Dataset:
    """A validated, immutable table of logged units.

    Stored column-wise as numpy arrays. Construction validates every type
    invariant; a `Dataset` in hand means all of them hold.
    """

    features: np.ndarray
    treatment: np.ndarray
    cost: np.ndarray
    revenue: np.ndarray
    propensity: np.ndarray
    kind: DatasetKind
    treatment_set: TreatmentSet

    def __post_init__(self):
        feats = _frozen(np.asarray(self.features, dtype=np.float64))
        if feats.ndim != 2:
            raise DatasetError("features must be a 2-d array (n, d)")
        n = feats.shape[0]
        t = _frozen(np.asarray(self.treatment, dtype=np.int64))
        cost = _frozen(np.asarray(self.cost, dtype=np.float64))
        revenue = _frozen(np.asarray(self.revenue, dtype=np.float64))
        prop = _frozen(np.asarray(self.propensity, dtype=np.float64))
        for name, col in (("treatment", t), ("cost", cost), ("revenue", revenue), ("propensity", prop)):
            if col.shape != (n,):
                raise DatasetError(f"{name} column must have shape ({n},)")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "treatment", t)
        object.__setattr__(self, "cost", cost)
        object.__setattr__(self, "revenue", revenue)
        object.__setattr__(self, "propensity", prop)

        m = self.treatment_set.count
        bad = np.flatnonzero((t < 0) | (t >= m))
        if bad.size:
            raise DatasetError(f"row {bad[0]}: treatment index {t[bad[0]]} outside [0, {m})")
        bad = np.flatnonzero(prop <= 0)
        if bad.size:
            raise DatasetError(f"row {bad[0]}: propensity {prop[bad[0]]} must be > 0")
        if np.any(prop > 1):
            bad = np.flatnonzero(prop > 1)
            raise DatasetError(f"row {bad[0]}: propensity {prop[bad[0]]} must be <= 1")
        bad = np.flatnonzero(cost < 0)
        if bad.size:
            raise DatasetError(f"row {bad[0]}: cost {cost[bad[0]]} must be >= 0")
        if not np.all(np.isfinite(feats)):
            raise DatasetError("non-finite feature value")
        if not (np.all(np.isfinite(cost)) and np.all(np.isfinite(revenue)) and np.all(np.isfinite(prop))):
            raise DatasetError("non-finite outcome or propensity value")
        if self.kind is DatasetKind.RCT and n > 0:
            self._check_rct_propensities()

    def _check_rct_propensities(self):
        arm_props = np.full(self.treatment_set.count, np.nan)
        for j in np.unique(self.treatment):
            p = self.propensity[self.treatment == j]
            if np.ptp(p) > _RCT_PROPENSITY_ATOL:
                raise DatasetError(f"RCT propensity not constant within arm {j}")
            arm_props[j] = p[0]
        if not np.any(np.isnan(arm_props)):
            total = arm_props.sum()
            if abs(total - 1.0) > 1e-6:
                raise DatasetError(f"RCT arm propensities sum to {total}, expected 1")

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def __len__(self) -> int:
        return self.n

    def sample(self, i: int) -> Sample:
        return Sample(
            features=self.features[i],
            treatment=int(self.treatment[i]),
            cost=float(self.cost[i]),
            revenue=float(self.revenue[i]),
            propensity=float(self.propensity[i]),
        )

    def samples(self) -> Iterator[Sample]:
        return (self.sample(i) for i in range(self.n))

    @classmethod
    def from_samples(
        cls,
        samples: Sequence[Sample],
        kind: DatasetKind,
        treatment_set: TreatmentSet,
        feature_dim: int | None = None,
    ) -> "Dataset":
        if samples:
            feats = np.stack([s.features for s in samples])
        else:
            feats = np.zeros((0, feature_dim or 0))
        return cls(
            features=feats,
            treatment=np.array([s.treatment for s in samples], dtype=np.int64),
            cost=np.array([s.cost for s in samples]),
            revenue=np.array([s.revenue for s in samples]),
            propensity=np.array([s.propensity for s in samples]),
            kind=kind,
            treatment_set=treatment_set,
        )


@dataclass(frozen=True)
class Assignment:
    """One treatment choice per row (cluster or individual).

    ``choice[i]`` is the arm assigned to row i; exactly one arm per row, so
    the one-hot constraint of the allocation programs is structural.
    ``objective`` is the solver's optimized value (equals ``expected_revenue``
    when both variance-aversion factors are zero); ``info`` carries solver
    diagnostics such as duality gap or discretization resolution.
    """

    choice: np.ndarray
    expected_revenue: float
    expected_cost: float
    objective: float = 0.0
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        choice = _frozen(np.asarray(self.choice, dtype=np.int64))
        if choice.ndim != 1:
            raise DatasetError("choice must be a 1-d index vector")
        if choice.size and choice.min() < 0:
            raise DatasetError("negative treatment index in assignment")
        object.__setattr__(self, "choice", choice)


_FIXED_COLUMNS = ("t", "cost", "revenue", "propensity")


def _format_float(x: float) -> str:
    # repr() emits the shortest decimal that round-trips to the same float64,
    # so save -> load is bit-exact.
    return repr(float(x))


def save_dataset(dataset: Dataset, path) -> None:
    """Write a dataset as CSV with header ``f0..f{d-1},t,cost,revenue,propensity``.

    Output bytes are deterministic for a given dataset (LF endings, shortest
    round-tripping float representation).
    """
    d = dataset.feature_dim
    header = ",".join([f"f{i}" for i in range(d)] + list(_FIXED_COLUMNS))
    lines = [header]
    for i in range(dataset.n):
        row = [_format_float(v) for v in dataset.features[i]]
        row.append(str(int(dataset.treatment[i])))
        row.append(_format_float(dataset.cost[i]))
        row.append(_format_float(dataset.revenue[i]))
        row.append(_format_float(dataset.propensity[i]))
        lines.append(",".join(row))
    text = "\n".join(lines) + "\n"
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise DatasetError(f"cannot write dataset to {path}: {exc}") from exc


def load_dataset(
    path,
    treatment_set: TreatmentSet,
    kind: DatasetKind = DatasetKind.RCT,
) -> Dataset:
    """Load and validate a CSV dataset (schema of :func:`save_dataset`).

    The propensity column may be absent for RCT data, in which case each
    arm's empirical frequency is used. Row order is preserved. Malformed
    rows raise :class:`DatasetError` with a 1-based line number.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DatasetError(f"cannot read dataset from {path}: {exc}") from exc
    if not lines:
        raise DatasetError(f"{path}: empty file, header expected")

    header = lines[0].split(",")
    d = 0
    while d < len(header) and header[d] == f"f{d}":
        d += 1
    rest = tuple(header[d:])
    if rest == _FIXED_COLUMNS:
        has_propensity = True
    elif rest == _FIXED_COLUMNS[:-1]:
        has_propensity = False
    else:
        raise DatasetError(f"{path}: unexpected header {lines[0]!r}")
    if not has_propensity and kind is not DatasetKind.RCT:
        raise DatasetError(f"{path}: propensity column required for OBS data")

    width = d + len(rest)
    n = len(lines) - 1
    feats = np.empty((n, d))
    t = np.empty(n, dtype=np.int64)
    cost = np.empty(n)
    revenue = np.empty(n)
    prop = np.empty(n)
    m = treatment_set.count
    for i, line in enumerate(lines[1:]):
        lineno = i + 2
        parts = line.split(",")
        if len(parts) != width:
            raise DatasetError(f"{path}: line {lineno}: expected {width} fields, got {len(parts)}")
        try:
            feats[i] = [float(v) for v in parts[:d]]
            t_val = int(parts[d])
            cost[i] = float(parts[d + 1])
            revenue[i] = float(parts[d + 2])
            prop[i] = float(parts[d + 3]) if has_propensity else np.nan
        except ValueError as exc:
            raise DatasetError(f"{path}: line {lineno}: {exc}") from exc
        if not 0 <= t_val < m:
            raise DatasetError(f"{path}: line {lineno}: treatment index {t_val} outside [0, {m})")
        if has_propensity and prop[i] <= 0:
            raise DatasetError(f"{path}: line {lineno}: propensity {prop[i]} must be > 0")
        t[i] = t_val
    if not has_propensity:
        for j in range(m):
            mask = t == j
            if mask.any():
                prop[mask] = mask.sum() / max(n, 1)
    return Dataset(
        features=feats,
        treatment=t,
        cost=cost,
        revenue=revenue,
        propensity=prop,
        kind=kind,
        treatment_set=treatment_set,
    )
