"""Evaluation quantities: error, disparate impact, deferral rates, subgroup
accuracy and Pareto fronts.

Disparate impact (DI) here is the equalized-odds gap: the mean of the absolute
false-positive-rate gap and the absolute false-negative-rate gap between the
two sensitive groups.  Empty conditioning cells raise ``UndefinedCellError``
instead of returning 0, since a silent zero would look perfectly fair.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

DECISION_THRESHOLD = 0.5


class UndefinedCellError(ValueError):
    """A conditional rate was requested on an empty (A, Y) or subgroup cell."""

    def __init__(self, cell: str):
        super().__init__(f"undefined-cell: no examples in {cell}")
        self.cell = cell


def binarize(p) -> np.ndarray:
    """Hard decisions at 0.5; a tie predicts class 1."""
    return (np.asarray(p, dtype=float) >= DECISION_THRESHOLD).astype(int)


def _as_binary(name: str, v) -> np.ndarray:
    arr = np.asarray(v)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a 1-d vector")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must be binary (0/1)")
    return arr.astype(int)


def _check_lengths(**vectors) -> int:
    lengths = {k: len(v) for k, v in vectors.items()}
    if len(set(lengths.values())) != 1:
        raise ValueError(f"length mismatch: {lengths}")
    n = next(iter(lengths.values()))
    if n == 0:
        raise ValueError("empty input")
    return n


def error_rate(y, y_hat) -> float:
    y = _as_binary("y", y)
    y_hat = np.asarray(y_hat, dtype=float)
    _check_lengths(y=y, y_hat=y_hat)
    return float(np.mean(binarize(y_hat) != y))


def _cell_masks(y: np.ndarray, a: np.ndarray) -> dict[tuple[int, int], np.ndarray]:
    return {(av, yv): (a == av) & (y == yv) for av in (0, 1) for yv in (0, 1)}


def _cell_mean(values: np.ndarray, mask: np.ndarray, a: int, y: int) -> float:
    if not mask.any():
        raise UndefinedCellError(f"A={a},Y={y}")
    return float(values[mask].mean())


def disparate_impact_hard(y, a, y_hat) -> tuple[float, float, float]:
    """Return ``(di, di_fp, di_fn)`` for binary predictions.

    ``di_fp = |P(Ŷ=1|A=0,Y=0) - P(Ŷ=1|A=1,Y=0)|`` and ``di_fn`` is the same gap in
    ``P(Ŷ=0|A,Y=1)``.  Probabilities are binarized at 0.5 first.
    """
    y = _as_binary("y", y)
    a = _as_binary("a", a)
    y_hat = np.asarray(y_hat, dtype=float)
    _check_lengths(y=y, a=a, y_hat=y_hat)
    return _di_components(y, a, binarize(y_hat).astype(float))


def _di_components(y, a, p) -> tuple[float, float, float]:
    m = _cell_masks(y, a)
    fp = abs(_cell_mean(p, m[0, 0], 0, 0) - _cell_mean(p, m[1, 0], 1, 0))
    fn = abs(_cell_mean(1 - p, m[0, 1], 0, 1) - _cell_mean(1 - p, m[1, 1], 1, 1))
    return 0.5 * (fp + fn), fp, fn


def disparate_impact_soft(y, a, p) -> float:
    """Continuous DI relaxation: indicator rates replaced by conditional means of p."""
    y = _as_binary("y", y)
    a = _as_binary("a", a)
    p = np.asarray(p, dtype=float)
    _check_lengths(y=y, a=a, p=p)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p must lie in [0, 1]")
    return _di_components(y, a, p)[0]


def squared_di_soft(y, a, p) -> float:
    """Squared-component relaxation ``(d0**2 + d1**2) / 2`` of soft DI."""
    y = _as_binary("y", y)
    a = _as_binary("a", a)
    p = np.asarray(p, dtype=float)
    _, fp, fn = _di_components(y, a, p)
    return 0.5 * (fp**2 + fn**2)


def di_contrasts(y, a) -> tuple[np.ndarray, np.ndarray]:
    """Per-example coefficients ``c`` (Y=0 side) and ``e`` (Y=1 side).

    With these, the signed soft-DI gaps are ``d0 = c @ p`` and
    ``d1 = e @ (1 - p)``.
    """
    y = np.asarray(y, dtype=int)
    a = np.asarray(a, dtype=int)
    masks = _cell_masks(y, a)
    counts = {}
    for (av, yv), m in masks.items():
        if not m.any():
            raise UndefinedCellError(f"A={av},Y={yv}")
        counts[av, yv] = m.sum()
    c = (1 - y) * ((1 - a) / counts[0, 0] - a / counts[1, 0])
    e = y * ((1 - a) / counts[0, 1] - a / counts[1, 1])
    return c.astype(float), e.astype(float)


def expected_squared_di(y, a, y_model, y_dm, pi) -> float:
    """Closed-form expectation over ``s ~ Bernoulli(pi)`` of the squared-component
    soft DI of ``Ŷ = s * y_dm + (1 - s) * y_model``.

    Each gap is linear in the independent gates, so its second moment is
    ``mean**2 + sum(coef**2 * delta**2 * pi * (1 - pi))``.
    """
    y = _as_binary("y", y)
    a = _as_binary("a", a)
    m = np.asarray(y_model, dtype=float)
    d = np.asarray(y_dm, dtype=float)
    pi = np.asarray(pi, dtype=float)
    _check_lengths(y=y, a=a, y_model=m, y_dm=d, pi=pi)
    if np.any((pi < 0) | (pi > 1)):
        raise ValueError("pi must lie in [0, 1]")
    return expected_squared_di_with_grad(y, a, m, d, pi)[0]


def expected_squared_di_with_grad(y, a, m, d, pi):
    """Value and gradients (w.r.t. ``m`` and ``pi``) of the expected squared DI."""
    c, e = di_contrasts(y, a)
    delta = d - m
    var_w = pi * (1 - pi)
    mu0 = c @ (m + pi * delta)
    v0 = np.sum(c**2 * delta**2 * var_w)
    mu1 = e @ (1 - m - pi * delta)
    v1 = np.sum(e**2 * delta**2 * var_w)
    value = 0.5 * (mu0**2 + v0 + mu1**2 + v1)

    dm = 0.5 * (
        2 * mu0 * c * (1 - pi)
        - 2 * c**2 * delta * var_w
        - 2 * mu1 * e * (1 - pi)
        - 2 * e**2 * delta * var_w
    )
    dpi = 0.5 * (
        2 * mu0 * c * delta
        + c**2 * delta**2 * (1 - 2 * pi)
        - 2 * mu1 * e * delta
        + e**2 * delta**2 * (1 - 2 * pi)
    )
    return float(value), dm, dpi


def deferral_rates(s, a, aux_group=None):
    """Overall deferral rate, per-A rates and (optionally) per-aux-group rates.

    Returns ``(overall, (rate_a0, rate_a1))`` or, with ``aux_group``,
    ``(overall, (rate_a0, rate_a1), (rate_g0, rate_g1))``.
    """
    s = _as_binary("s", s)
    a = _as_binary("a", a)
    _check_lengths(s=s, a=a)
    per_group = tuple(_group_mean(s, a == v, f"A={v}") for v in (0, 1))
    if aux_group is None:
        return float(s.mean()), per_group
    g = _as_binary("aux_group", aux_group)
    _check_lengths(s=s, aux_group=g)
    per_aux = tuple(_group_mean(s, g == v, f"aux={v}") for v in (0, 1))
    return float(s.mean()), per_group, per_aux


def _group_mean(v: np.ndarray, mask: np.ndarray, cell: str) -> float:
    if not mask.any():
        raise UndefinedCellError(cell)
    return float(v[mask].mean())


def subgroup_accuracies(y, y_hat, a, aux_group) -> dict[tuple[int, int], float]:
    y = _as_binary("y", y)
    a = _as_binary("a", a)
    g = _as_binary("aux_group", aux_group)
    y_hat = np.asarray(y_hat, dtype=float)
    _check_lengths(y=y, y_hat=y_hat, a=a, aux_group=g)
    correct = (binarize(y_hat) == y).astype(float)
    return {
        (av, gv): _group_mean(correct, (a == av) & (g == gv), f"A={av},aux={gv}")
        for av in (0, 1)
        for gv in (0, 1)
    }


def min_subgroup_accuracy(y, y_hat, a, aux_group) -> float:
    """Worst accuracy over the four (A, aux_group) subgroups."""
    return min(subgroup_accuracies(y, y_hat, a, aux_group).values())


@dataclass(frozen=True)
class ParetoPoint:
    error: float
    di: float
    payload: Any = None


def pareto_front(points: Sequence[ParetoPoint]) -> list[ParetoPoint]:
    """Points not weakly dominated in (error, di), sorted by error then di.

    ``q`` dominates ``p`` when ``q.error <= p.error`` and ``q.di <= p.di`` with at
    least one strict.  Exact (error, di) duplicates keep their first occurrence.
    """
    pts = list(points)
    for p in pts:
        if not (np.isfinite(p.error) and np.isfinite(p.di)):
            raise ValueError("pareto_front requires finite coordinates")
    order = sorted(range(len(pts)), key=lambda i: (pts[i].error, pts[i].di, i))
    front = []
    best_di = np.inf
    last = None
    for i in order:
        p = pts[i]
        key = (p.error, p.di)
        if key == last:
            continue
        # Sorted by error: p survives iff its di beats every earlier point's.
        if p.di < best_di:
            front.append(p)
            best_di = p.di
            last = key
    return front


def pareto_indices(errors, dis) -> list[int]:
    pts = [ParetoPoint(float(e), float(d), i) for i, (e, d) in enumerate(zip(errors, dis))]
    return [p.payload for p in pareto_front(pts)]


@dataclass
class MetricsRecord:
    """Flat, JSON-ready bundle of test-set metrics for one system.

    Fields whose conditioning cell was empty are ``None`` and listed in
    ``undefined``.
    """

    error_rate: float
    di: float | None
    di_fp_component: float | None
    di_fn_component: float | None
    deferral_rate: float
    deferral_a0: float | None
    deferral_a1: float | None
    deferral_aux0: float | None = None
    deferral_aux1: float | None = None
    subgroup_accuracy: dict[str, float | None] = field(default_factory=dict)
    min_subgroup_accuracy: float | None = None
    undefined: list[str] = field(default_factory=list)

    @property
    def per_group_deferral(self) -> tuple[float | None, float | None]:
        return self.deferral_a0, self.deferral_a1

    @property
    def is_defined(self) -> bool:
        return not self.undefined

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsRecord":
        return cls(**d)


SCALAR_FIELDS = (
    "error_rate",
    "di",
    "di_fp_component",
    "di_fn_component",
    "deferral_rate",
    "deferral_a0",
    "deferral_a1",
    "deferral_aux0",
    "deferral_aux1",
    "min_subgroup_accuracy",
)


def subgroup_key(a: int, g: int) -> str:
    return f"a{a}_g{g}"


def lower_median(values: Sequence[float]) -> float:
    """Median that picks the lower middle element for even counts."""
    vals = sorted(values)
    if not vals:
        raise ValueError("median of empty sequence")
    return vals[(len(vals) - 1) // 2]


def median_record(records: Sequence[MetricsRecord]) -> MetricsRecord:
    """Componentwise lower median over records (None entries are skipped)."""
    if not records:
        raise ValueError("no records to aggregate")

    def med(vals):
        vals = [v for v in vals if v is not None]
        return lower_median(vals) if vals else None

    scalars = {f: med([getattr(r, f) for r in records]) for f in SCALAR_FIELDS}
    keys = sorted({k for r in records for k in r.subgroup_accuracy})
    subgroup = {k: med([r.subgroup_accuracy.get(k) for r in records]) for k in keys}
    undefined = sorted({u for r in records for u in r.undefined})
    return MetricsRecord(subgroup_accuracy=subgroup, undefined=undefined, **scalars)
