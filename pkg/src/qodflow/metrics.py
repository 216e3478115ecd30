"""Change-impact and staleness-error metrics over store containers.

Four built-in metric functions are provided:

* ``abs``  : sum of absolute element deltas, scaled by the modified count.
* ``rel``  : the same numerator, normalized by the magnitude of the touched
  elements and the container size; ranges over [0, 1].
* ``relerr``: deviation relative to the reference state of the whole
  container; ranges over [0, 1].
* ``rmse`` : root-mean-square deviation of the modified elements.

All four are expressed through the same three-hook pipeline users implement
for custom metrics: ``process_element`` maps one element's (current,
previous) pair to a tuple of reals, ``aggregate`` folds those tuples in a
streaming reduction, and ``compute`` turns the final accumulator plus the
container's element counts (n total, m modified) into the metric value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

from .store import Container

ABS_MAG = "abs"
REL_IMPACT = "rel"
REL_ERROR = "relerr"
RMSE = "rmse"
CUSTOM = "custom"

CUMULATIVE = "cumulative"
CANCELLATION = "cancellation"


class MetricEvaluationError(Exception):
    """A metric hook raised while processing an element."""

    def __init__(self, key: str, cause: Exception):
        super().__init__(f"metric hook failed on element {key!r}: {cause}")
        self.key = key
        self.cause = cause


class ModeMisuseError(Exception):
    pass


@dataclass(frozen=True)
class MetricFn:
    """A metric as a process/aggregate/compute hook triple.

    ``scope`` selects which elements feed ``process_element``: "dirty"
    (modified since the reference snapshot, the default for custom metrics)
    or "all". Clean elements always satisfy current == previous, so
    delta-style hooks produce identical results under either scope; "all"
    exists for metrics whose denominator spans the whole container.
    """

    kind: str
    process_element: Callable
    aggregate: Callable
    compute: Callable
    scope: str = "dirty"
    name: str = ""

    def __call__(self, container: Container) -> float:
        return evaluate(self, container)


def evaluate(fn: MetricFn, container: Container) -> float:
    """Run the hook pipeline over a container and return the metric value.

    Elements are visited in unspecified order; ``aggregate`` sees the running
    accumulator and one tuple at a time (bounded memory). ``compute``
    receives None as the accumulator when no elements were visited.
    """
    elements = container.items() if fn.scope == "all" else container.dirty_items()
    acc = None
    first = True
    for el in elements:
        try:
            t = fn.process_element(el.current, el.previous)
            if first:
                acc = t
                first = False
            else:
                acc = fn.aggregate(acc, t)
        except Exception as exc:  # noqa: BLE001 - user hooks may raise anything
            raise MetricEvaluationError(el.key, exc) from exc
    try:
        return float(fn.compute(acc, container.n, container.m))
    except Exception as exc:  # noqa: BLE001
        raise MetricEvaluationError("<compute>", exc) from exc


def run_custom(fn: MetricFn, container: Container) -> float:
    """Evaluate a user-supplied metric; all three hooks must be present."""
    if fn.kind != CUSTOM:
        raise ValueError(f"run_custom expects a custom metric, got kind {fn.kind!r}")
    if not (fn.process_element and fn.aggregate and fn.compute):
        raise ValueError("custom metric requires process_element, aggregate and compute")
    return evaluate(fn, container)


def _clamp01(x: float) -> float:
    return 0.0 if x < 0.0 else 1.0 if x > 1.0 else x


def _pair_sum(acc, t):
    return (acc[0] + t[0], acc[1] + t[1])


def _abs_compute(acc, n, m):
    return 0.0 if m == 0 else acc * m


def _rel_compute(acc, n, m):
    if m == 0:
        return 0.0
    sum_abs, sum_max = acc
    den = sum_max * n
    # A change measured against a zero (or negative) baseline is maximal.
    if den <= 0.0:
        return 1.0
    return _clamp01((sum_abs * m) / den)


def _rel_error_compute(acc, n, m):
    if m == 0:
        return 0.0
    sum_abs, sum_prev = acc if acc is not None else (0.0, 0.0)
    den = sum_prev * n
    if den <= 0.0:
        return 1.0
    return _clamp01((sum_abs * m) / den)


def _rmse_compute(acc, n, m):
    return 0.0 if m == 0 else math.sqrt(acc / m)


IMPACT_ABS = MetricFn(
    kind=ABS_MAG,
    process_element=lambda c, p: abs(c - p),
    aggregate=lambda acc, t: acc + t,
    compute=_abs_compute,
    name="abs",
)

IMPACT_REL = MetricFn(
    kind=REL_IMPACT,
    process_element=lambda c, p: (abs(c - p), max(c, p)),
    aggregate=_pair_sum,
    compute=_rel_compute,
    name="rel",
)

# The relative-error denominator spans every element's reference value, so
# this one iterates the whole container. Clean elements contribute a zero
# delta and their reference value.
ERROR_REL = MetricFn(
    kind=REL_ERROR,
    process_element=lambda c, p: (abs(c - p), p),
    aggregate=_pair_sum,
    compute=_rel_error_compute,
    scope="all",
    name="rel",
)

ERROR_RMSE = MetricFn(
    kind=RMSE,
    process_element=lambda c, p: (c - p) ** 2,
    aggregate=lambda acc, t: acc + t,
    compute=_rmse_compute,
    name="rmse",
)


def impact_abs(container: Container) -> float:
    """(sum of |current - previous| over modified elements) times m."""
    return evaluate(IMPACT_ABS, container)


def impact_rel(container: Container) -> float:
    """Relative impact in [0, 1]; 0 means no changes, 1 means the change
    magnitude reached the magnitude of the touched state."""
    return evaluate(IMPACT_REL, container)


def error_rel(container: Container) -> float:
    """Relative deviation from the reference state, in [0, 1]."""
    return evaluate(ERROR_REL, container)


def error_rmse(container: Container) -> float:
    """Root-mean-square deviation of the modified elements."""
    return evaluate(ERROR_RMSE, container)


def combine_predecessors(impacts: Sequence[float]) -> float:
    """Geometric mean of per-predecessor impact values."""
    if len(impacts) == 0:
        raise ValueError("combine_predecessors needs at least one impact value")
    for v in impacts:
        if v < 0.0:
            raise ValueError(f"impact values must be non-negative, got {v}")
    if any(v == 0.0 for v in impacts):
        return 0.0
    return math.exp(sum(math.log(v) for v in impacts) / len(impacts))


@dataclass
class ImpactState:
    """Per-step running input impact.

    In cumulative mode ``accumulated`` is the sum of per-wave combined
    impacts since the step last executed. In cancellation mode it is
    recomputed each wave against the last-execution reference, so changes
    that revert cancel out. Either way it drops to 0 the moment the owning
    step executes.
    """

    step: str
    mode: str = CANCELLATION
    accumulated: float = 0.0
    per_predecessor: Dict[str, float] = field(default_factory=dict)

    def reset(self) -> None:
        self.accumulated = 0.0
        self.per_predecessor.clear()


def accumulate(state: ImpactState, wave_impact: float) -> ImpactState:
    """Add one wave's combined impact to a cumulative-mode state."""
    if state.mode != CUMULATIVE:
        raise ModeMisuseError(
            f"accumulate is only valid in cumulative mode, step {state.step!r} "
            f"is in {state.mode!r} mode"
        )
    state.accumulated += wave_impact
    return state


_CUSTOM_METRICS: Dict[str, MetricFn] = {}


def register_metric(metric_id: str, fn: MetricFn) -> None:
    """Register a custom metric so workflow files can select it by id."""
    _CUSTOM_METRICS[metric_id] = fn


def resolve_metric(selector: str, role: str) -> MetricFn:
    """Map a workflow-file selector to a metric function.

    ``role`` is "impact" (accepts abs|rel|custom:<id>) or "error"
    (accepts rel|rmse|custom:<id>).
    """
    if selector.startswith("custom:"):
        metric_id = selector.split(":", 1)[1]
        fn = _CUSTOM_METRICS.get(metric_id)
        if fn is None:
            raise ValueError(f"unknown custom metric id: {metric_id!r}")
        return fn
    if role == "impact":
        table: Dict[str, MetricFn] = {"abs": IMPACT_ABS, "rel": IMPACT_REL}
    elif role == "error":
        table = {"rel": ERROR_REL, "rmse": ERROR_RMSE}
    else:
        raise ValueError(f"unknown metric role: {role!r}")
    fn = table.get(selector)
    if fn is None:
        raise ValueError(f"unknown {role} metric selector: {selector!r}")
    return fn
