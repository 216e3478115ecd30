"""Workflow DAG, wave loop, and data-change-triggered step scheduling.

A workflow is a DAG of processing steps sharing data through store
containers. Each round of new input is a wave. Source steps (no
predecessors) run every wave; every other step runs only when its
predecessors have produced output and, for error-tolerant steps, when the
accumulated input impact is predicted to push the step's output error past
its bound.

Two operating modes:

* synchronous (training): every eligible step executes every wave. The
  engine simulates what skipping would have done by keeping a virtual stale
  snapshot of each tolerant step's outputs; the per-wave (impact vector,
  error-exceeded bits) pairs are appended to the knowledge base.
* asynchronous (application): a trained classifier receives the impact
  vector and decides which tolerant steps run.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from . import metrics
from .learn import TrainingExample
from .metrics import (
    CANCELLATION,
    CUMULATIVE,
    ImpactState,
    MetricFn,
    accumulate,
    combine_predecessors,
    evaluate,
    resolve_metric,
)
from .store import Container, Store


class WorkflowError(Exception):
    pass


class WorkflowParseError(WorkflowError):
    pass


class CyclicDependencyError(WorkflowError):
    pass


class WiringError(WorkflowError):
    pass


class BoundRangeError(WorkflowError, ValueError):
    pass


class StepExecutionError(WorkflowError):
    def __init__(self, step_id: str, cause: Exception):
        super().__init__(f"step {step_id!r} failed: {cause}")
        self.step_id = step_id
        self.cause = cause


class NotTrainedError(WorkflowError):
    pass


# A step action reads and writes store containers; it gets the wave index
# for windowed computations.
StepAction = Callable[[Store, int], None]


@dataclass
class Step:
    """One processing step and its container bindings.

    ``max_error`` is the maximum tolerated output error in [0, 1]; 0 means
    the step never skips an eligible wave. ``mode`` picks how input impact
    carries across skipped waves: recomputed against the last-execution
    state (cancellation) or summed wave by wave (cumulative).
    """

    id: str
    predecessors: Tuple[str, ...] = ()
    inputs: Tuple[str, ...] = ()
    outputs: Tuple[str, ...] = ()
    max_error: float = 0.0
    impact_fn: MetricFn = metrics.IMPACT_REL
    error_fn: MetricFn = metrics.ERROR_REL
    mode: str = CANCELLATION
    action: Optional[StepAction] = None

    @property
    def is_source(self) -> bool:
        return not self.predecessors


@dataclass
class WorkflowSpec:
    name: str
    steps: List[Step]

    def __post_init__(self):
        self._by_id = {s.id: s for s in self.steps}
        self.validate()

    def step(self, step_id: str) -> Step:
        return self._by_id[step_id]

    @property
    def step_ids(self) -> List[str]:
        return [s.id for s in self.steps]

    def validate(self) -> None:
        if len(self._by_id) != len(self.steps):
            seen = set()
            for s in self.steps:
                if s.id in seen:
                    raise WorkflowParseError(f"duplicate step id: {s.id!r}")
                seen.add(s.id)
        for s in self.steps:
            for p in s.predecessors:
                if p not in self._by_id:
                    raise WiringError(f"step {s.id!r} depends on unknown step {p!r}")
            if not 0.0 <= s.max_error <= 1.0:
                raise BoundRangeError(
                    f"step {s.id!r}: max_error must be in [0, 1], got {s.max_error}"
                )
        self.topological_order()
        for s in self.steps:
            if s.is_source:
                continue
            provided = set()
            for p in s.predecessors:
                provided.update(self._by_id[p].outputs)
            for c in s.inputs:
                if c not in provided:
                    raise WiringError(
                        f"step {s.id!r} reads container {c!r} which no "
                        f"predecessor produces"
                    )

    def topological_order(self) -> List[str]:
        """Kahn's algorithm; ties broken lexicographically for determinism."""
        indegree = {s.id: len(s.predecessors) for s in self.steps}
        successors: Dict[str, List[str]] = {s.id: [] for s in self.steps}
        for s in self.steps:
            for p in s.predecessors:
                successors[p].append(s.id)
        ready = [sid for sid, deg in indegree.items() if deg == 0]
        heapq.heapify(ready)
        order = []
        while ready:
            sid = heapq.heappop(ready)
            order.append(sid)
            for succ in successors[sid]:
                indegree[succ] -= 1
                if indegree[succ] == 0:
                    heapq.heappush(ready, succ)
        if len(order) != len(self.steps):
            stuck = sorted(sid for sid, deg in indegree.items() if deg > 0)
            raise CyclicDependencyError(f"dependency cycle involving: {stuck}")
        return order

    def tolerant_steps(self) -> List[str]:
        """Error-tolerant steps (skippable) in topological order."""
        return [sid for sid in self.topological_order()
                if self._by_id[sid].max_error > 0 and not self._by_id[sid].is_source]

    def containers(self) -> List[str]:
        names: List[str] = []
        for s in self.steps:
            for c in list(s.inputs) + list(s.outputs):
                if c not in names:
                    names.append(c)
        return names

    def providers(self, step: Step) -> Dict[str, List[str]]:
        """Map each input container of ``step`` to the predecessors that
        produce it."""
        out: Dict[str, List[str]] = {}
        for c in step.inputs:
            out[c] = [p for p in step.predecessors if c in self._by_id[p].outputs]
        return out


def trigger_eligible(workflow: WorkflowSpec, step_id: str,
                     history: Mapping[str, Optional[int]]) -> bool:
    """Whether a step may be considered this wave.

    True iff every predecessor has executed at least once overall and has
    executed at (or after) the wave this step last ran. ``history`` maps
    step id to the wave of its last execution, None for never.
    """
    step = workflow.step(step_id)
    own = history.get(step_id)
    for p in step.predecessors:
        pred_last = history.get(p)
        if pred_last is None:
            return False
        if own is not None and pred_last < own:
            return False
    return True


@dataclass
class Decision:
    wave: int
    execute: Dict[str, bool]


@dataclass
class WaveResult:
    """Per-wave engine record: what ran, the impact state behind the
    decision, and in training mode the simulated errors and labels."""

    wave: int
    decision: Decision
    eligible: Dict[str, bool]
    iota: Dict[str, float]
    predicted_error: Dict[str, float]
    simulated_error: Dict[str, float] = field(default_factory=dict)
    labels: Dict[str, bool] = field(default_factory=dict)


WaveInput = Sequence[Tuple[str, str, float]]


class Engine:
    """Drives one workflow over a store, one wave at a time.

    The engine mirrors every store write into private per-step view
    containers (via a store listener), so each step keeps its own reference
    state: input views snapshot when the step executes (cancellation) or
    every wave (cumulative), output views snapshot when the simulated error
    crosses the step's bound during training.
    """

    def __init__(self, workflow: WorkflowSpec, store: Optional[Store] = None,
                 forced_after: Optional[int] = None, rollback: bool = True):
        self.workflow = workflow
        self.store = store if store is not None else Store()
        self.forced_after = forced_after
        self.rollback = rollback

        for name in workflow.containers():
            self.store.ensure_container(name)

        self.topo = workflow.topological_order()
        self.tolerant = workflow.tolerant_steps()
        self._tolerant_index = {sid: i for i, sid in enumerate(self.tolerant)}

        self.last_exec: Dict[str, Optional[int]] = {sid: None for sid in self.topo}
        self.exec_count: Dict[str, int] = {sid: 0 for sid in self.topo}
        self.skip_streak: Dict[str, int] = {sid: 0 for sid in self.tolerant}
        self.impact: Dict[str, ImpactState] = {
            sid: ImpactState(step=sid, mode=workflow.step(sid).mode)
            for sid in self.tolerant
        }
        self.knowledge_base: List[TrainingExample] = []
        self.wave_count = 0

        self._input_views: Dict[str, Dict[str, Container]] = {}
        self._error_views: Dict[str, Dict[str, Container]] = {}
        self._fanout: Dict[str, List[Container]] = {}
        for sid in self.tolerant:
            step = workflow.step(sid)
            self._input_views[sid] = {}
            for c in step.inputs:
                view = Container(f"{sid}<-{c}")
                self._input_views[sid][c] = view
                self._fanout.setdefault(c, []).append(view)
            self._error_views[sid] = {}
            for c in step.outputs:
                view = Container(f"{sid}->{c}")
                self._error_views[sid][c] = view
                self._fanout.setdefault(c, []).append(view)
        self.store.register_listener(self._on_put)

    def _on_put(self, container: str, key: str, old: float, new: float) -> None:
        for view in self._fanout.get(container, ()):
            view.put(key, new)

    # -- impact and error bookkeeping -------------------------------------

    def _per_predecessor(self, step: Step, fn: MetricFn) -> Dict[str, float]:
        views = self._input_views[step.id]
        providers = self.workflow.providers(step)
        by_pred: Dict[str, List[float]] = {}
        for c, preds in providers.items():
            value = evaluate(fn, views[c])
            for p in preds:
                by_pred.setdefault(p, []).append(value)
        return {p: combine_predecessors(vals) for p, vals in sorted(by_pred.items())}

    def _update_impact(self, step: Step) -> None:
        state = self.impact[step.id]
        per_pred = self._per_predecessor(step, step.impact_fn)
        combined = combine_predecessors(list(per_pred.values())) if per_pred else 0.0
        if state.mode == CUMULATIVE:
            accumulate(state, combined)
        else:
            state.accumulated = combined
        state.per_predecessor = per_pred

    def _predicted_error(self, step: Step) -> float:
        """The step's own error metric evaluated over its stale-vs-current
        input views at decision time; a proxy for the output error a skip
        would incur."""
        per_pred = self._per_predecessor(step, step.error_fn)
        return combine_predecessors(list(per_pred.values())) if per_pred else 0.0

    def _simulated_error(self, step: Step) -> float:
        """Fresh output against the virtual stale snapshot; max over the
        step's output containers."""
        views = self._error_views[step.id].values()
        return max((evaluate(step.error_fn, v) for v in views), default=0.0)

    def _snapshot_inputs(self, sid: str) -> None:
        for view in self._input_views[sid].values():
            view.snapshot()

    def _execute(self, step: Step, wave: int) -> None:
        if step.action is not None:
            try:
                step.action(self.store, wave)
            except Exception as exc:  # noqa: BLE001 - user actions may raise anything
                raise StepExecutionError(step.id, exc) from exc
        self.last_exec[step.id] = wave
        self.exec_count[step.id] += 1

    def _apply_input(self, wave_input: WaveInput) -> None:
        for container, key, value in wave_input:
            self.store.put(container, key, value)

    # -- rollback ----------------------------------------------------------

    def _checkpoint(self):
        return (
            self.store.dump(),
            {sid: {c: v.dump() for c, v in views.items()}
             for sid, views in self._input_views.items()},
            {sid: {c: v.dump() for c, v in views.items()}
             for sid, views in self._error_views.items()},
            dict(self.last_exec),
            dict(self.exec_count),
            dict(self.skip_streak),
            {sid: replace(st, per_predecessor=dict(st.per_predecessor))
             for sid, st in self.impact.items()},
            len(self.knowledge_base),
            self.wave_count,
        )

    def _restore(self, cp) -> None:
        (store_state, in_views, err_views, last_exec, exec_count, skip_streak,
         impact, kb_len, wave_count) = cp
        self.store.restore(store_state)
        for sid, views in in_views.items():
            for c, state in views.items():
                self._input_views[sid][c].restore(state)
        for sid, views in err_views.items():
            for c, state in views.items():
                self._error_views[sid][c].restore(state)
        self.last_exec = last_exec
        self.exec_count = exec_count
        self.skip_streak = skip_streak
        self.impact = impact
        del self.knowledge_base[kb_len:]
        self.wave_count = wave_count

    # -- wave loops ----------------------------------------------------------

    def run_wave_sync(self, wave_input: WaveInput) -> WaveResult:
        """Training-mode wave: every eligible step executes.

        Impact is recorded just before each step runs (so it reflects the
        predecessors' fresh output this wave), the simulated error is
        measured right after, and the (impact, error-exceeded) row joins the
        knowledge base.
        """
        cp = self._checkpoint() if self.rollback else None
        wave = self.wave_count
        self.wave_count = wave + 1
        try:
            self._apply_input(wave_input)
            executed: Dict[str, bool] = {}
            eligible: Dict[str, bool] = {}
            iota: Dict[str, float] = {}
            predicted: Dict[str, float] = {}
            sim_err: Dict[str, float] = {}
            labels: Dict[str, bool] = {}
            for sid in self.topo:
                step = self.workflow.step(sid)
                if step.is_source:
                    eligible[sid] = True
                    self._execute(step, wave)
                    executed[sid] = True
                    continue
                eligible[sid] = trigger_eligible(self.workflow, sid, self.last_exec)
                if not eligible[sid]:
                    executed[sid] = False
                    continue
                tolerant = sid in self._tolerant_index
                if tolerant:
                    self._update_impact(step)
                    iota[sid] = self.impact[sid].accumulated
                    predicted[sid] = self._predicted_error(step)
                self._execute(step, wave)
                executed[sid] = True
                if tolerant:
                    eps = self._simulated_error(step)
                    sim_err[sid] = eps
                    exceeded = eps > step.max_error
                    labels[sid] = exceeded
                    if exceeded:
                        for view in self._error_views[sid].values():
                            view.snapshot()
                    self._snapshot_inputs(sid)
                    self.impact[sid].reset()
            if self.tolerant:
                self.knowledge_base.append(TrainingExample(
                    wave=wave,
                    features=tuple(iota.get(s, self.impact[s].accumulated)
                                   for s in self.tolerant),
                    labels=tuple(labels.get(s, False) for s in self.tolerant),
                ))
            return WaveResult(
                wave=wave,
                decision=Decision(wave=wave, execute=executed),
                eligible=eligible,
                iota=iota,
                predicted_error=predicted,
                simulated_error=sim_err,
                labels=labels,
            )
        except Exception:
            if cp is not None:
                self._restore(cp)
            raise

    def run_wave_async(self, wave_input: WaveInput, model) -> WaveResult:
        """Application-mode wave.

        Sources run first, impact accumulates for every eligible step, one
        classifier query maps the impact vector to execute bits, and the
        chosen steps (plus zero-tolerance and force-triggered ones) run in
        topological order. Executed steps snapshot their input views and
        reset their impact state.
        """
        if model is None:
            raise NotTrainedError("asynchronous mode requires a trained model")
        cp = self._checkpoint() if self.rollback else None
        wave = self.wave_count
        self.wave_count = wave + 1
        try:
            self._apply_input(wave_input)
            execute: Dict[str, bool] = {}
            eligible: Dict[str, bool] = {}
            iota: Dict[str, float] = {}
            predicted: Dict[str, float] = {}
            for sid in self.topo:
                step = self.workflow.step(sid)
                if step.is_source:
                    eligible[sid] = True
                    self._execute(step, wave)
                    execute[sid] = True
            for sid in self.topo:
                step = self.workflow.step(sid)
                if step.is_source:
                    continue
                eligible[sid] = trigger_eligible(self.workflow, sid, self.last_exec)
                if sid in self._tolerant_index and eligible[sid]:
                    self._update_impact(step)
                    predicted[sid] = self._predicted_error(step)
            for sid in self.tolerant:
                iota[sid] = self.impact[sid].accumulated
                if self.workflow.step(sid).mode == CUMULATIVE and eligible[sid]:
                    self._snapshot_inputs(sid)

            features = [iota[s] for s in self.tolerant]
            if self.tolerant:
                if hasattr(model, "decide"):
                    bits = model.decide(features,
                                        [eligible[s] for s in self.tolerant], wave)
                else:
                    bits = model.classify(features)
            else:
                bits = []

            for sid in self.topo:
                step = self.workflow.step(sid)
                if step.is_source:
                    continue
                if not eligible[sid]:
                    execute[sid] = False
                    continue
                if step.max_error == 0:
                    execute[sid] = True
                    continue
                decision = bool(bits[self._tolerant_index[sid]])
                if (not decision and self.forced_after is not None
                        and self.skip_streak[sid] + 1 >= self.forced_after):
                    decision = True
                execute[sid] = decision

            for sid in self.topo:
                step = self.workflow.step(sid)
                if step.is_source or not execute[sid]:
                    continue
                self._execute(step, wave)
                if sid in self._tolerant_index:
                    self._snapshot_inputs(sid)
                    self.impact[sid].reset()

            for sid in self.tolerant:
                if execute[sid]:
                    self.skip_streak[sid] = 0
                elif eligible[sid]:
                    self.skip_streak[sid] += 1

            return WaveResult(
                wave=wave,
                decision=Decision(wave=wave, execute=execute),
                eligible=eligible,
                iota=iota,
                predicted_error=predicted,
            )
        except Exception:
            if cp is not None:
                self._restore(cp)
            raise


# ---------------------------------------------------------------------------
# Workflow file format.
#
# Line-oriented text, one step per blank-line-separated block:
#
#     step <id>
#     after <id> [<id> ...]
#     in <container>[,<container>...]
#     out <container>[,<container>...]
#     max_error <float in 0..1>
#     impact abs|rel|custom:<id>
#     error rel|rmse|custom:<id>
#     mode cumulative|cancellation
#
# '#' starts a comment. An optional standalone block `workflow <name>`
# names the workflow. Every directive except `step` is optional; defaults
# are no predecessors, no containers, max_error 0, impact rel, error rel,
# mode cancellation.

_STEP_DIRECTIVES = {"after", "in", "out", "max_error", "impact", "error", "mode"}


def load_workflow(text: str, name: str = "workflow") -> WorkflowSpec:
    """Parse the workflow file format into a validated WorkflowSpec."""
    blocks: List[List[Tuple[int, str]]] = [[]]
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            if blocks[-1]:
                blocks.append([])
            continue
        blocks[-1].append((lineno, line))
    if blocks and not blocks[-1]:
        blocks.pop()

    steps: List[Step] = []
    for block in blocks:
        lineno, head = block[0]
        parts = head.split()
        if parts[0] == "workflow":
            if len(parts) != 2 or len(block) > 1:
                raise WorkflowParseError(f"line {lineno}: malformed workflow header")
            name = parts[1]
            continue
        if parts[0] != "step" or len(parts) != 2:
            raise WorkflowParseError(
                f"line {lineno}: expected 'step <id>', got {head!r}"
            )
        step_id = parts[1]
        fields = {
            "after": (), "in": (), "out": (),
            "max_error": 0.0, "impact": "rel", "error": "rel",
            "mode": CANCELLATION,
        }
        seen = set()
        for lineno, line in block[1:]:
            key, _, rest = line.partition(" ")
            rest = rest.strip()
            if key not in _STEP_DIRECTIVES:
                raise WorkflowParseError(f"line {lineno}: unknown directive {key!r}")
            if key in seen:
                raise WorkflowParseError(
                    f"line {lineno}: duplicate directive {key!r} in step {step_id!r}"
                )
            seen.add(key)
            if not rest:
                raise WorkflowParseError(f"line {lineno}: directive {key!r} needs a value")
            if key == "after":
                fields["after"] = tuple(rest.split())
            elif key in ("in", "out"):
                fields[key] = tuple(c.strip() for c in rest.split(",") if c.strip())
            elif key == "max_error":
                try:
                    fields["max_error"] = float(rest)
                except ValueError as exc:
                    raise WorkflowParseError(
                        f"line {lineno}: bad max_error {rest!r}"
                    ) from exc
            elif key == "mode":
                if rest not in (CUMULATIVE, CANCELLATION):
                    raise WorkflowParseError(f"line {lineno}: bad mode {rest!r}")
                fields["mode"] = rest
            else:
                fields[key] = rest
        try:
            impact_fn = resolve_metric(fields["impact"], "impact")
            error_fn = resolve_metric(fields["error"], "error")
        except ValueError as exc:
            raise WorkflowParseError(str(exc)) from exc
        steps.append(Step(
            id=step_id,
            predecessors=fields["after"],
            inputs=fields["in"],
            outputs=fields["out"],
            max_error=fields["max_error"],
            impact_fn=impact_fn,
            error_fn=error_fn,
            mode=fields["mode"],
        ))
    if not steps:
        raise WorkflowParseError("workflow text defines no steps")
    return WorkflowSpec(name=name, steps=steps)


def serialize_workflow(spec: WorkflowSpec) -> str:
    """Emit the canonical text form of a workflow (actions are not part of
    the file format)."""
    out = [f"workflow {spec.name}"]
    for s in spec.steps:
        block = [f"step {s.id}"]
        if s.predecessors:
            block.append("after " + " ".join(s.predecessors))
        if s.inputs:
            block.append("in " + ",".join(s.inputs))
        if s.outputs:
            block.append("out " + ",".join(s.outputs))
        block.append(f"max_error {s.max_error!r}")
        block.append(f"impact {s.impact_fn.name or 'rel'}")
        block.append(f"error {s.error_fn.name or 'rel'}")
        block.append(f"mode {s.mode}")
        out.append("\n".join(block))
    return "\n\n".join(out) + "\n"


def bind_actions(spec: WorkflowSpec, actions: Mapping[str, StepAction]) -> WorkflowSpec:
    """Attach step actions to a parsed workflow."""
    unknown = set(actions) - set(spec.step_ids)
    if unknown:
        raise WorkflowError(f"actions for unknown steps: {sorted(unknown)}")
    for s in spec.steps:
        if s.id in actions:
            s.action = actions[s.id]
    return spec
