"""Instrumented graph execution: sequential, pipelined across chips, and ratio sweeps."""
from __future__ import annotations

import csv
import io
import queue
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from chipneck import engine
from chipneck.engine import Tensor
from chipneck.errors import ConfigError, ExecutionError
from chipneck.graph import Input, NetworkGraph
from chipneck.traffic import (CONTIGUOUS, LinkModel, PartitionPlan, TrafficReport, bottleneck_partition, partition,
                              predict_traffic, report_from_shapes)
from chipneck.train import TrainConfig, evaluate, train

SWEEP_HEADER = ("ratio", "accuracy", "total_bytes", "boundary_bytes", "latency_s")


def _defaults(graph, plan, link):
    if plan is None:
        plan = partition(graph, 1)
    if link is None:
        link = LinkModel(word_size=graph.dtype.itemsize)
    return plan, link


def profile_forward(graph: NetworkGraph, x, plan: PartitionPlan | None = None, link: LinkModel | None = None
                    ) -> tuple[Tensor, TrafficReport]:
    """Inference pass that records every layer's output-activation bytes."""
    plan, link = _defaults(graph, plan, link)
    shapes = {}

    def record(node, out):
        shapes[node.id] = out.shape

    with engine.no_grad():
        out = graph.forward(x, train=False, hook=record)
    return out, report_from_shapes(graph, plan, shapes, link)


def sequential_forward(graph: NetworkGraph, inputs: Sequence, plan: PartitionPlan | None = None,
                       link: LinkModel | None = None) -> tuple[list[Tensor], TrafficReport]:
    results = [profile_forward(graph, x, plan, link) for x in inputs]
    return [o for o, _ in results], TrafficReport.merge([r for _, r in results])


class _Stop:
    pass


@dataclass
class _Failure:
    node_id: int | None
    error: BaseException


def pipelined_forward(graph: NetworkGraph, inputs: Sequence, plan: PartitionPlan, link: LinkModel | None = None,
                      queue_depth: int = 1) -> tuple[list[Tensor], TrafficReport]:
    """Run a stream of inputs with one worker thread per chip.

    Chip ``k`` hands each input's live activations to chip ``k + 1`` through a
    bounded FIFO, so successive inputs overlap across chips.  Layer functions
    are pure in eval mode, so outputs and the merged report are identical to
    :func:`sequential_forward`.
    """
    plan, link = _defaults(graph, plan, link)
    inputs = list(inputs)
    if not inputs:
        raise ConfigError("pipelined_forward needs at least one input")
    if queue_depth < 1:
        raise ConfigError(f"queue_depth must be >= 1, got {queue_depth}")
    if not plan.is_monotone():
        raise ConfigError("pipelined execution needs every edge to flow to the same or a later chip")
    graph.parameters()  # materialise lazily-created weights before threads start

    n_chips = plan.n_chips
    chip_nodes = [[n for n in graph.nodes if plan.chip_of(n.id) == k] for k in range(n_chips)]
    live_after = []
    for k in range(n_chips):
        later = {s for j in range(k + 1, n_chips) for n in chip_nodes[j] for s in n.inputs}
        live_after.append(later | {graph.output_id})
    queues = [queue.Queue(maxsize=queue_depth) for _ in range(n_chips + 1)]

    def worker(k):
        inq, outq = queues[k], queues[k + 1]
        failed = False
        with engine.no_grad():
            while True:
                msg = inq.get()
                if isinstance(msg, _Stop):
                    outq.put(msg)
                    return
                if failed:
                    continue
                if isinstance(msg, _Failure):
                    outq.put(msg)
                    failed = True
                    continue
                idx, values, shapes = msg
                node_id = None
                try:
                    for node in chip_nodes[k]:
                        node_id = node.id
                        if isinstance(node.kind, Input):
                            out = graph.coerce_input(inputs[idx])
                        else:
                            out = graph.run_node(node, values)
                        values[node.id] = out
                        shapes[node.id] = out.shape
                except BaseException as exc:  # forwarded to the coordinator
                    outq.put(_Failure(node_id, exc))
                    failed = True
                    continue
                values = {nid: v for nid, v in values.items() if nid in live_after[k]}
                outq.put((idx, values, shapes))

    threads = [threading.Thread(target=worker, args=(k,), name=f"chip{k}", daemon=True) for k in range(n_chips)]
    for t in threads:
        t.start()

    def feed():
        for idx in range(len(inputs)):
            queues[0].put((idx, {}, {}))
        queues[0].put(_Stop())

    feeder = threading.Thread(target=feed, name="feeder", daemon=True)
    feeder.start()

    outputs: dict[int, Tensor] = {}
    shapes_by_input: dict[int, dict] = {}
    failure = None
    while True:
        msg = queues[-1].get()
        if isinstance(msg, _Stop):
            break
        if isinstance(msg, _Failure):
            failure = failure or msg
            continue
        idx, values, shapes = msg
        outputs[idx] = values[graph.output_id]
        shapes_by_input[idx] = shapes
    feeder.join()
    for t in threads:
        t.join()
    if failure is not None:
        name = graph.node(failure.node_id).name if failure.node_id is not None else "?"
        raise ExecutionError(f"pipeline worker failed at node {failure.node_id} ({name}): {failure.error}",
                             failure.node_id) from failure.error

    reports = [report_from_shapes(graph, plan, shapes_by_input[i], link) for i in range(len(inputs))]
    return [outputs[i] for i in range(len(inputs))], TrafficReport.merge(reports)


# --------------------------------------------------------------------- sweeps


@dataclass(frozen=True)
class PlanConfig:
    n_chips: int = 2
    strategy: str = CONTIGUOUS
    assignment: Mapping | None = None


@dataclass
class EvalConfig:
    train_set: object
    test_set: object
    training: TrainConfig = TrainConfig()


@dataclass
class SweepRow:
    ratio: int
    accuracy: float | None
    total_bytes: int
    boundary_bytes: int
    latency_s: float


@dataclass
class SweepPoint:
    ratio: int
    graph: NetworkGraph
    plan: PartitionPlan
    traffic: TrafficReport
    losses: list[float] = field(default_factory=list)


@dataclass
class SweepReport:
    rows: list[SweepRow]
    points: list[SweepPoint] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(SWEEP_HEADER)
        for r in self.rows:
            acc = "" if r.accuracy is None else repr(r.accuracy)
            writer.writerow([r.ratio, acc, r.total_bytes, r.boundary_bytes, repr(r.latency_s)])
        return buf.getvalue()

    def ratio2_bump(self) -> bool | None:
        """Whether accuracy at r=2 beats r=1 (recorded, never asserted)."""
        acc = {r.ratio: r.accuracy for r in self.rows}
        if acc.get(1) is None or acc.get(2) is None:
            return None
        return acc[2] > acc[1]


def probe_input(graph: NetworkGraph, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 7])
    return rng.standard_normal(graph.input_shape).astype(graph.dtype)


def sweep_ratios(graph_builder: Callable[[int], NetworkGraph], ratios: Iterable[int], plan_config: PlanConfig = PlanConfig(),
                 eval_config: EvalConfig | None = None, link: LinkModel | None = None, seed: int = 0,
                 on_point: Callable[[SweepPoint], None] | None = None, measure: bool = True) -> SweepReport:
    """One row per ratio, ascending: traffic of the bottlenecked graph and, with
    ``eval_config``, held-out accuracy after training it.

    Traffic comes from executing a seeded probe input, or from shape inference
    alone when ``measure`` is false (the two agree; inference skips the
    arithmetic, which matters for the widest full-size graphs).
    """
    ratios = sorted(set(int(r) for r in ratios))
    if not ratios or ratios[0] < 1:
        raise ConfigError(f"ratios must be a non-empty list of integers >= 1, got {ratios}")
    rows, points = [], []
    for r in ratios:
        base = graph_builder(r)
        plan = partition(base, plan_config.n_chips, plan_config.strategy, plan_config.assignment)
        graph, plan = bottleneck_partition(base, plan, r)
        losses, accuracy = [], None
        if eval_config is not None:
            try:
                losses = train(graph, eval_config.train_set, eval_config.training)
            except Exception as exc:
                if hasattr(exc, "ratio"):
                    exc.ratio = r
                    exc.args = (f"ratio {r}: {exc.args[0]}",)
                raise
            accuracy = evaluate(graph, eval_config.test_set)
        if measure:
            _, report = profile_forward(graph, probe_input(graph, seed), plan, link)
        else:
            report = predict_traffic(graph, plan, _defaults(graph, plan, link)[1])
        rows.append(SweepRow(r, accuracy, report.total_bytes, report.boundary_bytes_total, report.est_latency_s))
        point = SweepPoint(r, graph, plan, report, losses)
        points.append(point)
        if on_point is not None:
            on_point(point)
    return SweepReport(rows, points)
