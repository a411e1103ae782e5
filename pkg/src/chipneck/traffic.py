"""Chip partitioning, boundary bottleneck insertion and traffic accounting."""
from __future__ import annotations

import copy
import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

from chipneck.engine import Precision
from chipneck.errors import ConfigError, ShapeError
from chipneck.graph import (BottleneckDecode, BottleneckEncode, Conv2D, Edge, GlobalAvgPool, Input, LayerNode,
                            LinearHead, NetworkGraph, ResidualAdd)
from chipneck.zoo import mid_channels

CONTIGUOUS = "contiguous-equal-layers"
EXPLICIT = "explicit-map"
TRAFFIC_HEADER = ("layer_index", "layer_name", "chip", "bytes_out", "is_boundary", "cum_bytes")

# node kinds that open a report row; BN / ReLU fold into their producer's row
ROW_KINDS = (Conv2D, BottleneckEncode, BottleneckDecode, ResidualAdd, GlobalAvgPool, LinearHead)


def layer_rows(graph: NetworkGraph) -> list[list[int]]:
    """Group node ids into report rows ("layers"), in execution order."""
    rows: list[list[int]] = []
    row_of: dict[int, int] = {}
    for node in graph.nodes:
        if isinstance(node.kind, Input):
            continue
        src = node.inputs[0] if node.inputs else None
        joins_pool = isinstance(node.kind, LinearHead) and src is not None and isinstance(
            graph.node(src).kind, GlobalAvgPool)
        if (isinstance(node.kind, ROW_KINDS) and not joins_pool) or src not in row_of:
            row_of[node.id] = len(rows)
            rows.append([node.id])
        else:
            row_of[node.id] = row_of[src]
            rows[row_of[src]].append(node.id)
    return rows


def row_name(graph: NetworkGraph, row: list[int]) -> str:
    for nid in reversed(row):
        if isinstance(graph.node(nid).kind, LinearHead):
            return graph.node(nid).name
    return graph.node(row[0]).name


# -------------------------------------------------------------------- plans


@dataclass(frozen=True)
class PartitionPlan:
    assignment: Mapping[int, int]
    boundaries: tuple[Edge, ...]
    n_chips: int

    def chip_of(self, node_id: int) -> int:
        return self.assignment[node_id]

    @classmethod
    def from_assignment(cls, graph: NetworkGraph, assignment: Mapping, n_chips: int | None = None) -> "PartitionPlan":
        resolved = {}
        for key, chip in assignment.items():
            if isinstance(key, str):
                try:
                    key = graph.by_name(key).id
                except KeyError:
                    raise ConfigError(f"assignment names unknown node {key!r}") from None
            resolved[int(key)] = chip
        ids = {n.id for n in graph.nodes}
        missing = sorted(ids - resolved.keys())
        if missing:
            names = [graph.node(i).name for i in missing[:5]]
            raise ConfigError(f"assignment misses {len(missing)} node(s), e.g. {names}")
        extra = sorted(resolved.keys() - ids)
        if extra:
            raise ConfigError(f"assignment names node ids not in the graph: {extra[:5]}")
        used = set(resolved.values())
        if n_chips is None:
            n_chips = max(used) + 1
        for nid, chip in resolved.items():
            if int(chip) != chip or not 0 <= chip < n_chips:
                raise ConfigError(f"node {graph.node(nid).name!r} assigned to chip {chip}, outside 0..{n_chips - 1}")
        if used != set(range(n_chips)):
            raise ConfigError(f"chip ids must be contiguous from 0; chips {sorted(set(range(n_chips)) - used)} are empty")
        boundaries = tuple(e for e in graph.edges if resolved[e.src] != resolved[e.dst])
        return cls(resolved, boundaries, n_chips)

    def transfers(self, graph: NetworkGraph) -> dict[tuple[int, int], list[int]]:
        """Boundary edges grouped by (source node, receiving chip)."""
        groups: dict[tuple[int, int], list[int]] = {}
        for e in self.boundaries:
            groups.setdefault((e.src, self.assignment[e.dst]), []).append(e.dst)
        return groups

    def is_monotone(self) -> bool:
        return all(self.assignment[e.src] <= self.assignment[e.dst] for e in self.boundaries)


def partition(graph: NetworkGraph, n_chips: int, strategy: str = CONTIGUOUS,
              assignment: Mapping | None = None) -> PartitionPlan:
    """Assign every node to a chip.

    ``contiguous-equal-layers`` cuts the layer sequence into ``n_chips`` runs
    whose lengths differ by at most one (earlier runs take the remainder);
    ``explicit-map`` validates a user map keyed by node id or node name.
    """
    rows = layer_rows(graph)
    if n_chips < 1 or n_chips > len(rows):
        raise ConfigError(f"n_chips must lie in 1..{len(rows)} (number of layers), got {n_chips}")
    if strategy == EXPLICIT:
        if assignment is None:
            raise ConfigError("explicit-map partition needs an assignment")
        return PartitionPlan.from_assignment(graph, assignment, n_chips)
    if strategy != CONTIGUOUS:
        raise ConfigError(f"unknown partition strategy {strategy!r}")
    base, extra = divmod(len(rows), n_chips)
    chip_rows, start = [], 0
    for chip in range(n_chips):
        size = base + (1 if chip < extra else 0)
        chip_rows.append(rows[start:start + size])
        start += size
    resolved = {graph.input_id: 0}
    for chip, run in enumerate(chip_rows):
        for row in run:
            for nid in row:
                resolved[nid] = chip
    return PartitionPlan.from_assignment(graph, resolved, n_chips)


# ------------------------------------------------------ boundary bottlenecks


def bottleneck_partition(graph: NetworkGraph, plan: PartitionPlan, r: int) -> tuple[NetworkGraph, PartitionPlan]:
    """Insert encode/decode pairs on every chip transfer; return graph and its plan.

    Each (source node, receiving chip) pair gets one 1x1 encode on the sender
    and one 1x1 decode on the receiver feeding all consumers there, so the
    transfer carries ``mid_channels(c, r)`` channels.  ``r == 1`` is a no-op.
    """
    mid_channels(1, r)
    groups = plan.transfers(graph)
    if r == 1 or not groups:
        return graph, plan

    seed, dtype = graph.nodes[0].seed, graph.dtype
    next_id = max(n.id for n in graph.nodes) + 1
    encoders: dict[int, list[LayerNode]] = {}
    decoders: dict[tuple[int, int], LayerNode] = {}
    first_consumer: dict[int, list[tuple[int, int]]] = {}
    assignment = dict(plan.assignment)
    position = {n.id: i for i, n in enumerate(graph.nodes)}
    for (src, chip), consumers in groups.items():
        c = graph.shapes[src][1]
        mid = mid_channels(c, r)
        tag = f"{graph.node(src).name}->chip{chip}"
        enc = LayerNode(next_id, f"{tag}.encode", BottleneckEncode(c, mid), (src,), seed, dtype)
        dec = LayerNode(next_id + 1, f"{tag}.decode", BottleneckDecode(mid, c), (enc.id,), seed, dtype)
        next_id += 2
        assignment[enc.id] = plan.assignment[src]
        assignment[dec.id] = chip
        encoders.setdefault(src, []).append(enc)
        decoders[(src, chip)] = dec
        first = min(consumers, key=position.__getitem__)
        first_consumer.setdefault(first, []).append((src, chip))

    nodes = []
    for node in graph.nodes:
        for key in first_consumer.get(node.id, ()):
            nodes.append(decoders[key])
        chip = plan.assignment[node.id]
        remapped = tuple(decoders[(s, chip)].id if (s, chip) in decoders else s for s in node.inputs)
        if remapped != node.inputs:
            node = copy.copy(node)
            node.inputs = remapped
        nodes.append(node)
        nodes.extend(encoders.get(node.id, ()))

    new_graph = NetworkGraph(nodes, graph.input_shape, placement=assignment)
    return new_graph, PartitionPlan.from_assignment(new_graph, assignment, plan.n_chips)


def insert_boundary_bottlenecks(graph: NetworkGraph, plan: PartitionPlan, r: int) -> NetworkGraph:
    """Bottlenecked copy of ``graph``; its chip map is kept in ``.placement``."""
    return bottleneck_partition(graph, plan, r)[0]


def plan_from_placement(graph: NetworkGraph) -> PartitionPlan:
    if graph.placement is None:
        raise ConfigError("graph carries no chip placement")
    return PartitionPlan.from_assignment(graph, graph.placement)


# ------------------------------------------------------------------- traffic


@dataclass(frozen=True)
class LinkModel:
    """Alpha-beta link: each transfer costs ``alpha + bytes / beta`` seconds."""

    alpha: float = 1e-6
    beta: float = 1e9
    word_size: int = 4

    def __post_init__(self):
        if not (self.alpha >= 0 and math.isfinite(self.alpha)):
            raise ConfigError(f"link alpha must be a finite value >= 0, got {self.alpha}")
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ConfigError(f"link beta must be a finite value > 0, got {self.beta}")
        if self.word_size not in (4, 8):
            raise ConfigError(f"word_size must be 4 or 8, got {self.word_size}")

    @classmethod
    def for_precision(cls, precision, alpha: float = 1e-6, beta: float = 1e9) -> "LinkModel":
        return cls(alpha, beta, Precision(precision).word_size)

    def transfer_time(self, nbytes: int) -> float:
        return self.alpha + nbytes / self.beta


def boundary_bytes(shape, word_size: int) -> int:
    if any(int(d) < 1 for d in shape):
        raise ShapeError(f"invalid shape {tuple(shape)}")
    return math.prod(int(d) for d in shape) * int(word_size)


@dataclass
class TrafficRow:
    layer_index: int
    layer_name: str
    chip: int
    bytes_out: int
    is_boundary: bool
    cum_bytes: int


@dataclass
class TrafficReport:
    rows: list[TrafficRow] = field(default_factory=list)
    total_bytes: int = 0
    boundary_bytes_total: int = 0
    est_latency_s: float = 0.0

    @classmethod
    def from_rows(cls, rows: list[tuple[str, int, int, bool]], link: LinkModel) -> "TrafficReport":
        """Build from ``(name, chip, bytes_out, is_boundary)`` tuples; indices start at 1."""
        report = cls()
        cum = 0
        for i, (name, chip, nbytes, is_b) in enumerate(rows, start=1):
            cum += nbytes
            report.rows.append(TrafficRow(i, name, chip, nbytes, is_b, cum))
        report.total_bytes = cum
        report.boundary_bytes_total = sum(r.bytes_out for r in report.rows if r.is_boundary)
        report.est_latency_s = estimate_latency(report, link)
        return report

    @classmethod
    def merge(cls, reports: list["TrafficReport"]) -> "TrafficReport":
        """Aggregate per-input reports of the same graph: bytes and latency add up."""
        if not reports:
            raise ValueError("nothing to merge")
        first = reports[0]
        merged = cls()
        cum = 0
        for i, row in enumerate(first.rows):
            nbytes = sum(rep.rows[i].bytes_out for rep in reports)
            cum += nbytes
            merged.rows.append(TrafficRow(row.layer_index, row.layer_name, row.chip, nbytes, row.is_boundary, cum))
        merged.total_bytes = cum
        merged.boundary_bytes_total = sum(r.bytes_out for r in merged.rows if r.is_boundary)
        latency = 0.0
        for rep in reports:
            latency += rep.est_latency_s
        merged.est_latency_s = latency
        return merged

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRAFFIC_HEADER)
        for r in self.rows:
            writer.writerow([r.layer_index, r.layer_name, r.chip, r.bytes_out, int(r.is_boundary), r.cum_bytes])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "total_bytes": self.total_bytes,
            "boundary_bytes_total": self.boundary_bytes_total,
            "est_latency_s": self.est_latency_s,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_csv(cls, text: str, link: LinkModel | None = None) -> "TrafficReport":
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != TRAFFIC_HEADER:
            raise ValueError(f"traffic CSV header must be {','.join(TRAFFIC_HEADER)}")
        rows = [(r["layer_name"], int(r["chip"]), int(r["bytes_out"]), r["is_boundary"] == "1") for r in reader]
        return cls.from_rows(rows, link or LinkModel())


def estimate_latency(report: TrafficReport, link: LinkModel) -> float:
    """Sequential (non-overlapped) alpha-beta time of all boundary rows."""
    total = 0.0
    for row in report.rows:
        if row.is_boundary:
            total += link.transfer_time(row.bytes_out)
    return total


def report_from_shapes(graph: NetworkGraph, plan: PartitionPlan, shapes: Mapping[int, tuple], link: LinkModel
                       ) -> TrafficReport:
    """Traffic report given each node's output shape (observed or inferred)."""
    consumers = graph.consumers()
    rows = []
    for row in layer_rows(graph):
        chip = plan.chip_of(row[0])
        crossing = any(plan.chip_of(c) != plan.chip_of(nid) for nid in row for c in consumers[nid])
        rows.append((row_name(graph, row), chip, boundary_bytes(shapes[row[-1]], link.word_size), crossing))
    return TrafficReport.from_rows(rows, link)


def predict_traffic(graph: NetworkGraph, plan: PartitionPlan, link: LinkModel, batch: int | None = None
                    ) -> TrafficReport:
    """Traffic report from shape inference alone (no execution)."""
    shape = graph.input_shape if batch is None else (batch, *graph.input_shape[1:])
    return report_from_shapes(graph, plan, graph.infer_shapes(shape), link)
