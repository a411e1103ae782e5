"""Layer nodes, the network DAG, shape inference and graph execution."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, ClassVar, Iterable, Union

import numpy as np

from chipneck import engine
from chipneck.engine import Parameter, Precision, RunningStats, Tensor
from chipneck.errors import ConfigError, ExecutionError, ShapeError

Shape = tuple[int, int, int, int]


# ----------------------------------------------------------------- node kinds


@dataclass(frozen=True)
class Input:
    c: int
    h: int
    w: int
    arity: ClassVar[int] = 0

    def out_shape(self, ins, batch: int = 1) -> Shape:
        return (batch, self.c, self.h, self.w)


@dataclass(frozen=True)
class Conv2D:
    c_in: int
    c_out: int
    k: int
    stride: int = 1
    pad: int = 0
    arity: ClassVar[int] = 1

    def __post_init__(self):
        engine.check_conv_config(self.k, self.stride, self.pad)
        if self.c_in < 1 or self.c_out < 1:
            raise ConfigError(f"conv channels must be >= 1, got {self.c_in}->{self.c_out}")

    def out_shape(self, ins):
        (n, c, h, w), = ins
        if c != self.c_in:
            raise ShapeError(f"expects {self.c_in} input channels, got {c}")
        ho, wo = engine.conv_output_hw(h, w, self.k, self.stride, self.pad)
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.k}x{self.k}/s{self.stride}/p{self.pad} conv leaves no output on {h}x{w}")
        return (n, self.c_out, ho, wo)

    def param_shapes(self):
        return {"weight": (self.c_out, self.c_in, self.k, self.k), "bias": (self.c_out,)}

    def make_params(self, name, seed, dtype):
        fan_in = self.c_in * self.k * self.k
        return {
            "weight": engine.init_uniform((self.c_out, self.c_in, self.k, self.k), fan_in, seed, f"{name}.weight", dtype),
            "bias": engine.zeros_param((self.c_out,), f"{name}.bias", dtype),
        }

    def forward(self, node, xs, train):
        return engine.conv2d_forward(xs[0], node.params["weight"], node.params["bias"], self.stride, self.pad)


@dataclass(frozen=True)
class BottleneckEncode:
    """1x1 channel reduction placed on the sending side of a chip boundary."""

    c_in: int
    c_mid: int
    arity: ClassVar[int] = 1

    @property
    def conv(self):
        return Conv2D(self.c_in, self.c_mid, 1)

    def out_shape(self, ins):
        return self.conv.out_shape(ins)

    def param_shapes(self):
        return self.conv.param_shapes()

    def make_params(self, name, seed, dtype):
        return self.conv.make_params(name, seed, dtype)

    def forward(self, node, xs, train):
        return engine.conv2d_forward(xs[0], node.params["weight"], node.params["bias"])


@dataclass(frozen=True)
class BottleneckDecode:
    """1x1 channel restoration placed on the receiving side of a chip boundary."""

    c_mid: int
    c_out: int
    arity: ClassVar[int] = 1

    @property
    def conv(self):
        return Conv2D(self.c_mid, self.c_out, 1)

    def out_shape(self, ins):
        return self.conv.out_shape(ins)

    def param_shapes(self):
        return self.conv.param_shapes()

    def make_params(self, name, seed, dtype):
        return self.conv.make_params(name, seed, dtype)

    def forward(self, node, xs, train):
        return engine.conv2d_forward(xs[0], node.params["weight"], node.params["bias"])


@dataclass(frozen=True)
class BatchNorm:
    c: int
    arity: ClassVar[int] = 1

    def out_shape(self, ins):
        (shape,) = ins
        if shape[1] != self.c:
            raise ShapeError(f"batchnorm over {self.c} channels got {shape[1]}")
        return shape

    def param_shapes(self):
        return {"gamma": (self.c,), "beta": (self.c,)}

    def make_params(self, name, seed, dtype):
        return {
            "gamma": engine.ones_param((self.c,), f"{name}.gamma", dtype),
            "beta": engine.zeros_param((self.c,), f"{name}.beta", dtype),
        }

    def forward(self, node, xs, train):
        return engine.batchnorm_forward(xs[0], node.params["gamma"], node.params["beta"], node.stats, train)


@dataclass(frozen=True)
class ReLU:
    arity: ClassVar[int] = 1

    def out_shape(self, ins):
        return ins[0]

    def forward(self, node, xs, train):
        return engine.relu_forward(xs[0])


@dataclass(frozen=True)
class ResidualAdd:
    arity: ClassVar[int] = 2

    def out_shape(self, ins):
        a, b = ins
        if a != b:
            raise ShapeError(f"residual add of mismatched shapes {a} and {b}")
        return a

    def forward(self, node, xs, train):
        return engine.residual_add(xs[0], xs[1])


@dataclass(frozen=True)
class GlobalAvgPool:
    arity: ClassVar[int] = 1

    def out_shape(self, ins):
        n, c, _, _ = ins[0]
        return (n, c, 1, 1)

    def forward(self, node, xs, train):
        return engine.global_avg_pool(xs[0])


@dataclass(frozen=True)
class LinearHead:
    c_in: int
    classes: int
    arity: ClassVar[int] = 1

    def out_shape(self, ins):
        n, c, h, w = ins[0]
        if (c, h, w) != (self.c_in, 1, 1):
            raise ShapeError(f"linear head expects ({self.c_in}, 1, 1) features, got {(c, h, w)}")
        return (n, self.classes, 1, 1)

    def param_shapes(self):
        return {"weight": (self.c_in, self.classes), "bias": (self.classes,)}

    def make_params(self, name, seed, dtype):
        return {
            "weight": engine.init_uniform((self.c_in, self.classes), self.c_in, seed, f"{name}.weight", dtype),
            "bias": engine.zeros_param((self.classes,), f"{name}.bias", dtype),
        }

    def forward(self, node, xs, train):
        return engine.linear_forward(xs[0], node.params["weight"], node.params["bias"])


Kind = Union[Input, Conv2D, BottleneckEncode, BottleneckDecode, BatchNorm, ReLU, ResidualAdd, GlobalAvgPool, LinearHead]
KINDS = {k.__name__: k for k in (Input, Conv2D, BottleneckEncode, BottleneckDecode, BatchNorm, ReLU,
                                 ResidualAdd, GlobalAvgPool, LinearHead)}


# ---------------------------------------------------------------- graph types


class LayerNode:
    """One layer of a graph.

    Parameters are created on first access, so very wide graphs can be built,
    shape-checked and counted without allocating their weights.
    """

    def __init__(self, id: int, name: str, kind, inputs=(), seed: int = 0, dtype=np.float32):
        self.id = id
        self.name = name
        self.kind = kind
        self.inputs = tuple(inputs)
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Parameter] | None = None
        self.stats = RunningStats(kind.c, dtype) if isinstance(kind, BatchNorm) else None

    @property
    def params(self) -> dict[str, Parameter]:
        if self._params is None:
            make = getattr(self.kind, "make_params", None)
            self._params = make(self.name, self.seed, self.dtype) if make else {}
        return self._params

    @params.setter
    def params(self, value: dict[str, Parameter]):
        self._params = dict(value)

    @property
    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self._params is not None:
            return {k: p.shape for k, p in self._params.items()}
        shapes = getattr(self.kind, "param_shapes", None)
        return shapes() if shapes else {}

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes.values())

    def forward(self, xs: list[Tensor], train: bool = False) -> Tensor:
        return self.kind.forward(self, xs, train)

    @property
    def kind_name(self) -> str:
        return type(self.kind).__name__

    def __repr__(self):
        return f"LayerNode({self.id}, {self.name!r}, {self.kind!r}, inputs={self.inputs})"


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    shape: Shape


class NetworkGraph:
    """Topologically ordered layer DAG with shape-annotated edges.

    The batch dimension of ``input_shape`` only sets the shapes recorded on
    edges; execution accepts any batch size with matching (c, h, w).
    """

    def __init__(self, nodes: Iterable[LayerNode], input_shape: Shape, placement: dict[int, int] | None = None):
        self.nodes = list(nodes)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.placement = dict(placement) if placement is not None else None
        self._by_id = {}
        for node in self.nodes:
            if node.id in self._by_id:
                raise ConfigError(f"duplicate node id {node.id}")
            self._by_id[node.id] = node
        self._check_structure()
        self.shapes = self.infer_shapes(self.input_shape)
        self.edges = [Edge(src, node.id, self.shapes[src]) for node in self.nodes for src in node.inputs]

    def _check_structure(self):
        seen = set()
        sources = [n for n in self.nodes if isinstance(n.kind, Input)]
        if len(sources) != 1:
            raise ConfigError(f"graph needs exactly one Input node, found {len(sources)}")
        for node in self.nodes:
            if len(node.inputs) != node.kind.arity:
                raise ConfigError(f"{node.name}: {node.kind_name} takes {node.kind.arity} inputs, got {len(node.inputs)}")
            for src in node.inputs:
                if src not in seen:
                    raise ConfigError(f"{node.name}: input {src} is not an earlier node (cycle or bad order)")
            seen.add(node.id)
        consumed = {src for n in self.nodes for src in n.inputs}
        sinks = [n.id for n in self.nodes if n.id not in consumed]
        if len(sinks) != 1:
            raise ConfigError(f"graph needs exactly one output node, found {len(sinks)}")
        self.input_id = sources[0].id
        self.output_id = sinks[0]

    def infer_shapes(self, input_shape: Shape) -> dict[int, Shape]:
        shapes: dict[int, Shape] = {}
        for node in self.nodes:
            if isinstance(node.kind, Input):
                expect = node.kind.out_shape((), input_shape[0])
                if tuple(input_shape) != expect:
                    raise ShapeError(f"input shape {tuple(input_shape)} does not match Input node {expect}")
                shapes[node.id] = expect
                continue
            try:
                shapes[node.id] = tuple(node.kind.out_shape([shapes[s] for s in node.inputs]))
            except ShapeError as exc:
                raise ShapeError(f"node {node.id} ({node.name}): {exc}") from None
        return shapes

    # -- lookup ---------------------------------------------------------------

    def node(self, node_id: int) -> LayerNode:
        return self._by_id[node_id]

    def by_name(self, name: str) -> LayerNode:
        for node in self.nodes:
            if node.name == name:
                return node
        raise KeyError(name)

    def consumers(self) -> dict[int, list[int]]:
        out = {n.id: [] for n in self.nodes}
        for node in self.nodes:
            for src in node.inputs:
                out[src].append(node.id)
        return out

    @property
    def output_shape(self) -> Shape:
        return self.shapes[self.output_id]

    @property
    def dtype(self):
        return self.nodes[0].dtype

    def parameters(self) -> list[Parameter]:
        return [p for node in self.nodes for p in node.params.values()]

    def param_count(self) -> int:
        return sum(node.param_count for node in self.nodes)

    # -- execution ------------------------------------------------------------

    def run_node(self, node: LayerNode, values: dict[int, Tensor], train: bool = False) -> Tensor:
        try:
            return node.forward([values[s] for s in node.inputs], train)
        except (ShapeError, ConfigError, FloatingPointError) as exc:
            raise ExecutionError(f"node {node.id} ({node.name}): {exc}", node.id) from exc

    def coerce_input(self, x) -> Tensor:
        data = x.data if isinstance(x, Tensor) else np.asarray(x)
        data = np.asarray(data, dtype=self.dtype)
        if data.ndim != 4 or data.shape[1:] != self.input_shape[1:]:
            raise ExecutionError(
                f"input shape {data.shape} does not match graph input (n, {', '.join(map(str, self.input_shape[1:]))})",
                self.input_id,
            )
        return Tensor(data)

    def forward(self, x, train: bool = False, hook: Callable[[LayerNode, Tensor], None] | None = None) -> Tensor:
        """Run the graph on ``x``; ``hook(node, output)`` sees every node's output."""
        remaining = {nid: len(c) for nid, c in self.consumers().items()}
        values: dict[int, Tensor] = {}
        for node in self.nodes:
            if isinstance(node.kind, Input):
                out = self.coerce_input(x)
            else:
                out = self.run_node(node, values, train)
                for src in node.inputs:
                    remaining[src] -= 1
                    if remaining[src] == 0 and src != self.output_id:
                        del values[src]
            values[node.id] = out
            if hook is not None:
                hook(node, out)
        return values[self.output_id]

    __call__ = forward

    # -- precision, checkpoints, serialization ----------------------------------

    def to(self, precision: Precision | str) -> "NetworkGraph":
        dt = Precision(precision).dtype
        for node in self.nodes:
            node.dtype = dt
            for p in (node._params or {}).values():
                p.data = p.data.astype(dt)
                p.grad = np.zeros_like(p.data)
            if node.stats is not None:
                node.stats.mean = node.stats.mean.astype(dt)
                node.stats.var = node.stats.var.astype(dt)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {p.name: p.data.copy() for p in self.parameters()}
        for node in self.nodes:
            if node.stats is not None:
                state[f"{node.name}.running_mean"] = node.stats.mean.copy()
                state[f"{node.name}.running_var"] = node.stats.var.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for p in self.parameters():
            if state[p.name].shape != p.shape:
                raise ShapeError(f"{p.name}: checkpoint shape {state[p.name].shape} != {p.shape}")
            p.data = np.array(state[p.name], dtype=p.dtype)
        for node in self.nodes:
            if node.stats is not None:
                node.stats.mean = np.array(state[f"{node.name}.running_mean"], dtype=node.stats.mean.dtype)
                node.stats.var = np.array(state[f"{node.name}.running_var"], dtype=node.stats.var.dtype)

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "input": self.input_id,
            "output": self.output_id,
            "param_count": self.param_count(),
            "nodes": [
                {
                    "id": n.id,
                    "name": n.name,
                    "kind": n.kind_name,
                    "attrs": dataclasses.asdict(n.kind),
                    "inputs": list(n.inputs),
                    "output_shape": list(self.shapes[n.id]),
                    "params": {k: list(s) for k, s in n.param_shapes.items()},
                }
                for n in self.nodes
            ],
            "edges": [{"src": e.src, "dst": e.dst, "shape": list(e.shape)} for e in self.edges],
        }


class GraphBuilder:
    """Appends nodes in execution order and initialises their parameters."""

    def __init__(self, input_shape: Shape, seed: int = 0, precision: Precision | str = Precision.SINGLE):
        self.input_shape = tuple(input_shape)
        self.seed = seed
        self.dtype = Precision(precision).dtype
        self.nodes: list[LayerNode] = []
        self.shapes: dict[int, Shape] = {}
        n, c, h, w = self.input_shape
        self.input = self.add(Input(c, h, w), (), "input")

    def add(self, kind, inputs, name: str) -> int:
        node_id = len(self.nodes)
        if isinstance(kind, Input):
            shape = kind.out_shape((), self.input_shape[0])
        else:
            try:
                shape = tuple(kind.out_shape([self.shapes[s] for s in inputs]))
            except ShapeError as exc:
                raise ShapeError(f"{name}: {exc}") from None
        self.nodes.append(LayerNode(node_id, name, kind, inputs, self.seed, self.dtype))
        self.shapes[node_id] = shape
        return node_id

    def channels(self, node_id: int) -> int:
        return self.shapes[node_id][1]

    def conv(self, src, c_out, k, stride, pad, name):
        return self.add(Conv2D(self.channels(src), c_out, k, stride, pad), (src,), name)

    def bn(self, src, name):
        return self.add(BatchNorm(self.channels(src)), (src,), name)

    def relu(self, src, name):
        return self.add(ReLU(), (src,), name)

    def build(self) -> NetworkGraph:
        return NetworkGraph(self.nodes, self.input_shape)
