"""Multi-chip partitioning of ResNets with channel bottlenecks at chip boundaries.

A small numpy autodiff engine, a ResNet zoo built on a layer graph, chip
partitioning with traffic accounting, an instrumented (optionally pipelined)
executor, data loaders and an experiment CLI.
"""
from chipneck.engine import SGD, Parameter, Precision, Tensor, backward, no_grad
from chipneck.errors import ConfigError, ExecutionError, FormatError, ShapeError, TrainingError, UsageError
from chipneck.graph import GraphBuilder, LayerNode, NetworkGraph
from chipneck.profiler import pipelined_forward, profile_forward, sequential_forward, sweep_ratios
from chipneck.traffic import (LinkModel, PartitionPlan, TrafficReport, bottleneck_partition,
                              insert_boundary_bottlenecks, partition, predict_traffic)
from chipneck.zoo import DEFAULT_RATIOS, Variant, build_resnet, mid_channels

__all__ = [
    "SGD", "Parameter", "Precision", "Tensor", "backward", "no_grad",
    "ConfigError", "ExecutionError", "FormatError", "ShapeError", "TrainingError", "UsageError",
    "GraphBuilder", "LayerNode", "NetworkGraph",
    "pipelined_forward", "profile_forward", "sequential_forward", "sweep_ratios",
    "LinkModel", "PartitionPlan", "TrafficReport", "bottleneck_partition", "insert_boundary_bottlenecks",
    "partition", "predict_traffic",
    "DEFAULT_RATIOS", "Variant", "build_resnet", "mid_channels",
]
