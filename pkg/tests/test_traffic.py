import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chipneck.errors import ConfigError, ShapeError
from chipneck.graph import BottleneckDecode, BottleneckEncode, GraphBuilder, LinearHead, GlobalAvgPool, ResidualAdd
from chipneck.traffic import (CONTIGUOUS, EXPLICIT, LinkModel, TrafficReport, boundary_bytes, bottleneck_partition,
                              insert_boundary_bottlenecks, layer_rows, partition, plan_from_placement,
                              predict_traffic)
from chipneck.zoo import DEFAULT_RATIOS, build_resnet, mid_channels


def chain(n_layers, c=4, hw=4):
    b = GraphBuilder((1, c, hw, hw))
    src = b.input
    for i in range(n_layers):
        src = b.conv(src, c, 1, 1, 0, f"l{i + 1}")
    return b.build()


def random_dag(seed, n_nodes=12, c=4):
    """Convs and residual adds wired to random earlier nodes, funnelled into one sink."""
    rng = np.random.default_rng(seed)
    b = GraphBuilder((1, c, 3, 3), seed=seed)
    ids = [b.input]
    for i in range(n_nodes):
        if len(ids) > 2 and rng.random() < 0.35:
            a, bb = rng.choice(len(ids), size=2, replace=False)
            ids.append(b.add(ResidualAdd(), (ids[a], ids[bb]), f"add{i}"))
        else:
            ids.append(b.conv(ids[int(rng.integers(len(ids)))], c, 1, 1, 0, f"conv{i}"))
    consumed = {s for n in b.nodes for s in n.inputs}
    dangling = [i for i in ids if i not in consumed]
    acc = dangling[0]
    for j, d in enumerate(dangling[1:]):
        acc = b.add(ResidualAdd(), (acc, d), f"join{j}")
    return b.build()


def test_single_chip_has_no_boundaries():
    g = build_resnet("R18", 1, 10)
    plan = partition(g, 1)
    assert plan.boundaries == ()
    report = predict_traffic(g, plan, LinkModel())
    assert report.boundary_bytes_total == 0 and report.est_latency_s == 0.0


def test_chain_of_ten_cuts_after_fifth_layer():
    g = chain(10)
    plan = partition(g, 2)
    assert [(g.node(e.src).name, g.node(e.dst).name) for e in plan.boundaries] == [("l5", "l6")]


@pytest.mark.parametrize("n_layers, n_chips, sizes", [(10, 3, [4, 3, 3]), (7, 7, [1] * 7), (5, 2, [3, 2])])
def test_contiguous_run_lengths(n_layers, n_chips, sizes):
    g = chain(n_layers)
    plan = partition(g, n_chips)
    per_chip = [sum(1 for n in g.nodes[1:] if plan.chip_of(n.id) == c) for c in range(n_chips)]
    assert per_chip == sizes
    assert plan.is_monotone()


@pytest.mark.parametrize("n_chips", [0, 11])
def test_chip_count_range(n_chips):
    with pytest.raises(ConfigError, match="n_chips"):
        partition(chain(10), n_chips)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), n_chips=st.integers(1, 4), data=st.data())
def test_explicit_map_boundaries_match_edge_scan(seed, n_chips, data):
    g = random_dag(seed)
    chips = data.draw(st.lists(st.integers(0, n_chips - 1), min_size=len(g.nodes), max_size=len(g.nodes)))
    chips[:n_chips] = range(n_chips)  # every chip used
    assignment = {n.name: chips[i] for i, n in enumerate(g.nodes)}
    plan = partition(g, n_chips, EXPLICIT, assignment)
    expected = sorted((s, n.id) for n in g.nodes for s in n.inputs if chips[s] != chips[n.id])
    assert sorted((e.src, e.dst) for e in plan.boundaries) == expected


def test_explicit_map_errors():
    g = chain(4)
    full = {n.name: 0 for n in g.nodes}
    with pytest.raises(ConfigError, match="misses"):
        partition(g, 1, EXPLICIT, {"input": 0})
    with pytest.raises(ConfigError, match="unknown node 'nope'"):
        partition(g, 1, EXPLICIT, {**full, "nope": 0})
    with pytest.raises(ConfigError, match="outside"):
        partition(g, 2, EXPLICIT, {**full, "l2": 5})
    with pytest.raises(ConfigError, match="empty"):
        partition(g, 2, EXPLICIT, full)
    with pytest.raises(ConfigError, match="needs an assignment"):
        partition(g, 2, EXPLICIT)
    with pytest.raises(ConfigError, match="strategy"):
        partition(g, 2, "round-robin")


def test_ratio_one_is_a_no_op():
    g = build_resnet("Tiny", 1, 10)
    plan = partition(g, 2)
    g1, plan1 = bottleneck_partition(g, plan, 1)
    assert g1 is g and plan1 is plan


def test_encode_decode_pair_on_64_channel_cut():
    g = chain(2, c=64, hw=8)
    plan = partition(g, 2)
    bg = insert_boundary_bottlenecks(g, plan, 8)
    kinds = [type(n.kind) for n in bg.nodes]
    enc = bg.nodes[kinds.index(BottleneckEncode)]
    dec = bg.nodes[kinds.index(BottleneckDecode)]
    assert (enc.kind.c_in, enc.kind.c_mid) == (64, 8)
    assert (dec.kind.c_mid, dec.kind.c_out) == (8, 64)
    assert bg.placement[enc.id] == 0 and bg.placement[dec.id] == 1
    assert bg.by_name("l2").inputs == (dec.id,)
    assert bg.output_shape == g.output_shape


def test_one_transfer_per_receiving_chip():
    b = GraphBuilder((1, 8, 4, 4))
    a = b.conv(b.input, 8, 1, 1, 0, "a")
    x = b.conv(a, 8, 1, 1, 0, "x")
    y = b.conv(a, 8, 1, 1, 0, "y")
    b.add(ResidualAdd(), (x, y), "sum")
    g = b.build()
    plan = partition(g, 2, EXPLICIT, {"input": 0, "a": 0, "x": 1, "y": 1, "sum": 1})
    bg, bplan = bottleneck_partition(g, plan, 4)
    assert sum(isinstance(n.kind, BottleneckEncode) for n in bg.nodes) == 1
    assert len(bplan.boundaries) == 1
    dec = next(n for n in bg.nodes if isinstance(n.kind, BottleneckDecode))
    assert bg.by_name("x").inputs == (dec.id,) and bg.by_name("y").inputs == (dec.id,)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), r=st.sampled_from(DEFAULT_RATIOS[1:]))
def test_insertion_preserves_output_shape_and_placement(seed, r):
    g = random_dag(seed)
    rows = len(layer_rows(g))
    plan = partition(g, min(3, rows))
    bg, bplan = bottleneck_partition(g, plan, r)
    assert bg.output_shape == g.output_shape
    assert plan_from_placement(bg).assignment == bplan.assignment
    for e in bplan.boundaries:
        assert isinstance(bg.node(e.src).kind, BottleneckEncode)
        assert e.shape[1] == mid_channels(g.output_shape[1], r)
    x = np.random.default_rng(seed).standard_normal(g.input_shape)
    assert np.isfinite(bg(x).data).all()


def test_boundary_bytes_values():
    assert boundary_bytes((1, 64, 8, 8), 4) == 16384
    assert boundary_bytes((1, 8, 8, 8), 4) == 2048
    assert boundary_bytes((1, 8, 8, 8), 8) == 4096
    with pytest.raises(ShapeError):
        boundary_bytes((1, 0, 8, 8), 4)


def test_link_latency():
    link = LinkModel(alpha=1e-6, beta=1e9)
    assert math.isclose(link.transfer_time(2048), 3.048e-6, rel_tol=1e-12)
    assert LinkModel.for_precision("double").word_size == 8


@given(alpha=st.floats(0, 1e-3), beta=st.floats(1e3, 1e12), n=st.integers(0, 10**9), k=st.integers(1, 50))
def test_latency_is_affine_in_bytes(alpha, beta, n, k):
    link = LinkModel(alpha, beta)
    slope = (link.transfer_time(n * k) - link.transfer_time(0)) / k
    assert math.isclose(slope, n / beta, rel_tol=1e-9, abs_tol=1e-15)


@pytest.mark.parametrize("alpha, beta", [(-1, 1e9), (0, 0), (math.nan, 1e9), (0, math.inf)])
def test_link_rejects_bad_parameters(alpha, beta):
    with pytest.raises(ConfigError):
        LinkModel(alpha, beta)


def test_resnet18_two_chip_boundary():
    g = build_resnet("R18", 1, 100)
    plan = partition(g, 2)
    [(src, chip)] = plan.transfers(g)
    assert (g.node(src).name, chip) == ("layer2.1.relu_out", 1)
    assert {g.node(e.dst).name for e in plan.boundaries} == {"layer3.0.conv1", "layer3.0.shortcut.conv"}
    assert predict_traffic(g, plan, LinkModel()).boundary_bytes_total == 128 * 28 * 28 * 4
    bg, bplan = bottleneck_partition(g, plan, 8)
    assert predict_traffic(bg, bplan, LinkModel()).boundary_bytes_total == 16 * 28 * 28 * 4


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.integers(1, 40), n_chips=st.integers(2, 3))
def test_boundary_bytes_follow_ratio_law(seed, c, n_chips):
    b = GraphBuilder((1, 3, 4, 4), seed=seed)
    src = b.input
    for i in range(6):
        src = b.relu(b.conv(src, c, 3, 1, 1, f"c{i}"), f"r{i}")
    g = b.build()
    plan = partition(g, n_chips)
    totals = [predict_traffic(*bottleneck_partition(g, plan, r), LinkModel()).boundary_bytes_total
              for r in DEFAULT_RATIOS]
    per_cut = 16 * 4
    assert totals == [(n_chips - 1) * mid_channels(c, r) * per_cut for r in DEFAULT_RATIOS]
    assert totals == sorted(totals, reverse=True)


def test_report_rows_and_csv_round_trip():
    g = build_resnet("Tiny", 4, 20)
    plan = partition(g, 2)
    bg, bplan = bottleneck_partition(g, plan, 4)
    report = predict_traffic(bg, bplan, LinkModel())
    assert [r.layer_index for r in report.rows] == list(range(1, len(report.rows) + 1))
    assert report.rows[-1].layer_name == "fc"
    assert report.rows[-1].cum_bytes == report.total_bytes == sum(r.bytes_out for r in report.rows)
    again = TrafficReport.from_csv(report.to_csv())
    assert again.to_dict() == report.to_dict()
    assert report.to_csv().splitlines()[0] == "layer_index,layer_name,chip,bytes_out,is_boundary,cum_bytes"


def test_pool_and_head_share_a_row():
    g = build_resnet("Tiny", 1, 20)
    last = layer_rows(g)[-1]
    assert [type(g.node(i).kind) for i in last] == [GlobalAvgPool, LinearHead]


def test_from_csv_rejects_wrong_header():
    with pytest.raises(ValueError, match="header"):
        TrafficReport.from_csv("a,b\n1,2\n")


def test_merge_adds_bytes_and_latency():
    g = chain(4, c=8)
    plan = partition(g, 2)
    one = predict_traffic(g, plan, LinkModel())
    merged = TrafficReport.merge([one] * 4)
    assert merged.total_bytes == 4 * one.total_bytes
    assert merged.boundary_bytes_total == 4 * one.boundary_bytes_total
    assert math.isclose(merged.est_latency_s, 4 * one.est_latency_s)
    with pytest.raises(ValueError):
        TrafficReport.merge([])


def test_contiguous_constant_name():
    assert CONTIGUOUS == "contiguous-equal-layers"
