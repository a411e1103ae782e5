"""Acceptance criteria, one test each.  Every test records a PASS/FAIL line
(printed in the terminal summary) before asserting."""
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from chipneck import engine
from chipneck.config import load_config
from chipneck.data import RECORD_BYTES, encode_records, load_cifar100, synth_dataset
from chipneck.errors import FormatError
from chipneck.profiler import (EvalConfig, PlanConfig, pipelined_forward, profile_forward, probe_input,
                               sequential_forward, sweep_ratios)
from chipneck.traffic import LinkModel, bottleneck_partition, partition
from chipneck.train import TrainConfig
from chipneck.zoo import DEFAULT_RATIOS, build_resnet, mid_channels

import gradcases
from oracles import conv_loops, finite_difference_check, resnet18_stage_shapes

RESULTS: list[str] = []
TINY_CONFIG = Path(__file__).parent.parent / "configs" / "tiny_sweep.yaml"


def record(number, title, ok, detail, elapsed, budget):
    ok = bool(ok) and elapsed < budget
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} | {detail} | {elapsed:.2f}s (< {budget}s)"
    RESULTS.append(line)
    print(line)
    assert ok, line


def boundary_rows(graph, plan, r):
    g, p = bottleneck_partition(graph, plan, r)
    _, report = profile_forward(g, probe_input(g, 0), p, LinkModel())
    return [row.bytes_out for row in report.rows if row.is_boundary], report.boundary_bytes_total


def test_criterion_1_traffic_reduction():
    start = time.perf_counter()
    g = build_resnet("R18", 1, 100)
    plan = partition(g, 2)
    channels = {g.shapes[src][1] for src, _ in plan.transfers(g)}
    _, total_1 = boundary_rows(g, plan, 1)
    _, total_8 = boundary_rows(g, plan, 8)
    reduction = 1 - Fraction(total_8, total_1)
    elapsed = time.perf_counter() - start
    ok = min(channels) >= 8 and reduction == Fraction(7, 8) and reduction >= Fraction(7, 10)
    record(1, "R18 2-chip boundary bytes r=8 vs r=1", ok,
           f"{total_1} -> {total_8} bytes, reduction {float(reduction):.4f} (expect 0.875, >= 0.70)", elapsed, 10)


def test_criterion_2_exact_ratio_law():
    start = time.perf_counter()
    checked, bad = 0, []
    for n_chips in (2, 4):
        g = build_resnet("R18", 1, 100)
        plan = partition(g, n_chips)
        channels = [g.shapes[src][1] for src, _ in sorted(plan.transfers(g), key=lambda t: g.nodes.index(g.node(t[0])))]
        base, _ = boundary_rows(g, plan, 1)
        for r in DEFAULT_RATIOS:
            rows, _ = boundary_rows(g, plan, r)
            for c, b1, br in zip(channels, base, rows, strict=True):
                checked += 1
                if br * c != b1 * mid_channels(c, r):
                    bad.append((n_chips, r, c, b1, br))
    elapsed = time.perf_counter() - start
    record(2, "bytes(r)/bytes(1) == mid_channels(c,r)/c", not bad and checked > 0,
           f"{checked} boundary/ratio pairs checked, {len(bad)} mismatches", elapsed, 10)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_criterion_3_accuracy_trend():
    start = time.perf_counter()
    cfg = load_config(TINY_CONFIG)
    ds, t = cfg.dataset, cfg.training
    kw = dict(classes=ds.classes, h=ds.hw, w=ds.hw, noise=ds.noise)
    eval_config = EvalConfig(synth_dataset(cfg.seed, ds.n_train, split="train", **kw),
                             synth_dataset(cfg.seed, ds.n_test, split="test", **kw),
                             TrainConfig(t.epochs, t.batch_size, t.lr, t.momentum, cfg.seed))
    report = sweep_ratios(lambda r: build_resnet("Tiny", r, cfg.classes, cfg.input_shape, cfg.seed),
                          [1, 4, 32], PlanConfig(cfg.partition.n_chips), eval_config, seed=cfg.seed)
    acc = {row.ratio: row.accuracy for row in report.rows}
    elapsed = time.perf_counter() - start
    gap = acc[1] - acc[32]
    ok = cfg.seed == 42 and acc[1] > acc[32] and gap >= 0.05
    trend = "non-increasing" if acc[1] >= acc[4] >= acc[32] else "not monotone"
    record(3, "Tiny synthetic accuracy falls with r", ok,
           f"acc r1={acc[1]:.3f} r4={acc[4]:.3f} r32={acc[32]:.3f}, gap {100 * gap:.1f} pts ({trend})", elapsed, 600)


def test_criterion_4_gradient_oracle():
    start = time.perf_counter()
    worst, shapes = {}, 20
    for op, case in gradcases.OPS.items():
        worst[op] = 0.0
        for trial in range(shapes):
            fn, arrays = case(np.random.default_rng([4, trial]))
            worst[op] = max(worst[op], finite_difference_check(fn, arrays, seed=trial))
    elapsed = time.perf_counter() - start
    op, err = max(worst.items(), key=lambda kv: kv[1])
    record(4, "finite-difference gradients, double precision", err < 1e-6,
           f"{len(worst)} ops x {shapes} shapes, worst {op} rel err {err:.2e} (< 1e-6)", elapsed, 60)


def test_criterion_5_pipeline_determinism():
    start = time.perf_counter()
    mismatches = 0
    for trial in range(10):
        r = DEFAULT_RATIOS[trial % len(DEFAULT_RATIOS)]
        g = build_resnet("Tiny", r, 10, seed=trial)
        g, plan = bottleneck_partition(g, partition(g, 2), r)
        rng = np.random.default_rng([5, trial])
        xs = [rng.standard_normal(g.input_shape).astype(g.dtype) for _ in range(4)]
        seq_out, seq_rep = sequential_forward(g, xs, plan)
        pipe_out, pipe_rep = pipelined_forward(g, xs, plan)
        same = all(a.data.tobytes() == b.data.tobytes() for a, b in zip(seq_out, pipe_out))
        same = same and seq_rep.to_json() == pipe_rep.to_json()
        mismatches += not same
    elapsed = time.perf_counter() - start
    record(5, "pipelined == sequential, 4 inputs on 2 chips", mismatches == 0,
           f"10 seeded trials, {mismatches} bitwise mismatches", elapsed, 30)


def test_criterion_6_convolution_oracle():
    start = time.perf_counter()
    worst, configs = 0.0, 60
    for trial in range(configs):
        rng = np.random.default_rng([6, trial])
        k = (1, 3)[trial % 2]
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2)) if k == 3 else 0
        n, c_in, c_out = int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
        h, w = int(rng.integers(k, 8)), int(rng.integers(k, 8))
        x = rng.standard_normal((n, c_in, h, w))
        wt = rng.standard_normal((c_out, c_in, k, k))
        b = rng.standard_normal(c_out)
        got = engine.conv2d_forward(engine.Tensor(x), engine.Tensor(wt), engine.Tensor(b), stride, pad).data
        want = conv_loops(x, wt, b, stride, pad)
        # per-element scale: the sum of |terms| bounds every partial sum
        scale = conv_loops(np.abs(x), np.abs(wt), np.abs(b), stride, pad)
        worst = max(worst, float((np.abs(got - want) / scale).max()))
    elapsed = time.perf_counter() - start
    record(6, "conv2d vs direct-convolution loops, double precision", worst < 1e-12,
           f"{configs} configs, k in {{1,3}}, worst elementwise rel err {worst:.2e} (< 1e-12)", elapsed, 60)


def test_criterion_7_cifar_loader(tmp_path):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    round_trips = 0
    for n in (1, 2, 5, 17):
        raw = bytearray(rng.integers(0, 256, n * RECORD_BYTES, dtype=np.uint8).tobytes())
        raw[1::RECORD_BYTES] = rng.integers(0, 100, n, dtype=np.uint8).tobytes()
        path = tmp_path / f"fixture{n}.bin"
        path.write_bytes(bytes(raw))
        round_trips += encode_records(load_cifar100(path)) == bytes(raw)
    rejected = 0
    for size in (1, RECORD_BYTES - 1, RECORD_BYTES + 1, 3 * RECORD_BYTES - 2):
        path = tmp_path / f"bad{size}.bin"
        path.write_bytes(bytes(size))
        try:
            load_cifar100(path)
        except FormatError:
            rejected += 1
    elapsed = time.perf_counter() - start
    record(7, "CIFAR-100 binary round trip and length check", round_trips == 4 and rejected == 4,
           f"{round_trips}/4 fixtures byte-exact, {rejected}/4 wrong lengths rejected", elapsed, 5)


def test_criterion_8_resnet18_shape_table():
    start = time.perf_counter()
    g = build_resnet("R18", 1, 1000, input_shape=(1, 3, 224, 224))
    names = {"stem": "stem.relu2", "pool": "pool", "fc": "fc"}
    expected = resnet18_stage_shapes(224, 1000)
    got = {stage: g.shapes[g.by_name(names.get(stage, f"{stage}.1.relu_out")).id] for stage in expected}
    elapsed = time.perf_counter() - start
    wrong = [s for s in expected if got[s] != expected[s]]
    record(8, "R18 per-stage shapes on (1,3,224,224)", not wrong,
           f"{len(expected) - len(wrong)}/{len(expected)} stages match", elapsed, 5)
