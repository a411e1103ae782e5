"""Command-line entry point: ``chipneck {build,profile,sweep,report}``.

Exit status is 0 on success, 1 when the config or the input directory is
invalid, and 2 when a run fails (non-finite loss, node failure, I/O error).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import re
import sys
import zipfile
from pathlib import Path

import numpy as np

from chipneck.config import ExperimentConfig, load_config
from chipneck.data import Dataset, load_cifar100, synth_dataset
from chipneck.errors import ConfigError
from chipneck.profiler import EvalConfig, PlanConfig, SweepPoint, sweep_ratios
from chipneck.traffic import LinkModel, TrafficReport, bottleneck_partition, partition
from chipneck.train import TrainConfig
from chipneck.zoo import build_resnet

log = logging.getLogger("chipneck")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2
SHAPE_HEADER = ("node_id", "name", "kind", "inputs", "chip", "n", "c", "h", "w", "params")
LONG_HEADER = ("ratio", "layer_index", "bytes_out")


class MissingInputs(ConfigError):
    def __init__(self, directory, missing):
        super().__init__(f"{directory}: missing input file(s): {', '.join(missing)}")
        self.missing = missing


# ------------------------------------------------------------------ helpers


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    log.info("wrote %s", path)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def save_checkpoint(path: Path, arrays: dict[str, np.ndarray]):
    """``.npz`` with fixed zip timestamps, so equal weights give equal bytes."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())
    log.info("wrote %s", path)


def graph_builder(cfg: ExperimentConfig):
    def build(r: int):
        body_r = r if cfg.model.apply_ratio_to_blocks else 1
        return build_resnet(cfg.model.variant, body_r, cfg.classes, cfg.input_shape, cfg.seed, cfg.precision)
    return build


def link_model(cfg: ExperimentConfig) -> LinkModel:
    return LinkModel.for_precision(cfg.precision, cfg.link.alpha, cfg.link.beta)


def plan_config(cfg: ExperimentConfig) -> PlanConfig:
    return PlanConfig(cfg.partition.n_chips, cfg.partition.strategy, cfg.partition.assignment)


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    ds = cfg.dataset
    if ds.source == "synthetic":
        kw = dict(classes=ds.classes, h=ds.hw, w=ds.hw, noise=ds.noise, precision=cfg.precision)
        return (synth_dataset(cfg.seed, ds.n_train, split="train", **kw),
                synth_dataset(cfg.seed, ds.n_test, split="test", **kw))
    if not ds.path.is_dir():
        raise ConfigError("dataset.path: training needs a directory holding train.bin and test.bin")
    out = []
    for split, n in (("train", ds.n_train), ("test", ds.n_test)):
        full = load_cifar100(ds.path, split, cfg.precision)
        out.append(Dataset(full.images[:n], full.labels[:n], full.classes, split))
    return out[0], out[1]


def traffic_files(out: Path, point: SweepPoint):
    _write(out / f"traffic_r{point.ratio}.csv", point.traffic.to_csv())
    _write(out / f"traffic_r{point.ratio}.json", point.traffic.to_json() + "\n")


# ------------------------------------------------------------------ commands


def cmd_build(cfg: ExperimentConfig, out: Path):
    build = graph_builder(cfg)
    for r in cfg.ratios:
        base = build(r)
        plan = partition(base, cfg.partition.n_chips, cfg.partition.strategy, cfg.partition.assignment)
        graph, plan = bottleneck_partition(base, plan, r)
        doc = graph.to_dict()
        doc["ratio"] = r
        doc["placement"] = {str(k): v for k, v in sorted(plan.assignment.items())}
        _write(out / f"graph_r{r}.json", _json(doc))
        rows = []
        for node in graph.nodes:
            n, c, h, w = graph.shapes[node.id]
            rows.append((node.id, node.name, node.kind_name, " ".join(map(str, node.inputs)),
                         plan.chip_of(node.id), n, c, h, w, node.param_count))
        _write(out / f"shapes_r{r}.csv", _csv(SHAPE_HEADER, rows))
        log.info("r=%d: %d nodes, %d parameters", r, len(graph.nodes), graph.param_count())


def cmd_profile(cfg: ExperimentConfig, out: Path):
    report = sweep_ratios(graph_builder(cfg), cfg.ratios, plan_config(cfg), None, link_model(cfg), cfg.seed,
                          on_point=lambda p: traffic_files(out, p), measure=cfg.profile.measure)
    long_rows = [(p.ratio, row.layer_index, row.bytes_out) for p in report.points for row in p.traffic.rows]
    _write(out / "traffic_long.csv", _csv(LONG_HEADER, long_rows))


def cmd_sweep(cfg: ExperimentConfig, out: Path):
    eval_config = None
    if cfg.is_tiny:
        train_set, test_set = load_datasets(cfg)
        t = cfg.training
        eval_config = EvalConfig(train_set, test_set, TrainConfig(t.epochs, t.batch_size, t.lr, t.momentum, cfg.seed))

    def on_point(point: SweepPoint):
        traffic_files(out, point)
        if eval_config is not None:
            save_checkpoint(out / f"tiny_r{point.ratio}.npz", point.graph.state_dict())

    report = sweep_ratios(graph_builder(cfg), cfg.ratios, plan_config(cfg), eval_config, link_model(cfg), cfg.seed,
                          on_point=on_point, measure=cfg.profile.measure)
    _write(out / "sweep.csv", report.to_csv())
    meta = {
        "variant": cfg.model.variant,
        "seed": cfg.seed,
        "ratios": cfg.ratios,
        "trained": eval_config is not None,
        "ratio2_bump": report.ratio2_bump(),
        "final_loss": {str(p.ratio): p.losses[-1] for p in report.points if p.losses},
    }
    _write(out / "sweep_meta.json", _json(meta))
    for row in report.rows:
        acc = "-" if row.accuracy is None else f"{row.accuracy:.4f}"
        log.info("r=%d accuracy=%s boundary_bytes=%d", row.ratio, acc, row.boundary_bytes)


def _read_csv(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(directory: Path):
    """Consolidate a run directory into ``summary.json`` plus gnuplot ``.dat`` files."""
    if not directory.is_dir():
        raise MissingInputs(directory, ["sweep.csv", "traffic_long.csv"])
    sweep_path, long_path = directory / "sweep.csv", directory / "traffic_long.csv"
    if not sweep_path.exists() and not long_path.exists():
        raise MissingInputs(directory, ["sweep.csv", "traffic_long.csv"])

    per_ratio = {}
    for path in directory.glob("traffic_r*.csv"):
        m = re.fullmatch(r"traffic_r(\d+)\.csv", path.name)
        if m:
            per_ratio[int(m.group(1))] = path
    long_rows = _read_csv(long_path) if long_path.exists() else []
    long_ratios = sorted({int(r["ratio"]) for r in long_rows})
    sweep_rows = _read_csv(sweep_path) if sweep_path.exists() else []
    wanted = sorted(set(long_ratios) | {int(r["ratio"]) for r in sweep_rows})
    missing = [f"traffic_r{r}.csv" for r in wanted if r not in per_ratio]
    if missing:
        raise MissingInputs(directory, missing)

    traffic = {}
    for r in sorted(per_ratio):
        rep = TrafficReport.from_csv(per_ratio[r].read_text())
        rows = rep.rows
        if rows and rows[-1].cum_bytes != sum(x.bytes_out for x in rows):
            raise RuntimeError(f"{per_ratio[r].name}: cum_bytes does not match the sum of bytes_out")
        entry = {"file": per_ratio[r].name, "layers": len(rows), "total_bytes": rep.total_bytes,
                 "boundary_bytes": rep.boundary_bytes_total}
        if r in long_ratios:
            long_total = sum(int(x["bytes_out"]) for x in long_rows if int(x["ratio"]) == r)
            if long_total != rep.total_bytes:
                raise RuntimeError(f"traffic_long.csv disagrees with {per_ratio[r].name} for ratio {r}")
        traffic[str(r)] = entry

    files = sorted(p.name for p in directory.glob("*.csv"))
    summary = {"files": files, "traffic": traffic}
    dat_lines = ["# ratio accuracy total_bytes boundary_bytes latency_s"]
    if sweep_rows:
        summary["sweep"] = [
            {"ratio": int(r["ratio"]), "accuracy": float(r["accuracy"]) if r["accuracy"] else None,
             "total_bytes": int(r["total_bytes"]), "boundary_bytes": int(r["boundary_bytes"]),
             "latency_s": float(r["latency_s"])}
            for r in sweep_rows
        ]
        for r in summary["sweep"]:
            acc = "NaN" if r["accuracy"] is None else repr(r["accuracy"])
            dat_lines.append(f"{r['ratio']} {acc} {r['total_bytes']} {r['boundary_bytes']} {r['latency_s']!r}")
    meta_path = directory / "sweep_meta.json"
    if meta_path.exists():
        summary["ratio2_bump"] = json.loads(meta_path.read_text()).get("ratio2_bump")
    _write(directory / "accuracy_vs_ratio.dat", "\n".join(dat_lines) + "\n")

    # one gnuplot data block per ratio (select with `index i`)
    blocks = []
    for r in sorted(per_ratio):
        rep = TrafficReport.from_csv(per_ratio[r].read_text())
        lines = [f"# ratio {r}", "# layer_index bytes_out is_boundary"]
        lines += [f"{x.layer_index} {x.bytes_out} {int(x.is_boundary)}" for x in rep.rows]
        blocks.append("\n".join(lines))
    _write(directory / "bytes_vs_layer.dat", "\n\n\n".join(blocks) + "\n")
    summary["plot_data"] = ["accuracy_vs_ratio.dat", "bytes_vs_layer.dat"]
    _write(directory / "summary.json", _json(summary))


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chipneck", description="Bottlenecked multi-chip ResNet experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("build", "write graph documents and shape tables"),
                            ("profile", "write per-layer traffic reports"),
                            ("sweep", "train/evaluate each ratio and write sweep.csv")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="master seed (overrides config)")
        p.add_argument("--precision", choices=("single", "double"))
    p = sub.add_parser("report", help="summarise a run directory")
    p.add_argument("dir", nargs="?", type=Path)
    p.add_argument("--out", type=Path, help="run directory (same as the positional argument)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s",
                        stream=sys.stderr)
    try:
        if args.command == "report":
            directory = args.dir or args.out
            if directory is None:
                raise ConfigError("report needs a run directory (positional or --out)")
            cmd_report(directory)
            return EXIT_OK
        cfg = load_config(args.config, seed=args.seed, precision=args.precision)
        out = args.out or cfg.output_dir
        {"build": cmd_build, "profile": cmd_profile, "sweep": cmd_sweep}[args.command](cfg, out)
        return EXIT_OK
    except ConfigError as exc:
        print(f"chipneck {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # any run failure maps to one exit status
        print(f"chipneck {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
