"""Training runs, pooling comparisons, sweeps, pair tracking and map dumps.

Every run is a pure function of (config, seed): the seed fixes the initial
weights, the per-epoch shuffle and the dropout masks. Pooling layers have no
parameters, so runs that differ only in pooling kind start from identical
weights and see the data in the same order.
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from regpool import data as D
from regpool.config import RunConfig, build_config
from regpool.errors import ConfigError
from regpool.nn import (
    LayerGraph,
    Optimizer,
    build_reference_graph,
    confusion_matrix,
    predict,
    train_epoch,
)
from regpool.pooling import PoolConfig, pool_forward

log = logging.getLogger(__name__)


@dataclass
class Datasets:
    train: D.LabeledDataset
    test: D.LabeledDataset

    @property
    def class_names(self) -> list[str]:
        return self.train.class_names


def load_datasets(cfg: RunConfig) -> Datasets:
    """Load, subset and resize the train/test sets named in the config."""
    kind = cfg.get("dataset.kind")
    if kind == "idx":
        for key in ("dataset.train_images", "dataset.train_labels",
                    "dataset.test_images", "dataset.test_labels"):
            if not cfg.get(key):
                raise ConfigError(f"{key}: required for dataset.kind = idx")
        train = D.load_idx(cfg.path("dataset.train_images"), cfg.path("dataset.train_labels"))
        test = D.load_idx(cfg.path("dataset.test_images"), cfg.path("dataset.test_labels"))
        k = max(train.num_classes, test.num_classes)
        names = [str(i) for i in range(k)]
        train = D.LabeledDataset(train.images, train.labels, names)
        test = D.LabeledDataset(test.images, test.labels, names)
    elif kind == "image_dir":
        if not cfg.get("dataset.root"):
            raise ConfigError("dataset.root: required for dataset.kind = image_dir")
        exts = [e.strip() for e in cfg.get("dataset.extensions").split(",") if e.strip()]
        full = D.load_image_dir(cfg.path("dataset.root"), exts, size=cfg.image_size)
        try:
            fraction = float(cfg.get("dataset.train_fraction"))
            split_seed = int(cfg.get("dataset.split_seed"))
        except ValueError as exc:
            raise ConfigError(f"dataset split settings: {exc}") from None
        train, test = D.split(full, fraction, split_seed)
    else:
        raise ConfigError(f"dataset.kind: expected 'idx' or 'image_dir', got {kind!r}")
    train = D.resize_dataset(D.head(train, cfg.train_subset), cfg.image_size)
    test = D.resize_dataset(D.head(test, cfg.test_subset), cfg.image_size)
    return Datasets(train, test)


def build_graph(cfg: RunConfig, num_classes: int, pool_kind: str | None = None) -> LayerGraph:
    return build_reference_graph(pool_kind or cfg.pool_kind, cfg.pool, width=cfg.width,
                                 num_classes=num_classes, input_size=cfg.image_size,
                                 dropout=cfg.dropout)


@dataclass
class EpochResult:
    seed: int
    epoch: int
    train_loss: float
    test_acc: float
    confusion: np.ndarray
    predictions: np.ndarray


@dataclass
class TrainReport:
    kind: str
    class_names: list[str]
    test_labels: np.ndarray
    epochs: list[EpochResult] = field(default_factory=list)
    graphs: dict[int, LayerGraph] = field(default_factory=dict)

    def for_seed(self, seed: int) -> list[EpochResult]:
        return [e for e in self.epochs if e.seed == seed]

    def mean_accuracy(self, epoch: int) -> float:
        return float(np.mean([e.test_acc for e in self.epochs if e.epoch == epoch]))

    def mean_curve(self) -> list[tuple[int, float, float]]:
        rows = []
        for epoch in sorted({e.epoch for e in self.epochs}):
            sel = [e for e in self.epochs if e.epoch == epoch]
            rows.append((epoch, float(np.mean([e.train_loss for e in sel])),
                         float(np.mean([e.test_acc for e in sel]))))
        return rows


def run_seed(cfg: RunConfig, ds: Datasets, seed: int, kind: str) -> tuple[list[EpochResult], LayerGraph]:
    graph = build_graph(cfg, len(ds.class_names), kind)
    graph.init_params(seed)
    opt = Optimizer(cfg.optimizer)
    rng = np.random.default_rng([seed, 1])
    results = []
    k = len(ds.class_names)
    for epoch in range(1, cfg.epochs + 1):
        stats = train_epoch(graph, ds.train.images, ds.train.labels, opt, cfg.batch_size, rng)
        preds = predict(graph, ds.test.images, cfg.batch_size)
        cm = confusion_matrix(ds.test.labels, preds, k)
        acc = float(np.trace(cm)) / max(len(preds), 1)
        log.info("%s seed=%d epoch=%d loss=%.4f acc=%.4f", kind, seed, epoch, stats["loss"], acc)
        results.append(EpochResult(seed, epoch, stats["loss"], acc, cm, preds))
    return results, graph


def train(cfg: RunConfig, ds: Datasets, kind: str | None = None) -> TrainReport:
    kind = kind or cfg.pool_kind
    report = TrainReport(kind, ds.class_names, ds.test.labels)
    for seed in cfg.seeds:
        results, graph = run_seed(cfg, ds, seed, kind)
        report.epochs.extend(results)
        report.graphs[seed] = graph
    return report


def _fmt(x: float) -> str:
    return repr(float(x))


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_confusion(path: Path, cm: np.ndarray, class_names: list[str]) -> None:
    write_csv(path, ["true\\pred"] + class_names,
              ([name] + [str(int(v)) for v in row] for name, row in zip(class_names, cm)))


def read_confusion(path: Path) -> np.ndarray:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))[1:]
    return np.array([[int(v) for v in row[1:]] for row in rows], dtype=np.int64)


def write_report(report: TrainReport, cfg: RunConfig, out: Path, checkpoints: bool = True) -> None:
    out.mkdir(parents=True, exist_ok=True)
    conf_epochs = cfg.confusion_epochs()
    for seed in cfg.seeds:
        rows = report.for_seed(seed)
        write_csv(out / f"metrics_seed{seed}.csv", ["seed", "epoch", "train_loss", "test_acc"],
                  ([r.seed, r.epoch, _fmt(r.train_loss), _fmt(r.test_acc)] for r in rows))
        for r in rows:
            if r.epoch in conf_epochs:
                write_confusion(out / f"confusion_seed{seed}_epoch{r.epoch}.csv", r.confusion,
                                report.class_names)
        if checkpoints and seed in report.graphs:
            report.graphs[seed].save(out / f"checkpoint_seed{seed}.bin")
    write_csv(out / "metrics_mean.csv", ["epoch", "train_loss", "test_acc"],
              ([e, _fmt(l), _fmt(a)] for e, l, a in report.mean_curve()))


def cmd_train(cfg: RunConfig, out: Path, ds: Datasets | None = None) -> TrainReport:
    ds = ds or load_datasets(cfg)
    report = train(cfg, ds)
    write_report(report, cfg, out)
    return report


def _kinds(cfg: RunConfig, key: str, kinds=None) -> list[str]:
    kinds = list(kinds) if kinds else [k.strip() for k in cfg.get(key).split(",") if k.strip()]
    if not kinds:
        raise ConfigError(f"{key}: at least one pooling kind is required")
    for k in kinds:
        if k not in ("max", "avg", "regularized"):
            raise ConfigError(f"{key}: unknown pooling kind {k!r}")
    return kinds


def cmd_compare(cfg: RunConfig, out: Path, kinds=None, ds: Datasets | None = None) -> dict[str, TrainReport]:
    """Train every pooling kind under the same seeds; write a long-format profile."""
    kinds = _kinds(cfg, "compare.kinds", kinds)
    ds = ds or load_datasets(cfg)
    reports = {}
    rows = []
    for kind in kinds:
        report = train(cfg, ds, kind)
        write_report(report, cfg.with_pool(kind), out / kind)
        reports[kind] = report
        rows += [[kind, r.seed, r.epoch, _fmt(r.test_acc)] for r in report.epochs]
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "profile.csv", ["kind", "seed", "epoch", "test_acc"], rows)
    return reports


def sweep_grid(cfg: RunConfig) -> list[PoolConfig]:
    dims = {}
    for name in ("n", "w", "s"):
        key = f"sweep.{name}"
        raw = cfg.values.get(key, "")
        if raw.strip() == "":
            dims[name] = [getattr(cfg.pool, name)]
            continue
        try:
            dims[name] = [int(v) for v in raw.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated integers, got {raw!r}") from None
        if not dims[name]:
            raise ConfigError(f"{key}: grid dimension is empty")
    cells = []
    for n, w, s in itertools.product(dims["n"], dims["w"], dims["s"]):
        try:
            cells.append(PoolConfig(n=n, w=w, s=s, padding=cfg.pool.padding))
        except ValueError as exc:
            raise ConfigError(f"sweep cell n={n} w={w} s={s}: {exc}") from None
    return cells


def parse_grid_spec(specs: list[str]) -> dict[str, str]:
    """Turn CLI grid arguments like ``n=3,5`` into ``sweep.*`` overrides."""
    out = {}
    for spec in specs:
        if "=" not in spec:
            raise ConfigError(f"grid spec must look like n=3,5; got {spec!r}")
        name, values = (p.strip() for p in spec.split("=", 1))
        if name not in ("n", "w", "s"):
            raise ConfigError(f"grid dimension must be n, w or s; got {name!r}")
        if not [v for v in values.split(",") if v.strip()]:
            raise ConfigError(f"sweep.{name}: grid dimension is empty")
        out[f"sweep.{name}"] = values
    return out


def cmd_sweep(cfg: RunConfig, out: Path, ds: Datasets | None = None) -> list[tuple[PoolConfig, Path]]:
    cells = sweep_grid(cfg)
    kinds = _kinds(cfg, "sweep.kinds")
    ds = ds or load_datasets(cfg)
    manifest = []
    done = []
    for cell in cells:
        name = f"n{cell.n}_w{cell.w}_s{cell.s}"
        cell_cfg = cfg.with_pool(n=cell.n, w=cell.w, s=cell.s)
        cmd_compare(cell_cfg, out / name, kinds, ds)
        manifest.append([name, cell.n, cell.w, cell.s, f"{name}/profile.csv"])
        done.append((cell, out / name))
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "manifest.csv", ["cell", "n", "w", "s", "profile"], manifest)
    return done


def parse_pairs(items: list[str], class_names: list[str]) -> list[tuple[int, int]]:
    pairs = []
    for item in items:
        for token in item.replace(" ", ",").split(","):
            token = token.strip()
            if not token:
                continue
            if ":" not in token:
                raise ConfigError(f"class pair must look like a:b, got {token!r}")
            a, b = (t.strip() for t in token.split(":", 1))
            for name in (a, b):
                if name not in class_names:
                    raise ConfigError(f"pairs: class {name!r} is not in the dataset")
            if a == b:
                raise ConfigError(f"pairs: {token!r} pairs a class with itself")
            pairs.append((class_names.index(a), class_names.index(b)))
    if not pairs:
        raise ConfigError("pairs: at least one class pair is required")
    return pairs


def pair_errors(labels: np.ndarray, preds: np.ndarray, a: int, b: int) -> int:
    """Test samples of ``a`` predicted as ``b`` plus samples of ``b`` predicted as ``a``."""
    return int(np.sum((labels == a) & (preds == b)) + np.sum((labels == b) & (preds == a)))


def cmd_pairs(cfg: RunConfig, out: Path, pair_args=None, ds: Datasets | None = None):
    """Train and log per-epoch misrecognition counts for the given class pairs.

    Confusion matrices are written for every epoch alongside the pair counts.
    """
    ds = ds or load_datasets(cfg)
    items = list(pair_args) if pair_args else [cfg.get("pairs")]
    pairs = parse_pairs(items, ds.class_names)
    run_cfg = build_config({**cfg.values, "confusion.epochs": "all"}, cfg.base_dir)
    report = train(run_cfg, ds)
    write_report(report, run_cfg, out)
    names = ds.class_names
    rows = []
    for r in report.epochs:
        for a, b in pairs:
            rows.append([r.seed, r.epoch, names[a], names[b],
                         pair_errors(ds.test.labels, r.predictions, a, b)])
    write_csv(out / "pairs.csv", ["seed", "epoch", "class_a", "class_b", "errors"], rows)
    return report, pairs


def minmax(img: np.ndarray) -> np.ndarray:
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def first_block_output(graph: LayerGraph, x: np.ndarray) -> np.ndarray:
    """Activations entering the first pooling layer."""
    for layer in graph.layers:
        if layer.kind == "pool":
            return x
        x = layer.forward(x)
    raise ValueError("graph has no pooling layer")


def cmd_dump_maps(cfg: RunConfig, out: Path, checkpoint, samples=None, ds: Datasets | None = None) -> list[Path]:
    """Write a conv1 channel and its max/avg/regularized pooled maps as PGM files."""
    ds = ds or load_datasets(cfg)
    split_name = cfg.get("dump.split")
    if split_name not in ("train", "test"):
        raise ConfigError(f"dump.split: expected 'train' or 'test', got {split_name!r}")
    source = ds.train if split_name == "train" else ds.test
    if samples is None:
        try:
            samples = [int(v) for v in cfg.get("dump.samples").split(",") if v.strip()]
        except ValueError:
            raise ConfigError("dump.samples: expected comma-separated integers") from None
    kinds = _kinds(cfg, "dump.kinds")
    try:
        channel = int(cfg.get("dump.channel"))
    except ValueError:
        raise ConfigError("dump.channel: expected an integer") from None
    graph = build_graph(cfg, len(ds.class_names))
    graph.load(checkpoint)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for sid in samples:
        if not 0 <= sid < len(source):
            raise ConfigError(f"sample id {sid} out of range for {len(source)} {split_name} samples")
        fmap = first_block_output(graph, source.images[sid:sid + 1])
        if not 0 <= channel < fmap.shape[1]:
            raise ConfigError(f"dump.channel {channel} out of range for {fmap.shape[1]} channels")
        chan = fmap[:, channel:channel + 1]
        maps = {"original": chan}
        for kind in kinds:
            maps[kind], _ = pool_forward(kind, chan, cfg.pool)
        for name, m in maps.items():
            path = out / f"sample{sid}_ch{channel}_{name}.pgm"
            D.write_pgm(path, minmax(m[0, 0]))
            written.append(path)
    return written
