"""``key = value`` experiment configuration files.

Lines hold ``dotted.key = value``; ``#`` starts a comment. Unknown keys are
rejected. Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from regpool.errors import ConfigError
from regpool.nn import OptimizerSpec
from regpool.pooling import PoolConfig

POOL_KINDS = ("max", "avg", "regularized")

DEFAULTS: dict[str, str] = {
    "dataset.kind": "idx",
    "dataset.train_images": "",
    "dataset.train_labels": "",
    "dataset.test_images": "",
    "dataset.test_labels": "",
    "dataset.root": "",
    "dataset.extensions": ".pgm,.png",
    "dataset.train_fraction": "0.7",
    "dataset.split_seed": "0",
    "dataset.train_subset": "2000",
    "dataset.test_subset": "1000",
    "dataset.image_size": "60",
    "model.width": "0.125",
    "model.dropout": "0.25",
    "pool.kind": "regularized",
    "pool.n": "5",
    "pool.w": "3",
    "pool.s": "5",
    "pool.padding": "none",
    "optim.kind": "sgd",
    "optim.lr": "0.01",
    "optim.beta1": "0.9",
    "optim.beta2": "0.99",
    "optim.eps": "1e-8",
    "train.epochs": "10",
    "train.batch_size": "100",
    "seeds": "0,1,2,3,4",
    "output": "runs",
    "confusion.epochs": "last",
    "compare.kinds": "max,avg,regularized",
    "sweep.kinds": "regularized,max",
    "sweep.n": "",
    "sweep.w": "",
    "sweep.s": "",
    "pairs": "",
    "dump.channel": "0",
    "dump.samples": "0",
    "dump.split": "test",
    "dump.kinds": "max,avg,regularized",
}

PATH_KEYS = ("dataset.train_images", "dataset.train_labels", "dataset.test_images",
             "dataset.test_labels", "dataset.root", "output")


def parse_lines(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        values[key] = value
    return values


def _int(values, key) -> int:
    try:
        return int(values[key])
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {values[key]!r}") from None


def _float(values, key) -> float:
    try:
        return float(values[key])
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {values[key]!r}") from None


def _list(values, key) -> list[str]:
    return [item.strip() for item in values[key].split(",") if item.strip()]


def _int_list(values, key) -> list[int]:
    try:
        return [int(v) for v in _list(values, key)]
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, got {values[key]!r}") from None


def _optional_count(values, key) -> int | None:
    raw = values[key].strip().lower()
    if raw in ("", "all", "0"):
        return None
    count = _int(values, key)
    if count < 0:
        raise ConfigError(f"{key}: must be non-negative")
    return count


@dataclass
class RunConfig:
    values: dict[str, str]
    pool_kind: str
    pool: PoolConfig
    optimizer: OptimizerSpec
    width: float
    dropout: float
    epochs: int
    batch_size: int
    seeds: list[int]
    output: Path
    image_size: int
    train_subset: int | None
    test_subset: int | None
    base_dir: Path = field(default_factory=Path.cwd)

    def get(self, key: str) -> str:
        return self.values[key]

    def path(self, key: str) -> Path:
        return Path(self.values[key])

    def with_pool(self, kind: str | None = None, **changes) -> "RunConfig":
        """Copy with a different pooling kind and/or PoolConfig fields."""
        values = dict(self.values)
        if kind is not None:
            values["pool.kind"] = kind
        for name, v in changes.items():
            values[f"pool.{name}"] = str(v)
        return build_config(values, self.base_dir)

    def confusion_epochs(self) -> set[int]:
        raw = self.values["confusion.epochs"].strip().lower()
        if raw == "all":
            return set(range(1, self.epochs + 1))
        if raw in ("last", ""):
            return {self.epochs}
        epochs = set()
        for item in _list(self.values, "confusion.epochs"):
            epochs.add(self.epochs if item == "last" else int(item))
        return epochs


def build_config(values: dict[str, str], base_dir: Path | None = None) -> RunConfig:
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
    unknown = sorted(set(values) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}")
    merged = {**DEFAULTS, **values}
    for key in PATH_KEYS:
        if merged[key] and not Path(merged[key]).is_absolute():
            merged[key] = str(base_dir / merged[key])

    kind = merged["pool.kind"]
    if kind not in POOL_KINDS:
        raise ConfigError(f"pool.kind: expected one of {POOL_KINDS}, got {kind!r}")
    try:
        pool = PoolConfig(n=_int(merged, "pool.n"), w=_int(merged, "pool.w"),
                          s=_int(merged, "pool.s"), padding=merged["pool.padding"])
        optimizer = OptimizerSpec(kind=merged["optim.kind"], lr=_float(merged, "optim.lr"),
                                  beta1=_float(merged, "optim.beta1"),
                                  beta2=_float(merged, "optim.beta2"),
                                  eps=_float(merged, "optim.eps"))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    seeds = _int_list(merged, "seeds")
    if not seeds:
        raise ConfigError("seeds: at least one seed is required")
    epochs = _int(merged, "train.epochs")
    if epochs < 1:
        raise ConfigError("train.epochs: must be >= 1")
    batch = _int(merged, "train.batch_size")
    if batch < 1:
        raise ConfigError("train.batch_size: must be >= 1")
    width = _float(merged, "model.width")
    if width <= 0:
        raise ConfigError("model.width: must be positive")
    dropout = _float(merged, "model.dropout")
    if not 0.0 <= dropout < 1.0:
        raise ConfigError("model.dropout: must lie in [0, 1)")
    size = _int(merged, "dataset.image_size")
    if size < 1:
        raise ConfigError("dataset.image_size: must be positive")
    return RunConfig(
        values=merged, pool_kind=kind, pool=pool, optimizer=optimizer, width=width,
        dropout=dropout, epochs=epochs, batch_size=batch, seeds=seeds,
        output=Path(merged["output"]), image_size=size,
        train_subset=_optional_count(merged, "dataset.train_subset"),
        test_subset=_optional_count(merged, "dataset.test_subset"),
        base_dir=base_dir,
    )


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Read a config file (optional) and apply ``key=value`` overrides."""
    values: dict[str, str] = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
        values.update(parse_lines(text, str(path)))
        base = path.resolve().parent
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        values[key] = value
    return build_config(values, base)
