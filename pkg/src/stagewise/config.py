"""Flat ``key = value`` experiment files.

Blank lines and ``#`` comments are ignored.  Unknown keys are errors, so a
misspelt hyperparameter never silently falls back to its default.

Data comes either from three files (``train``, ``val``, ``test``) or from a
synthetic generator spec (``dataset = synthetic:classes=3,size=16,seed=7``)
cut into ``splits = 2400,300,300``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .data import Dataset, DatasetError, load_dataset, parse_synthetic_spec, synthetic_splits
from .graph import MODELS_DIR
from .search import SearchConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    model: str = "resnet20"
    dataset: str = ""
    splits: tuple[int, ...] = (2400, 300, 300)
    train: str = ""
    val: str = ""
    test: str = ""
    G: int = 8
    s: int = 3
    omega: float = -0.06
    alpha: tuple[float, ...] = ()
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: tuple[float, ...] = (0.5, 0.75)
    warmup_iters: int = 100
    augment: bool = False
    dtype: str = "float32"
    budget: int = 10_000
    inner_epochs: int = 6
    trajectories: int = 8
    ppo_epochs: int = 4
    clip: float = 0.1
    minibatch: int = 4
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    controller_lr: float = 1e-3
    top_k: int = 10
    grid_step: float = 0.05
    seed: int = 0
    out: str = "run"

    def train_config(self, epochs: int | None = None) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs if epochs is None else epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            alpha=self.alpha or None,
            milestones=self.milestones,
            warmup_iters=self.warmup_iters,
            seed=self.seed,
            augment=self.augment,
            dtype=self.dtype,
        )

    def search_config(self) -> SearchConfig:
        return SearchConfig(
            G=self.G, s=self.s, omega=self.omega, budget=self.budget,
            inner_epochs=self.inner_epochs, trajectories=self.trajectories,
            ppo_epochs=self.ppo_epochs, clip=self.clip, minibatch=self.minibatch,
            value_coef=self.value_coef, entropy_coef=self.entropy_coef,
            lr=self.controller_lr, top_k=self.top_k, seed=self.seed, grid_step=self.grid_step,
        )

    def validate(self, base_dir: Path | None = None) -> None:
        """Range checks plus existence of every referenced file."""
        if not 1 <= self.s <= self.G:
            raise ConfigError(f"need 1 <= s <= G, got s={self.s}, G={self.G}")
        if self.omega > 0:
            raise ConfigError("omega must be <= 0")
        if self.alpha and len(self.alpha) != self.s:
            raise ConfigError(f"alpha has {len(self.alpha)} entries for s={self.s}")
        if self.epochs < 0 or self.inner_epochs < 1 or self.top_k < 0:
            raise ConfigError("epochs must be >= 0, inner_epochs >= 1, top_k >= 0")
        if self.budget < self.trajectories:
            raise ConfigError("budget must be at least trajectories")
        if not 0 < self.grid_step <= 1:
            raise ConfigError("grid_step must lie in (0, 1]")
        files = [self.train, self.val, self.test]
        if self.dataset and any(files):
            raise ConfigError("give either dataset or train/val/test, not both")
        if not self.dataset and not all(files):
            raise ConfigError("need dataset, or all of train, val and test")
        if self.dataset:
            if not self.dataset.startswith("synthetic"):
                raise ConfigError("dataset must be a synthetic:... spec; use train/val/test for files")
            if len(self.splits) != 3 or min(self.splits) < 1:
                raise ConfigError("splits needs three positive sizes")
            try:
                opts = parse_synthetic_spec(self.dataset)
            except DatasetError as exc:
                raise ConfigError(str(exc)) from None
            if "n" in opts or "split" in opts:
                raise ConfigError("synthetic size comes from splits; drop n= and split= from the dataset string")
        for f in files:
            if f and not self._resolve(f, base_dir).exists():
                raise ConfigError(f"data file not found: {f}")
        if not self._resolve(self.model, base_dir).exists() and not (MODELS_DIR / f"{self.model}.txt").exists():
            raise ConfigError(f"model not found: {self.model}")

    @staticmethod
    def _resolve(p: str, base_dir: Path | None) -> Path:
        path = Path(p)
        return path if path.is_absolute() or base_dir is None else base_dir / path

    def model_path(self, base_dir: Path | None = None) -> str:
        p = self._resolve(self.model, base_dir)
        return str(p) if p.exists() else self.model

    def datasets(self, base_dir: Path | None = None) -> tuple[Dataset, Dataset, Dataset]:
        if self.dataset:
            opts = parse_synthetic_spec(self.dataset)
            return synthetic_splits(
                opts.get("classes", 3), tuple(self.splits), opts.get("size", 16), opts.get("seed", 7)
            )
        return tuple(
            load_dataset(self._resolve(f, base_dir), split)
            for f, split in ((self.train, "train"), (self.val, "val"), (self.test, "test"))
        )

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _convert(key: str, raw: str):
    kind = _TYPES[key]
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        return _bool(raw)
    if kind == "tuple[float, ...]":
        return _floats(raw)
    if kind == "tuple[int, ...]":
        return _ints(raw)
    return raw


def parse_config(text: str) -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected key = value")
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _convert(key, raw)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return ExperimentConfig(**values)


def load_config(path: str | Path, validate: bool = True) -> ExperimentConfig:
    path = Path(path)
    cfg = parse_config(path.read_text())
    if validate:
        cfg.validate(path.parent)
    return cfg


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
