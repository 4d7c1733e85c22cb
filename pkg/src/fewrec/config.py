"""Run configuration: YAML schema, validation, and dataset wiring.

A run config is a YAML document with the sections below; every key has a
default except ``seed``. Validation errors name the offending key path.

    seed: 1234                    # required
    output_dir: runs/example
    ablation: full
    dataset:
      kind: synthetic             # synthetic | image_folder
      mode: features              # features | images   (synthetic only)
      classes: 30
      samples_per_class: 40
      split_ratios: [0.5, 0.25, 0.25]
      sigma_between: 10.0
      sigma_within: 1.0
      signal_rank: null
      rows: 4
      image_size: 32
      root: path/                 # image_folder only
      manifest: splits.tsv        # image_folder only
    model:
      feature_dim: 64
      backbone: bypass            # bypass | conv4 | resnet_small
      channels: 64
      blocks: 4
      mlp_hidden: null
      transformer_standard_block: false
      separate_mutual_weights: false
      normalize_distances: true
      dtype: float32
    train:
      epochs: 120
      episodes_per_epoch: 50
      way: 5
      shot: 5
      queries: 15
      lr: 0.1
      lr_decay_factor: 0.1
      lr_decay_period: 40
      momentum: 0.9
      weight_decay: 0.0005
      eval_period: 20
      val_episodes: 200
    eval:
      way: 5
      shot: 1
      queries: 15
      n_tasks: 1000
    analysis:
      way: 5
      shot: 5
      probes: 10
"""
from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .backbone import BackboneConfig
from .episodes import Dataset, SyntheticConfig, generate_synthetic, load_image_folder
from .model import VARIANTS, ModelConfig

OUTPUT_ROOT_ENV = "FEWREC_OUTPUT_ROOT"


class ConfigError(Exception):
    """Invalid run config; the message starts with the key path."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class _Section:
    """Typed reader over one dict section that rejects unknown keys."""

    def __init__(self, data: dict, path: str):
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(path or "<root>", f"expected a mapping, got {type(data).__name__}")
        self.data = data
        self.path = path
        self.read: set = set()

    def _key(self, name: str) -> str:
        return f"{self.path}.{name}" if self.path else name

    def child(self, name: str) -> "_Section":
        self.read.add(name)
        return _Section(self.data.get(name), self._key(name))

    def get(self, name: str, kind, default=..., choices=None, optional=False):
        """Read one key. ``optional=True`` lets an explicit null stand for None;
        otherwise a missing or null key falls back to the default, and a
        missing default marks the key as required."""
        self.read.add(name)
        value = self.data.get(name)
        if value is None:
            if optional and name in self.data:
                return None
            if default is ...:
                raise ConfigError(self._key(name), "required key is missing")
            return default
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        wrong_type = not isinstance(value, kind)
        bool_as_number = isinstance(value, bool) and kind is not bool
        if wrong_type or bool_as_number:
            raise ConfigError(self._key(name),
                              f"expected {kind.__name__}, got {value!r}")
        if choices is not None and value not in choices:
            raise ConfigError(self._key(name),
                              f"must be one of {sorted(choices)}, got {value!r}")
        return value

    def finish(self) -> None:
        unknown = set(self.data) - self.read
        if unknown:
            key = sorted(unknown)[0]
            raise ConfigError(self._key(key), "unknown key")


@dataclass
class DataConfig:
    kind: str = "synthetic"
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    root: Optional[str] = None
    manifest: Optional[str] = None
    image_size: int = 84


@dataclass
class TrainSection:
    epochs: int = 120
    episodes_per_epoch: int = 50
    way: int = 5
    shot: int = 5
    queries: int = 15
    lr: float = 0.1
    lr_decay_factor: float = 0.1
    lr_decay_period: int = 40
    momentum: float = 0.9
    weight_decay: float = 5e-4
    eval_period: int = 20
    val_episodes: int = 200


@dataclass
class EvalSection:
    way: int = 5
    shot: int = 1
    queries: int = 15
    n_tasks: int = 1000


@dataclass
class AnalysisSection:
    way: int = 5
    shot: int = 5
    probes: int = 10


@dataclass
class RunConfig:
    seed: int
    output_dir: str
    ablation: str
    dataset: DataConfig
    model: ModelConfig
    train: TrainSection
    eval: EvalSection
    analysis: AnalysisSection
    raw: dict = field(default_factory=dict, repr=False)

    def with_overrides(self, **kwargs) -> "RunConfig":
        """Copy of this config with top-level scalar fields replaced."""
        raw = copy.deepcopy(self.raw)
        for key, value in kwargs.items():
            raw[key] = value
        return from_dict(raw)

    def dump_yaml(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=False)


def _parse_dataset(sec: _Section, seed: int) -> DataConfig:
    kind = sec.get("kind", str, "synthetic", choices=("synthetic", "image_folder"))
    out = DataConfig(kind=kind)
    if kind == "synthetic":
        ratios = sec.get("split_ratios", list, [0.5, 0.25, 0.25])
        rank = sec.get("signal_rank", int, None, optional=True)
        out.synthetic = SyntheticConfig(
            classes=sec.get("classes", int, 30),
            samples_per_class=sec.get("samples_per_class", int, 40),
            mode=sec.get("mode", str, "features", choices=("features", "images")),
            rows=sec.get("rows", int, 4),
            feature_dim=sec.get("feature_dim", int, 64),
            image_size=sec.get("image_size", int, 32),
            sigma_between=sec.get("sigma_between", float, 10.0),
            sigma_within=sec.get("sigma_within", float, 1.0),
            signal_rank=rank,
            seed=seed,
            split_ratios=tuple(float(r) for r in ratios),
        )
    else:
        out.root = sec.get("root", str)
        out.manifest = sec.get("manifest", str)
        out.image_size = sec.get("image_size", int, 84)
    sec.finish()
    return out


def _parse_model(sec: _Section, data: DataConfig) -> ModelConfig:
    kind = sec.get("backbone", str, None, optional=True,
                   choices=("bypass", "conv4", "resnet_small"))
    feature_dim = sec.get("feature_dim", int, 64)
    images = data.kind == "image_folder" or data.synthetic.mode == "images"
    if kind is None:
        kind = "conv4" if images else "bypass"
    if images and kind == "bypass":
        raise ConfigError("model.backbone", "bypass backbone needs a features dataset")
    if not images and kind != "bypass":
        raise ConfigError("model.backbone",
                          f"{kind} backbone needs an images dataset")
    image_size = data.image_size if data.kind == "image_folder" \
        else data.synthetic.image_size
    backbone = BackboneConfig(
        kind=kind,
        channels=sec.get("channels", int, feature_dim),
        blocks=sec.get("blocks", int, 4),
        image_size=image_size,
        feature_rows=data.synthetic.rows if data.kind == "synthetic" else 4,
    )
    if kind == "bypass":
        backbone.channels = feature_dim
        if data.synthetic.feature_dim != feature_dim:
            raise ConfigError("model.feature_dim",
                              f"dataset rows are {data.synthetic.feature_dim}-wide "
                              f"but the model expects {feature_dim}")
    elif backbone.channels != feature_dim:
        raise ConfigError("model.channels",
                          "backbone channels must equal model feature_dim")
    mlp_hidden = sec.get("mlp_hidden", int, None, optional=True)
    cfg = ModelConfig(
        feature_dim=feature_dim,
        backbone=backbone,
        mlp_hidden=mlp_hidden,
        transformer_standard_block=sec.get("transformer_standard_block", bool, False),
        separate_mutual_weights=sec.get("separate_mutual_weights", bool, False),
        normalize_distances=sec.get("normalize_distances", bool, True),
        dtype=sec.get("dtype", str, "float32", choices=("float32", "float64")),
    )
    sec.finish()
    return cfg


def _parse_train(sec: _Section) -> TrainSection:
    out = TrainSection(
        epochs=sec.get("epochs", int, 120),
        episodes_per_epoch=sec.get("episodes_per_epoch", int, 50),
        way=sec.get("way", int, 5),
        shot=sec.get("shot", int, 5),
        queries=sec.get("queries", int, 15),
        lr=sec.get("lr", float, 0.1),
        lr_decay_factor=sec.get("lr_decay_factor", float, 0.1),
        lr_decay_period=sec.get("lr_decay_period", int, 40),
        momentum=sec.get("momentum", float, 0.9),
        weight_decay=sec.get("weight_decay", float, 5e-4),
        eval_period=sec.get("eval_period", int, 20),
        val_episodes=sec.get("val_episodes", int, 200),
    )
    sec.finish()
    if out.lr <= 0:
        raise ConfigError("train.lr", "must be > 0")
    if not (0.0 <= out.momentum < 1.0):
        raise ConfigError("train.momentum", "must be in [0, 1)")
    if not (0.0 < out.lr_decay_factor <= 1.0):
        raise ConfigError("train.lr_decay_factor", "must be in (0, 1]")
    if out.epochs < 1 or out.episodes_per_epoch < 1:
        raise ConfigError("train.epochs", "epochs and episodes_per_epoch must be >= 1")
    return out


def from_dict(raw: dict) -> RunConfig:
    root = _Section(copy.deepcopy(raw), "")
    seed = root.get("seed", int)
    dataset = _parse_dataset(root.child("dataset"), seed)
    model = _parse_model(root.child("model"), dataset)
    train = _parse_train(root.child("train"))
    esec = root.child("eval")
    eval_cfg = EvalSection(
        way=esec.get("way", int, 5),
        shot=esec.get("shot", int, 1),
        queries=esec.get("queries", int, 15),
        n_tasks=esec.get("n_tasks", int, 1000),
    )
    esec.finish()
    asec = root.child("analysis")
    analysis = AnalysisSection(
        way=asec.get("way", int, 5),
        shot=asec.get("shot", int, 5),
        probes=asec.get("probes", int, 10),
    )
    asec.finish()
    cfg = RunConfig(
        seed=seed,
        output_dir=root.get("output_dir", str, "runs/run"),
        ablation=root.get("ablation", str, "full", choices=VARIANTS),
        dataset=dataset,
        model=model,
        train=train,
        eval=eval_cfg,
        analysis=analysis,
        raw=copy.deepcopy(raw),
    )
    root.finish()
    return cfg


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply `--set key.path=value` pairs; values parse as YAML scalars."""
    out = copy.deepcopy(raw)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(item, "override must look like key.path=value")
        key_path, value = item.split("=", 1)
        node = out
        parts = key_path.strip().split(".")
        for part in parts[:-1]:
            nxt = node.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise ConfigError(key_path, f"{part!r} is not a section")
            node = nxt
        node[parts[-1]] = yaml.safe_load(value)
    return out


def load_config(path, overrides=None) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(str(path), "config file not found") from None
    except yaml.YAMLError as e:
        raise ConfigError(str(path), f"invalid YAML: {e}") from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(str(path), "top level must be a mapping")
    return from_dict(apply_overrides(raw, overrides))


def resolve_output_dir(cfg: RunConfig) -> Path:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    path = Path(cfg.output_dir)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def build_dataset(cfg: RunConfig) -> Dataset:
    if cfg.dataset.kind == "synthetic":
        return generate_synthetic(cfg.dataset.synthetic)
    return load_image_folder(cfg.dataset.root, cfg.dataset.manifest,
                             image_size=cfg.dataset.image_size)
