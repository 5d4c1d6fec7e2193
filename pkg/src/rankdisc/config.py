"""Run configuration: one YAML file, validated as a whole before any stage runs.

Every problem found is collected and reported together in a single
:class:`ConfigError`. Each stage has its own digest covering only the
settings that can change that stage's checkpoint, so ablation runs that
differ in stage 3 can share the stage-1 and stage-2 artifacts.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace

import yaml

from .data import AugmentSpec, SplitSpec
from .model import BackboneConfig
from .pipeline import DEFAULT_STAGES, Ablation, StageConfig, digest_of

STAGES = ("selfsup", "supervised", "joint", "incremental")


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        lines = "\n".join(f"  - {p}" for p in self.problems)
        super().__init__(f"invalid configuration ({len(self.problems)} problem(s)):\n{lines}")


@dataclass(frozen=True)
class SyntheticSource:
    n_per_class: int = 200
    classes: int = 6
    size: int = 16
    jitter: float = 0.7
    test_per_class: int = 100
    seed: int | None = None  # None: use the run seed
    test_seed: int | None = None  # None: run seed + 1000


@dataclass(frozen=True)
class IdxSource:
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    per_class: int | None = None  # keep the first n samples of each class
    test_per_class: int | None = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    source: str = "synthetic"
    synthetic: SyntheticSource = SyntheticSource()
    idx: IdxSource = IdxSource()
    split: SplitSpec = SplitSpec((0, 1, 2), (3, 4, 5))
    backbone: BackboneConfig = BackboneConfig()
    augment: AugmentSpec = AugmentSpec()
    stages: dict = field(default_factory=lambda: dict(DEFAULT_STAGES))
    ablation: Ablation = Ablation()

    def stage(self, name: str) -> StageConfig:
        """Stage settings with the ablation switches applied."""
        cfg = self.stages["joint" if name == "incremental" else name]
        if self.ablation.no_selfsup and name != "selfsup":
            # without the pretext stage nothing is worth freezing
            cfg = replace(cfg, frozen_blocks=())
        return cfg

    def with_ablation(self, **flags) -> "RunConfig":
        merged = dataclasses.asdict(self.ablation)
        merged.update({k: bool(v) for k, v in flags.items() if v})
        return replace(self, ablation=Ablation(**merged))

    def stage_tag(self, name: str) -> str:
        """Suffix distinguishing artifacts of ablated runs in one output directory."""
        if name in ("selfsup", "supervised"):
            return "no_selfsup" if self.ablation.no_selfsup else ""
        return self.ablation.tag()

    def stage_digest(self, name: str) -> str:
        """Digest of everything that can influence the ``name`` checkpoint."""
        if name not in STAGES:
            raise ValueError(f"unknown stage {name!r}")
        data = {"source": self.source,
                "data": dataclasses.asdict(self.synthetic if self.source == "synthetic" else self.idx),
                "split": dataclasses.asdict(self.split)}
        parts = {"seed": self.seed, "data": data, "backbone": self.backbone.to_dict(),
                 "no_selfsup": self.ablation.no_selfsup,
                 "selfsup": dataclasses.asdict(self.stage("selfsup"))}
        if name != "selfsup":
            parts["supervised"] = dataclasses.asdict(self.stage("supervised"))
            parts["augment"] = dataclasses.asdict(self.augment)
        if name in ("joint", "incremental"):
            parts[name] = dataclasses.asdict(self.stage(name))
            parts["ablation"] = dataclasses.asdict(self.ablation)
        return digest_of(parts)

    def to_dict(self) -> dict:
        out = {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "data": {"source": self.source,
                     "synthetic": dataclasses.asdict(self.synthetic),
                     "idx": dataclasses.asdict(self.idx)},
            "split": {"labelled": list(self.split.labelled_classes),
                      "unlabelled": list(self.split.unlabelled_classes)},
            "backbone": self.backbone.to_dict(),
            "augment": {k: v for k, v in dataclasses.asdict(self.augment).items() if k != "rotations"},
            "stages": {k: _stage_to_dict(v) for k, v in self.stages.items()},
            "ablation": dataclasses.asdict(self.ablation),
        }
        return out


def _stage_to_dict(cfg: StageConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["lr_milestones"] = list(cfg.lr_milestones)
    if cfg.frozen_blocks is not None:
        out["frozen_blocks"] = list(cfg.frozen_blocks)
    return out


# --------------------------------------------------------------------------
# Parsing
# --------------------------------------------------------------------------


def _field_types(cls):
    return {f.name: f for f in dataclasses.fields(cls)}


def _coerce(value, default, path, problems):
    """Coerce a YAML scalar/list toward the type of ``default``."""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        problems.append(f"{path}: expected true/false, got {value!r}")
        return default
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        problems.append(f"{path}: expected an integer, got {value!r}")
        return default
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        problems.append(f"{path}: expected a number, got {value!r}")
        return default
    if isinstance(default, str):
        if isinstance(value, str):
            return value
        problems.append(f"{path}: expected a string, got {value!r}")
        return default
    if isinstance(default, tuple) or default is None:
        if value is None:
            return None
        if isinstance(value, list) and all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                           for v in value):
            return tuple(value)
        if default is None and isinstance(value, (int, float)) and not isinstance(value, bool):
            return value
        problems.append(f"{path}: expected a list of numbers, got {value!r}")
        return default
    return value


def _section(raw, cls, base, path, problems, skip=()):
    """Overlay the mapping ``raw`` onto dataclass instance ``base`` field by field."""
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        problems.append(f"{path}: expected a mapping, got {type(raw).__name__}")
        return {}
    fields = _field_types(cls)
    values = {}
    for key, value in raw.items():
        if key not in fields or key in skip:
            problems.append(f"{path}.{key}: unknown key")
            continue
        values[key] = _coerce(value, getattr(base, key), f"{path}.{key}", problems)
    return values


def _build(cls, base, values, path, problems):
    try:
        return replace(base, **values)
    except (TypeError, ValueError) as exc:
        problems.append(f"{path}: {exc}")
        return base


def parse_config(raw) -> RunConfig:
    """Build a :class:`RunConfig` from a parsed YAML mapping, or raise ConfigError."""
    problems = []
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError([f"top level: expected a mapping, got {type(raw).__name__}"])
    base = RunConfig()
    known = {"seed", "output_dir", "data", "split", "backbone", "augment", "stages", "ablation"}
    for key in raw:
        if key not in known:
            problems.append(f"{key}: unknown key")

    seed = _coerce(raw.get("seed", base.seed), base.seed, "seed", problems)
    if isinstance(seed, int) and seed < 0:
        problems.append("seed: must be >= 0")
    output_dir = _coerce(raw.get("output_dir", base.output_dir), base.output_dir, "output_dir", problems)

    data = raw.get("data") or {}
    source, synthetic, idx = base.source, base.synthetic, base.idx
    if not isinstance(data, dict):
        problems.append("data: expected a mapping")
        data = {}
    for key in data:
        if key not in ("source", "synthetic", "idx"):
            problems.append(f"data.{key}: unknown key")
    source = data.get("source", source)
    if source not in ("synthetic", "idx"):
        problems.append(f"data.source: must be 'synthetic' or 'idx', got {source!r}")
        source = base.source
    synthetic = _build(SyntheticSource, synthetic,
                       _section(data.get("synthetic"), SyntheticSource, synthetic, "data.synthetic", problems),
                       "data.synthetic", problems)
    idx = _build(IdxSource, idx, _section(data.get("idx"), IdxSource, idx, "data.idx", problems),
                 "data.idx", problems)
    if synthetic.n_per_class < 1 or synthetic.test_per_class < 1:
        problems.append("data.synthetic: n_per_class and test_per_class must be >= 1")
    if source == "synthetic" and not 2 <= synthetic.classes <= 10:
        problems.append("data.synthetic.classes: must be in [2, 10]")
    if source == "idx":
        for name in ("train_images", "train_labels", "test_images", "test_labels"):
            if not getattr(idx, name):
                problems.append(f"data.idx.{name}: required when data.source is 'idx'")

    split = base.split
    raw_split = raw.get("split")
    if raw_split is not None:
        if not isinstance(raw_split, dict) or set(raw_split) - {"labelled", "unlabelled"}:
            problems.append("split: expected a mapping with 'labelled' and 'unlabelled' lists")
        else:
            try:
                split = SplitSpec(tuple(raw_split.get("labelled", split.labelled_classes)),
                                  tuple(raw_split.get("unlabelled", split.unlabelled_classes)))
            except (TypeError, ValueError) as exc:
                problems.append(f"split: {exc}")
    n_classes = synthetic.classes if source == "synthetic" else None
    if n_classes is not None:
        outside = [c for c in split.labelled_classes + split.unlabelled_classes
                   if not 0 <= c < n_classes]
        if outside:
            problems.append(f"split: classes {outside} outside [0, {n_classes})")

    backbone = base.backbone
    bb_values = _section(raw.get("backbone"), BackboneConfig, backbone, "backbone", problems)
    if bb_values:
        merged = {**dataclasses.asdict(backbone), **bb_values}
        try:
            backbone = BackboneConfig(**merged)
        except (TypeError, ValueError) as exc:
            problems.append(f"backbone: {exc}")
    if source == "synthetic":
        want = (1, synthetic.size, synthetic.size)
        if backbone.input_dims != want:
            problems.append(f"backbone.input_dims: {backbone.input_dims} does not match "
                            f"synthetic images {want}")

    augment = _build(AugmentSpec, base.augment,
                     _section(raw.get("augment"), AugmentSpec, base.augment, "augment", problems,
                              skip=("rotations",)),
                     "augment", problems)

    stages = dict(base.stages)
    raw_stages = raw.get("stages") or {}
    if not isinstance(raw_stages, dict):
        problems.append("stages: expected a mapping")
        raw_stages = {}
    for name, section in raw_stages.items():
        if name not in DEFAULT_STAGES:
            problems.append(f"stages.{name}: unknown stage (expected one of {sorted(DEFAULT_STAGES)})")
            continue
        values = _section(section, StageConfig, stages[name], f"stages.{name}", problems)
        stages[name] = _build(StageConfig, stages[name], values, f"stages.{name}", problems)
    for name, cfg in stages.items():
        problems.extend(cfg.problems(f"stages.{name}."))
        if cfg.frozen_blocks is not None:
            bad = [b for b in cfg.frozen_blocks if not 0 <= b < backbone.n_blocks]
            if bad:
                problems.append(f"stages.{name}.frozen_blocks: {bad} outside [0, {backbone.n_blocks})")
    if not 1 <= stages["joint"].k <= backbone.feature_dim:
        problems.append(f"stages.joint.k: must be in [1, {backbone.feature_dim}] (feature dim)")

    ablation = _build(Ablation, base.ablation,
                      _section(raw.get("ablation"), Ablation, base.ablation, "ablation", problems),
                      "ablation", problems)

    if problems:
        raise ConfigError(problems)
    return RunConfig(seed=seed, output_dir=output_dir, source=source, synthetic=synthetic, idx=idx,
                     split=split, backbone=backbone, augment=augment, stages=stages,
                     ablation=ablation)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc.strerror}"]) from None
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: not valid YAML ({exc})"]) from None
    return parse_config(raw)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
