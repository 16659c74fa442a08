"""Versioned experiment configuration with desk and paper profiles."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from collatz_lab.model import ModelConfig
from collatz_lab.numeral import SWEEP_BASES
from collatz_lab.tasks import SAMPLING_KINDS, SamplingSpec
from collatz_lab.train import TrainConfig

SCHEMA_VERSION = 1
EXPERIMENT_KINDS = ("baseline", "base_sweep", "depth_sweep", "distribution_ablation", "carry_exposure",
                    "transplant", "rewind", "erasure_scan", "probe_scan", "transfer", "multi_seed")
TRANSPLANT_CONDITIONS = ("scratch", "encoder_transplant", "decoder_transplant")


class ConfigError(ValueError):
    pass


def _numeric_fields(cls, d: dict) -> dict:
    """Parse string values of float/int fields (YAML 1.1 reads ``1e-9`` as a string)."""
    out = dict(d)
    for name, f in cls.__dataclass_fields__.items():
        v = out.get(name)
        if not isinstance(v, str) or f.type not in ("float", "int", "float | None", "int | None"):
            continue
        try:
            out[name] = float(v) if f.type.startswith("float") else int(v)
        except ValueError as e:
            raise ConfigError(f"{cls.__name__}.{name} must be numeric, got {v!r}") from e
    return out


@dataclass
class ExperimentConfig:
    kind: str = "baseline"
    name: str = "run"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bases: tuple[int, ...] = ()  # base_sweep
    dec_depths: tuple[int, ...] = (1, 2, 4, 6)  # depth_sweep
    width_matched: bool = True  # depth_sweep: add a 1-layer control matched to the deepest decoder
    samplings: tuple[str, ...] = ()  # distribution_ablation / carry_exposure
    seeds: tuple[int, ...] = (0,)
    conditions: tuple[str, ...] = TRANSPLANT_CONDITIONS  # transplant
    threshold: float = 0.7  # steps-to-accuracy threshold reported for interventions
    rewind_step: int = 2000
    source_steps: int | None = None  # budget for the source run of transplant/rewind/transfer; defaults to train.steps
    output_dir: str = "results"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        for b in self.bases:
            if not 2 <= b <= 48:
                raise ConfigError(f"base {b} outside [2, 48]")
        for s in self.samplings:
            if s not in SAMPLING_KINDS:
                raise ConfigError(f"unknown sampling kind {s!r}")
        for c in self.conditions:
            if c not in TRANSPLANT_CONDITIONS:
                raise ConfigError(f"unknown transplant condition {c!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if any(d < 1 for d in self.dec_depths):
            raise ConfigError("decoder depths must be positive")
        if self.kind == "rewind" and self.rewind_step % self.train.ckpt_every:
            raise ConfigError(f"rewind_step {self.rewind_step} is not on the checkpoint cadence {self.train.ckpt_every}")
        if self.train.steps <= 0:
            raise ConfigError("train.steps must be positive")

    def to_dict(self) -> dict:
        return {
            "version": SCHEMA_VERSION, "kind": self.kind, "name": self.name,
            "model": self.model.to_dict(), "train": self.train.to_dict(),
            "bases": list(self.bases), "dec_depths": list(self.dec_depths), "width_matched": self.width_matched,
            "samplings": list(self.samplings), "seeds": list(self.seeds), "conditions": list(self.conditions),
            "threshold": self.threshold, "rewind_step": self.rewind_step, "source_steps": self.source_steps,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        version = d.pop("version", None)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"config version {version!r} is not supported (expected {SCHEMA_VERSION})")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            if "model" in d:
                m = dict(d["model"])
                bad = set(m) - set(ModelConfig.__dataclass_fields__)
                if bad:
                    raise ConfigError(f"unknown model keys {sorted(bad)}")
                d["model"] = ModelConfig(**_numeric_fields(ModelConfig, m))
            if "train" in d:
                t = _numeric_fields(TrainConfig, d["train"])
                if t.get("sampling"):
                    t["sampling"] = _numeric_fields(SamplingSpec, t["sampling"])
                d["train"] = TrainConfig.from_dict(t)
            d = _numeric_fields(cls, d)
            for k in ("bases", "dec_depths", "samplings", "seeds", "conditions"):
                if k in d:
                    d[k] = tuple(d[k])
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    def with_overrides(self, **over) -> "ExperimentConfig":
        return replace(self, **over) if over else self

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        try:
            d = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"config is not valid YAML/JSON: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text())

    def save(self, path: str | Path) -> None:
        p = Path(path)
        p.write_text(json.dumps(self.to_dict(), indent=2) if p.suffix == ".json" else self.dumps())


def desk_profile(kind: str = "baseline", **over) -> ExperimentConfig:
    """Laptop-scale defaults: d_model 64, 2+2 layers, base 10, range [1, 2000], 20k-step budget."""
    model = ModelConfig(base=10, d_model=64, n_heads=4, d_ff=256, n_enc_layers=2, n_dec_layers=2)
    train = TrainConfig(range_lo=1, range_hi=2000, eval_size=500, steps=20_000, batch_size=128, lr=1e-3,
                        warmup=300, eval_every=250, ckpt_every=1000, stop_on_convergence=True,
                        converge_min_step=2000, converge_min_acc=0.5)
    cfg = ExperimentConfig(kind=kind, name=f"desk_{kind}", model=model, train=train)
    return _kind_defaults(cfg, desk=True).with_overrides(**over)


def paper_profile(kind: str = "baseline", **over) -> ExperimentConfig:
    """Full-scale recipe: base 8, d_model 256, 6+6 layers, range [1, 10000], 5000 eval, 500k steps."""
    cfg = ExperimentConfig(kind=kind, name=f"paper_{kind}", model=ModelConfig(),
                           train=TrainConfig(steps=500_000), seeds=(2,))
    return _kind_defaults(cfg, desk=False).with_overrides(**over)


def _kind_defaults(cfg: ExperimentConfig, desk: bool) -> ExperimentConfig:
    kind, t = cfg.kind, cfg.train
    if kind == "base_sweep":
        cfg = replace(cfg, bases=(2, 3, 4, 6, 8, 10) if desk else SWEEP_BASES)
    elif kind == "distribution_ablation":
        cfg = replace(cfg, samplings=("uniform", "log_uniform", "residue_stratified"))
    elif kind == "carry_exposure":
        cfg = replace(cfg, samplings=("uniform", "carry_stratified", "short_carry"))
    elif kind in ("transplant", "rewind", "multi_seed"):
        cfg = replace(cfg, seeds=(0, 1, 2) if desk else (2, 10, 11))
        if not desk:
            cfg = replace(cfg, train=replace(t, steps=200_000), source_steps=500_000)
    elif kind == "probe_scan":
        cfg = replace(cfg, train=replace(t, diagnostics=("probe",), probe_layers=tuple(range(cfg.model.n_enc_layers))))
    elif kind == "erasure_scan":
        cfg = replace(cfg, train=replace(t, diagnostics=("probe", "erasure")))
    elif kind == "transfer" and not desk:
        cfg = replace(cfg, train=replace(t, steps=180_000))
    return cfg


def _coerce(value: str):
    try:
        return yaml.safe_load(value)
    except yaml.YAMLError:
        return value


def _set_path(d: dict, path: str, value) -> None:
    keys = path.split(".")
    cur = d
    for k in keys[:-1]:
        if not isinstance(cur.get(k), dict):
            raise ConfigError(f"unknown config path {path!r}")
        cur = cur[k]
    if keys[-1] not in cur:
        raise ConfigError(f"unknown config path {path!r}")
    cur[keys[-1]] = value


def apply_overrides(cfg: ExperimentConfig, assignments: list[str]) -> ExperimentConfig:
    """Apply ``dotted.key=value`` assignments (values parsed as YAML scalars/lists)."""
    d = cfg.to_dict()
    for a in assignments:
        if "=" not in a:
            raise ConfigError(f"override {a!r} is not of the form key=value")
        k, v = a.split("=", 1)
        _set_path(d, k.strip(), _coerce(v))
    return ExperimentConfig.from_dict(d)
