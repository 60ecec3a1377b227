"""Flat key=value configuration with section prefixes.

One file (or repeated --set flags) configures every subcommand. Keys without
a prefix set training fields; loss., policy., au., data., fr., eval.,
verify. and target. prefixes reach their sections. Unknown keys are errors,
never warnings.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace

from .attack import STATE_SET_DEFAULT, TransformPolicy
from .au_space import SAMPLING_MODES, AUSpaceConfig
from .errors import ConfigError
from .losses import LossWeights
from .training import TrainConfig, train_config_lines


@dataclass
class DataSpec:
    dir: str = "data"
    identities: int = 20
    per_identity: int = 100
    confidence_min: float = 0.95


@dataclass
class FRSpec:
    dir: str = "fr"
    models: int = 4
    steps: int = 400
    batch_size: int = 32
    lr: float = 1e-3
    embed_dim: int = 64
    width: int = 10


@dataclass
class EditorSpec:
    dir: str = "editors"


@dataclass
class EvalSpec:
    out: str = "eval"
    checkpoint: str = ""
    n_adv: int = 64
    far_target: float = 0.01


@dataclass
class VerifySpec:
    out: str = "verify"
    checkpoint: str = ""
    samples: int = 500
    pairs: int = 500
    axiom_images: int = 20
    semantic_pairs: int = 200
    delta: float = 1.0


@dataclass
class TargetSpec:
    identity: int = 0
    provenance: str = "generated"
    states: tuple = STATE_SET_DEFAULT
    per_state: int = 1
    image: str = ""
    dir: str = "state_set"


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSpec = field(default_factory=DataSpec)
    fr: FRSpec = field(default_factory=FRSpec)
    editors: EditorSpec = field(default_factory=EditorSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)
    verify: VerifySpec = field(default_factory=VerifySpec)
    target: TargetSpec = field(default_factory=TargetSpec)

    @property
    def seed(self) -> int:
        return self.train.seed


def _cast_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _cast_states(raw: str) -> tuple:
    states = tuple(s.strip() for s in raw.split(",") if s.strip())
    if not states:
        raise ValueError("empty state list")
    return states


_SIMPLE_SECTIONS = {
    "data": DataSpec,
    "fr": FRSpec,
    "editors": EditorSpec,
    "eval": EvalSpec,
    "verify": VerifySpec,
    "target": TargetSpec,
}

_TRAIN_SCALARS = {
    "mode": str, "steps": int, "batch_size": int, "lr": float,
    "image_size": int, "g_width": int, "d_width": int, "res_blocks": int,
    "editor_steps": int, "editor_width": int, "editor_lr": float, "seed": int,
    "holdout_fraction": float, "checkpoint_interval": int,
    "sample_interval": int, "literal_ssim_sign": _cast_bool,
    "max_exact_states": int, "state_subsample": int,
    "beta1": float, "beta2": float,
}

_LOSS_KEYS = {f.name: float for f in fields(LossWeights)}

_POLICY_KEYS = {
    "p": float, "noise_sigma": float, "scale_min": float, "scale_max": float,
    "weight_resize": float, "weight_noise": float,
}

_AU_KEYS = {
    "dimension": int, "sampling_mode": str, "sampling_noise_sigma": float,
}


def parse_kv_lines(lines, source: str) -> dict:
    """Parse key=value lines; blank lines and # comments are skipped."""
    out = {}
    for n, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}", f"expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"{source}:{n}", "empty key")
        if key in out:
            raise ConfigError(key, f"duplicate assignment at {source}:{n}")
        out[key] = value
    return out


def parse_kv_file(path) -> dict:
    if not os.path.exists(path):
        raise ConfigError(os.fspath(path), "config file not found")
    with open(path, encoding="utf-8") as fh:
        return parse_kv_lines(fh.read().splitlines(), os.fspath(path))


def _apply(obj, key: str, attr: str, caster, raw: str):
    try:
        value = caster(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(key, f"cannot parse {raw!r}: {exc}") from None
    setattr(obj, attr, value)


def build_run_config(kv: dict) -> RunConfig:
    """Materialize a RunConfig from flat keys, rejecting anything unknown."""
    cfg = RunConfig()
    weights = dict(vars(cfg.train.weights))
    policy = cfg.train.policy
    policy_fields = {
        "p": policy.p,
        "noise_sigma": policy.noise_sigma,
        "scale_min": policy.resize_scale_range[0],
        "scale_max": policy.resize_scale_range[1],
        "weight_resize": policy.mode_weights[0],
        "weight_noise": policy.mode_weights[1],
    }
    au_fields = {
        "dimension": cfg.train.au_config.dimension,
        "sampling_mode": cfg.train.au_config.sampling_mode,
        "sampling_noise_sigma": cfg.train.au_config.sampling_noise_sigma,
    }
    betas = list(cfg.train.betas)

    for key, raw in kv.items():
        section, _, name = key.partition(".")
        if not name:  # no prefix: train scalar
            name = key
            if name not in _TRAIN_SCALARS:
                raise ConfigError(key, "unknown key")
            caster = _TRAIN_SCALARS[name]
            if name == "beta1":
                betas[0] = _cast_or_raise(key, caster, raw)
            elif name == "beta2":
                betas[1] = _cast_or_raise(key, caster, raw)
            else:
                _apply(cfg.train, key, name, caster, raw)
        elif section == "loss":
            if name not in _LOSS_KEYS:
                raise ConfigError(key, "unknown key")
            weights[name] = _cast_or_raise(key, float, raw)
        elif section == "policy":
            if name not in _POLICY_KEYS:
                raise ConfigError(key, "unknown key")
            policy_fields[name] = _cast_or_raise(key, _POLICY_KEYS[name], raw)
        elif section == "au":
            if name not in _AU_KEYS:
                raise ConfigError(key, "unknown key")
            au_fields[name] = _cast_or_raise(key, _AU_KEYS[name], raw)
        elif section in _SIMPLE_SECTIONS:
            spec = getattr(cfg, section)
            spec_fields = {f.name: f.type for f in fields(type(spec))}
            if name not in spec_fields:
                raise ConfigError(key, "unknown key")
            current = getattr(spec, name)
            if name == "states":
                _apply(spec, key, name, _cast_states, raw)
            elif isinstance(current, bool):
                _apply(spec, key, name, _cast_bool, raw)
            elif isinstance(current, int):
                _apply(spec, key, name, int, raw)
            elif isinstance(current, float):
                _apply(spec, key, name, float, raw)
            else:
                _apply(spec, key, name, str, raw)
        else:
            raise ConfigError(key, "unknown key")

    if au_fields["sampling_mode"] not in SAMPLING_MODES:
        raise ConfigError("au.sampling_mode", f"must be one of {SAMPLING_MODES}")
    au_config = AUSpaceConfig(
        dimension=au_fields["dimension"],
        sampling_mode=au_fields["sampling_mode"],
        sampling_noise_sigma=au_fields["sampling_noise_sigma"],
    )
    new_policy = TransformPolicy(
        p=policy_fields["p"],
        resize_scale_range=(policy_fields["scale_min"], policy_fields["scale_max"]),
        noise_sigma=policy_fields["noise_sigma"],
        mode_weights=(policy_fields["weight_resize"], policy_fields["weight_noise"]),
    )
    cfg.train = replace(
        cfg.train,
        weights=LossWeights(**weights),
        policy=new_policy,
        au_config=au_config,
        betas=tuple(betas),
    )
    return cfg


def _cast_or_raise(key, caster, raw):
    try:
        return caster(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(key, f"cannot parse {raw!r}: {exc}") from None


def section_lines(cfg: RunConfig) -> list:
    """key=value lines for the non-training sections only."""
    lines = []
    for section in sorted(_SIMPLE_SECTIONS):
        spec = getattr(cfg, section)
        for f in sorted(fields(type(spec)), key=lambda f: f.name):
            value = getattr(spec, f.name)
            if f.name == "states":
                value = ",".join(value)
            lines.append(f"{section}.{f.name}={value}")
    return lines


def snapshot_lines(cfg: RunConfig) -> list:
    """Flat key=value rendering of the full config, sorted, diff-friendly.

    Round-trips through parse_kv_lines + build_run_config, so any snapshot
    can reproduce its run.
    """
    return sorted(train_config_lines(cfg.train) + section_lines(cfg))


def write_snapshot(cfg: RunConfig, path) -> None:
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(snapshot_lines(cfg)) + "\n")
