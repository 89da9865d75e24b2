"""Experiment configuration: an INI-like text format parsed into dataclasses.

Format::

    # comment
    seed = 0            # keys before the first section belong to the root
    [train]
    beta = 0.1

Unknown sections or keys, duplicate keys, type mismatches and out-of-range
values raise ``ConfigError`` with the offending line number.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any, get_type_hints

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


def _check(pred, text: str) -> dict:
    return {"check": (pred, text)}


def _positive(name: str) -> dict:
    return _check(lambda v: v > 0, f"{name} > 0")


def _nonneg(name: str) -> dict:
    return _check(lambda v: v >= 0, f"{name} >= 0")


def _choice(name: str, options: tuple[str, ...]) -> dict:
    return _check(lambda v: v in options, f"{name} in {{{', '.join(options)}}}")


@dataclass(frozen=True)
class DataSection:
    d: int = field(default=8, metadata=_positive("d"))
    d_ctx: int = field(default=8, metadata=_positive("d_ctx"))
    n_tokens: int = field(default=4, metadata=_positive("n_tokens"))
    data_scale: float = field(default=0.5, metadata=_positive("data_scale"))
    roughness: float = field(default=0.5, metadata=_nonneg("roughness"))
    users: str = field(default="onehot", metadata=_choice("users", ("onehot", "mixture")))
    n_users: int = field(default=3, metadata=_check(lambda v: v >= 2, "n_users >= 2"))
    concentration: float = field(default=0.5, metadata=_positive("concentration"))
    n_contexts: int = field(default=500, metadata=_positive("n_contexts"))
    pairs_per_user: int = field(default=667, metadata=_positive("pairs_per_user"))
    label_mode: str = field(default="deterministic",
                            metadata=_choice("label_mode", ("deterministic", "stochastic")))
    candidate_steps: int = field(default=30, metadata=_positive("candidate_steps"))
    calibrate: bool = False
    offset_scale: float = field(default=0.5, metadata=_nonneg("offset_scale"))
    # mixture populations only
    n_unseen: int = field(default=4, metadata=_nonneg("n_unseen"))
    train_pairs: int = field(default=1000, metadata=_positive("train_pairs"))
    probe_sets: int = field(default=10, metadata=_positive("probe_sets"))
    test_sets: int = field(default=15, metadata=_positive("test_sets"))


@dataclass(frozen=True)
class ModelSection:
    n_query: int = field(default=4, metadata=_positive("n_query"))
    d_model: int = field(default=16, metadata=_positive("d_model"))
    d_head: int = field(default=16, metadata=_positive("d_head"))
    hidden: int = field(default=64, metadata=_positive("hidden"))
    t_features: int = field(default=8, metadata=_check(lambda v: v > 0 and v % 2 == 0,
                                                       "t_features even and > 0"))


@dataclass(frozen=True)
class ScheduleSection:
    T: int = field(default=64, metadata=_positive("T"))
    kind: str = field(default="cosine", metadata=_choice("kind", ("cosine", "linear-snr")))


@dataclass(frozen=True)
class PretrainSection:
    steps: int = field(default=3000, metadata=_positive("steps"))
    batch: int = field(default=128, metadata=_positive("batch"))
    lr: float = field(default=2e-3, metadata=_positive("lr"))


@dataclass(frozen=True)
class EncoderSection:
    k: int = field(default=16, metadata=_positive("k"))
    hidden: int = field(default=64, metadata=_positive("hidden"))
    n_shots: int = field(default=4, metadata=_positive("n_shots"))
    temperature: float = field(default=0.1, metadata=_positive("temperature"))
    steps: int = field(default=1500, metadata=_positive("steps"))
    lr: float = field(default=2e-3, metadata=_positive("lr"))
    users_per_batch: int = field(default=16, metadata=_check(lambda v: v >= 2,
                                                             "users_per_batch >= 2"))


@dataclass(frozen=True)
class TrainSection:
    beta: float = field(default=0.5, metadata=_positive("beta"))
    lr: float = field(default=1e-2, metadata=_positive("lr"))
    weight_decay: float = field(default=0.0, metadata=_nonneg("weight_decay"))
    batch_pairs: int = field(default=16, metadata=_positive("batch_pairs"))
    epochs: int = field(default=1, metadata=_positive("epochs"))
    max_steps: int = field(default=0, metadata=_check(lambda v: v >= 0,
                                                      "max_steps >= 0 (0 = no limit)"))
    user_dropout_p: float = field(default=0.1, metadata=_check(lambda v: 0 <= v < 1,
                                                               "0 <= user_dropout_p < 1"))
    trainable_set: str = field(default="adapter-only",
                               metadata=_choice("trainable_set", ("adapter-only", "all")))
    objective: str = field(default="ppd",
                           metadata=_choice("objective", ("ppd", "diffusion-dpo", "sft")))


@dataclass(frozen=True)
class EvalSection:
    n_contexts: int = field(default=400, metadata=_positive("n_contexts"))
    context_offset: int = field(default=1_000_000, metadata=_nonneg("context_offset"))
    sample_steps: int = field(default=30, metadata=_positive("sample_steps"))
    n_per_context: int = field(default=1, metadata=_positive("n_per_context"))
    sweep_points: int = field(default=5, metadata=_check(lambda v: v >= 2, "sweep_points >= 2"))
    sweep_contexts: int = field(default=64, metadata=_positive("sweep_contexts"))
    heldout_contexts_per_user: int = field(default=50, metadata=_positive(
        "heldout_contexts_per_user"))
    probe_ks: tuple = field(default=(1, 4, 16), metadata=_check(
        lambda v: len(v) > 0 and all(k >= 1 for k in v), "probe_ks entries >= 1"))
    probe_steps: int = field(default=500, metadata=_positive("probe_steps"))


SECTIONS: dict[str, type] = {
    "data": DataSection,
    "model": ModelSection,
    "schedule": ScheduleSection,
    "pretrain": PretrainSection,
    "encoder": EncoderSection,
    "train": TrainSection,
    "eval": EvalSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    data: DataSection = DataSection()
    model: ModelSection = ModelSection()
    schedule: ScheduleSection = ScheduleSection()
    pretrain: PretrainSection = PretrainSection()
    encoder: EncoderSection = EncoderSection()
    train: TrainSection = TrainSection()
    eval: EvalSection = EvalSection()

    @property
    def k_user(self) -> int:
        """Width of the user embedding the denoiser is conditioned on."""
        return 3 if self.data.users == "onehot" else self.encoder.k

    def get(self, key: str) -> Any:
        if key == "seed":
            return self.seed
        section, name = key.split(".", 1)
        return getattr(getattr(self, section), name)

    def items(self) -> list[tuple[str, Any]]:
        """Every ``(dotted key, value)`` in canonical order."""
        out = [("seed", self.seed)]
        for sec in sorted(SECTIONS):
            for f in fields(SECTIONS[sec]):
                out.append((f"{sec}.{f.name}", getattr(getattr(self, sec), f.name)))
        return out

    def canonical(self, keys=None) -> str:
        """Stable text serialization (also a valid config file)."""
        want = None if keys is None else _expand(keys)
        lines, current = [], None
        for key, value in self.items():
            if want is not None and key not in want:
                continue
            if "." in key:
                sec, name = key.split(".", 1)
                if sec != current:
                    lines.append(f"[{sec}]")
                    current = sec
            else:
                name = key
            lines.append(f"{name} = {_format(value)}")
        return "\n".join(lines) + "\n"

    def digest(self, keys=None) -> str:
        return hashlib.sha256(self.canonical(keys).encode("utf-8")).hexdigest()

    def with_overrides(self, overrides: dict[str, str]) -> "ExperimentConfig":
        cfg = self
        for i, (key, raw) in enumerate(overrides.items(), 1):
            cfg = _assign(cfg, key, raw, f"override #{i}")
        return cfg


def _expand(keys) -> set[str]:
    out = set()
    for k in keys:
        if k in SECTIONS:
            out.update(f"{k}.{f.name}" for f in fields(SECTIONS[k]))
        else:
            out.add(k)
    return out


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(raw: str, typ, where: str, key: str):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is tuple:
            return tuple(int(p) for p in raw.split(",") if p.strip())
        return raw
    except ValueError:
        name = getattr(typ, "__name__", str(typ))
        raise ConfigError(f"{where}: {key} expects {name}, got {raw!r}") from None


def _assign(cfg: ExperimentConfig, key: str, raw: str, where: str) -> ExperimentConfig:
    if key == "seed":
        value = _convert(raw, int, where, key)
        if not 0 <= value < 2**64:
            raise ConfigError(f"{where}: out of range, requires 0 <= seed < 2^64")
        return replace(cfg, seed=value)
    if "." not in key:
        raise ConfigError(f"{where}: unknown key {key!r}")
    sec, name = key.split(".", 1)
    if sec not in SECTIONS:
        raise ConfigError(f"{where}: unknown section [{sec}]")
    cls = SECTIONS[sec]
    hints = get_type_hints(cls)
    spec = {f.name: f for f in fields(cls)}
    if name not in spec:
        raise ConfigError(f"{where}: unknown key {name!r} in [{sec}]")
    value = _convert(raw, hints[name], where, key)
    check = spec[name].metadata.get("check")
    if check is not None and not check[0](value):
        raise ConfigError(f"{where}: {key} = {raw.strip()} out of range, requires {check[1]}")
    return replace(cfg, **{sec: replace(getattr(cfg, sec), **{name: value})})


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    cfg = ExperimentConfig()
    seen: dict[str, int] = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        where = f"{source}:{lineno}"
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if body.startswith("["):
            if not body.endswith("]"):
                raise ConfigError(f"{where}: malformed section header {body!r}")
            section = body[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"{where}: unknown section [{section}]")
            continue
        if "=" not in body:
            raise ConfigError(f"{where}: expected 'key = value', got {body!r}")
        name, raw = (s.strip() for s in body.split("=", 1))
        key = name if section is None else f"{section}.{name}"
        if key in seen:
            raise ConfigError(f"{where}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = lineno
        cfg = _assign(cfg, key, raw, where)
    for key, value in cfg.items():
        if key not in seen:
            log.info("default %s = %s", key, _format(value))
    return cfg


PRESETS = ("multireward", "fewshot")


def load_config(path_or_preset: str | Path) -> ExperimentConfig:
    """Read a config file, or a bundled preset by name."""
    path = Path(path_or_preset)
    if path.is_file():
        return parse_config(path.read_text(encoding="utf-8"), str(path))
    if str(path_or_preset) in PRESETS:
        text = resources.files("ppdlab.presets").joinpath(f"{path_or_preset}.ini").read_text(
            encoding="utf-8")
        return parse_config(text, f"preset:{path_or_preset}")
    raise ConfigError(f"config file not found: {path}")
