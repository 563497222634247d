"""Run configuration: TOML files layered over named presets."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .synth import PIPELINE_TABLE


class ConfigError(ValueError):
    """Invalid configuration (unknown key, bad value or unknown preset)."""


@dataclass
class SynthSection:
    profile: str = "aes128"
    scale: float = 10.0             # divides the tabulated mean CO length
    rd_max: int = 4
    samples_per_instr: int = 4
    alpha: float = 1.0
    beta: float = 0.0
    sigma: float = 0.5
    leak_span: int = 24             # instructions that handle each S-box output
    data_fraction: float = 0.0
    prologue_frac: float = 0.6      # start-up phase length, in training windows
    seed: int = 0
    cipher_traces: int = 4          # written to disk; the dataset stage regenerates the rest
    noise_len_instr: int = 400_000
    sessions: list = field(default_factory=lambda: [
        {"name": "clean", "num_cos": 64, "noise_mix": 0.0},
        {"name": "noisy", "num_cos": 64, "noise_mix": 0.5},
    ])
    noise_session_instr: int = 50_000
    noise_len_range: list = field(default_factory=lambda: [200, 800])


@dataclass
class DatasetSection:
    n_train: int = 2200
    cipher_start: int = 8192
    cipher_rest: int = 8192
    noise: int = 4096


@dataclass
class TrainSection:
    epochs: int = 2
    batch: int = 64
    lr: float = 1e-3
    seed: int = 0
    kernel_size: int = 64
    fc_hidden: int = 32
    max_val_error: float = 1.0      # exit 1 above this


@dataclass
class LocateSection:
    n_inf: int = 2000
    s: int = 100
    th: Any = "auto"                # number, or "auto" for the calibrated threshold
    auto_quantile: float = 0.01     # validation c1 score quantile used by th = "auto"
    k: int = 5
    seg_len: int = 0                # 0: the profile's mean CO length
    score: str = "linear"


@dataclass
class AttackSection:
    a: int = 0                      # 0: one instruction (samples_per_instr)
    schedule: list = field(default_factory=lambda: [50, 100, 200, 500, 1000, 2000])
    require_rank1: bool = False


@dataclass
class EvalSection:
    tol: int = 0                    # 0: two strides
    min_hits: float = 0.0


@dataclass
class RunConfig:
    synth: SynthSection = field(default_factory=SynthSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    train: TrainSection = field(default_factory=TrainSection)
    locate: LocateSection = field(default_factory=LocateSection)
    attack: AttackSection = field(default_factory=AttackSection)
    eval: EvalSection = field(default_factory=EvalSection)
    preset: str = ""

    @property
    def agg_width(self) -> int:
        return self.attack.a or self.synth.samples_per_instr

    @property
    def tol(self) -> int:
        return self.eval.tol or 2 * self.locate.s

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


SECTIONS = {f.name: f.type for f in fields(RunConfig) if f.name != "preset"}


# -- presets --------------------------------------------------------------------------

# Full mode reproduces the tabulated values.  "scaled" divides lengths by 10
# and window counts by 8; "desk" divides lengths by 100 for quick sessions.
_VARIANTS = {"": (1, 1), "-scaled": (10, 8), "-desk": (100, 8)}


def _preset(name: str, length_div: int, count_div: int) -> dict:
    row = PIPELINE_TABLE[name]
    return {
        "synth": {"profile": name, "scale": float(length_div)},
        "dataset": {"n_train": row.n_train // length_div, "cipher_start": row.cipher_start // count_div,
                    "cipher_rest": row.cipher_rest // count_div, "noise": row.noise // count_div},
        "locate": {"n_inf": row.n_inf // length_div, "s": max(row.stride // length_div, 1)},
    }


PRESETS = {name + suffix: _preset(name, *div) for name in PIPELINE_TABLE for suffix, div in _VARIANTS.items()}


# -- loading --------------------------------------------------------------------------


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _check_types(section: str, obj, raw: dict):
    for f in fields(obj):
        if f.name not in raw:
            continue
        default = getattr(obj, f.name)
        value = raw[f.name]
        if f.name == "th":
            if not (isinstance(value, (int, float)) and not isinstance(value, bool)) and value != "auto":
                raise ConfigError(f"{section}.th must be a number or \"auto\"")
            continue
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(default, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif isinstance(default, str):
            ok = isinstance(value, str)
        elif isinstance(default, list):
            ok = isinstance(value, list)
        else:
            ok = True
        if not ok:
            raise ConfigError(f"{section}.{f.name}: expected {type(default).__name__}, got {value!r}")


def from_dict(doc: dict, preset: Optional[str] = None) -> RunConfig:
    """Build a config from a nested dict; ``preset`` (or ``doc["preset"]``) supplies the base layer."""
    doc = dict(doc)
    preset = preset or doc.pop("preset", None) or ""
    doc.pop("preset", None)
    if preset and preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(sorted(PRESETS))}")
    merged = _merge(PRESETS.get(preset, {}), doc)
    cfg = RunConfig(preset=preset)
    for key, value in merged.items():
        if key not in SECTIONS:
            raise ConfigError(f"unknown config key {key!r}")
        if not isinstance(value, dict):
            raise ConfigError(f"config key {key!r} must be a table")
        section = getattr(cfg, key)
        names = {f.name for f in fields(section)}
        for sub in value:
            if sub not in names:
                raise ConfigError(f"unknown config key {key}.{sub}")
        _check_types(key, section, value)
        for sub, v in value.items():
            default = getattr(section, sub)
            if isinstance(default, float) and not isinstance(v, bool) and sub != "th":
                v = float(v)
            setattr(section, sub, v)
    validate(cfg)
    return cfg


def load(path=None, preset: Optional[str] = None, seed: Optional[int] = None) -> RunConfig:
    doc = {}
    if path is not None:
        try:
            doc = tomllib.loads(Path(path).read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    cfg = from_dict(doc, preset)
    if seed is not None:
        set_seed(cfg, seed)
    return cfg


def set_seed(cfg: RunConfig, seed: int) -> None:
    if not 0 <= seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    cfg.synth.seed = seed
    cfg.train.seed = seed


def validate(cfg: RunConfig) -> None:
    s, d, loc = cfg.synth, cfg.dataset, cfg.locate
    if s.profile not in PIPELINE_TABLE:
        raise ConfigError(f"synth.profile: unknown profile {s.profile!r}")
    checks = [
        (s.scale > 0, "synth.scale must be > 0"),
        (s.rd_max >= 0, "synth.rd_max must be >= 0"),
        (s.samples_per_instr >= 1, "synth.samples_per_instr must be >= 1"),
        (s.sigma >= 0, "synth.sigma must be >= 0"),
        (s.leak_span >= 1, "synth.leak_span must be >= 1"),
        (0 <= s.prologue_frac <= 1, "synth.prologue_frac must lie in [0, 1]"),
        (s.cipher_traces >= 0, "synth.cipher_traces must be >= 0"),
        (s.noise_len_instr >= 1, "synth.noise_len_instr must be >= 1"),
        (d.n_train >= 1, "dataset.n_train must be >= 1"),
        (min(d.cipher_start, d.cipher_rest, d.noise) >= 0, "dataset counts must be >= 0"),
        (cfg.train.epochs >= 1, "train.epochs must be >= 1"),
        (cfg.train.batch >= 2, "train.batch must be >= 2"),
        (cfg.train.lr > 0, "train.lr must be > 0"),
        (loc.n_inf >= 1, "locate.n_inf must be >= 1"),
        (loc.s >= 1, "locate.s must be >= 1"),
        (loc.k >= 1 and loc.k % 2 == 1, "locate.k must be odd and >= 1"),
        (loc.seg_len >= 0, "locate.seg_len must be >= 0"),
        (loc.score in ("linear", "softmax"), "locate.score must be linear or softmax"),
        (0 < loc.auto_quantile < 1, "locate.auto_quantile must lie in (0, 1)"),
        (cfg.attack.a >= 0, "attack.a must be >= 0"),
        (all(b > a for a, b in zip(cfg.attack.schedule, cfg.attack.schedule[1:])),
         "attack.schedule must be strictly increasing"),
        (cfg.eval.tol >= 0, "eval.tol must be >= 0"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)
    for i, sess in enumerate(s.sessions):
        if not isinstance(sess, dict) or set(sess) - {"name", "num_cos", "noise_mix", "rd_max"}:
            raise ConfigError(f"synth.sessions[{i}]: allowed keys are name, num_cos, noise_mix, rd_max")
        if "name" not in sess or int(sess.get("num_cos", 0)) < 1:
            raise ConfigError(f"synth.sessions[{i}] needs a name and num_cos >= 1")
