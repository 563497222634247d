"""Labelled window datasets built from single-CO cipher traces and a noise trace."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .trace import ClassLabel, Trace, Window, ensure_dir

SPLIT_FRACTIONS = {"train": 0.80, "val": 0.15, "test": 0.05}
SPLITS = tuple(SPLIT_FRACTIONS)


class Source(enum.IntEnum):
    CIPHER_START = 0
    CIPHER_REST = 1
    NOISE = 2


@dataclass(frozen=True, eq=False)
class LabeledWindow(Window):
    source: Optional[Source] = None


@dataclass(frozen=True)
class DatasetSpec:
    cipher_start: int
    cipher_rest: int
    noise: int

    @property
    def total(self) -> int:
        return self.cipher_start + self.cipher_rest + self.noise


class InsufficientData(ValueError):
    pass


def find_body_start(samples: np.ndarray, samples_per_instr: int = 4, k_sigma: float = 5.0,
                    quiet: int = 64) -> int:
    """Index of the first sample after the NOP preamble.

    The preamble level and noise are estimated (median / MAD) from the first
    ``quiet`` samples; the body starts at the first run of
    ``samples_per_instr`` samples all above ``level + k_sigma * noise``.
    """
    samples = np.asarray(samples, dtype=np.float64)
    head = samples[:quiet]
    level = np.median(head)
    noise = 1.4826 * np.median(np.abs(head - level))
    thr = level + max(k_sigma * noise, 1e-9)
    above = samples > thr
    run = np.lib.stride_tricks.sliding_window_view(above, samples_per_instr).all(axis=1)
    hits = np.flatnonzero(run)
    if hits.size == 0:
        raise InsufficientData("no CO body found after the NOP preamble")
    return int(hits[0])


def strip_preamble(trace: Trace, samples_per_instr: int = 4) -> np.ndarray:
    """Samples of a cipher trace from the detected CO start onwards."""
    return trace.samples[find_body_start(trace.samples, samples_per_instr):]


def label_cipher_trace(trace, n: int) -> list[LabeledWindow]:
    """First ``n`` samples -> c1, following non-overlapping ``n``-windows -> c0, tail dropped.

    ``trace`` must start at the CO start (a Trace or a sample array).
    """
    samples = trace.samples if isinstance(trace, Trace) else np.asarray(trace)
    if samples.size < n:
        raise InsufficientData(f"cipher trace of {samples.size} samples is shorter than n={n}")
    count = samples.size // n
    out = [LabeledWindow(samples[:n], 0, ClassLabel.C1, Source.CIPHER_START)]
    out += [LabeledWindow(samples[i * n:(i + 1) * n], i * n, ClassLabel.C0, Source.CIPHER_REST)
            for i in range(1, count)]
    return out


def sample_noise_windows(noise: Trace, n: int, count: int, rng: np.random.Generator) -> list[LabeledWindow]:
    if len(noise) < n:
        raise InsufficientData(f"noise trace of {len(noise)} samples is shorter than n={n}")
    if count < 0:
        raise ValueError("count must be >= 0")
    origins = rng.integers(0, len(noise) - n + 1, count)
    return [LabeledWindow(noise.samples[o:o + n], int(o), ClassLabel.C0, Source.NOISE) for o in origins]


@dataclass
class Dataset:
    n_train: int
    windows: dict            # split -> (M, n) float32, raw (not standardized)
    labels: dict             # split -> (M,) uint8
    norm_stats: tuple[float, float]
    counts: dict = field(default_factory=dict)
    seed: int = 0
    sources: Optional[dict] = None

    def split(self, name: str):
        """Standardized copy of one partition and its labels."""
        mean, std = self.norm_stats
        x = (self.windows[name].astype(np.float64) - mean) / std
        return x.astype(np.float32), self.labels[name].astype(np.int64)

    def raw(self, name: str):
        return self.windows[name], self.labels[name].astype(np.int64)

    def sizes(self) -> dict:
        return {k: int(len(v)) for k, v in self.labels.items()}

    def manifest(self) -> dict:
        return {"n_train": self.n_train, "seed": self.seed, "counts": self.counts,
                "sizes": self.sizes(), "norm_stats": {"mean": self.norm_stats[0], "std": self.norm_stats[1]}}


def split_sizes(total: int) -> dict:
    n_train = int(round(SPLIT_FRACTIONS["train"] * total))
    n_val = int(round(SPLIT_FRACTIONS["val"] * total))
    return {"train": n_train, "val": n_val, "test": total - n_train - n_val}


def _take(pool: list, count: int, name: str, rng: np.random.Generator) -> list:
    if len(pool) < count:
        raise InsufficientData(f"{name}: need {count} windows, only {len(pool)} available")
    idx = np.sort(rng.choice(len(pool), count, replace=False)) if len(pool) > count else range(count)
    return [pool[i] for i in idx]


def build_dataset(cipher_traces: Iterable[Trace], noise: Trace, spec: DatasetSpec, n: int, seed: int,
                  samples_per_instr: int = 4) -> Dataset:
    """Assemble, shuffle and split the three window pools; normalisation uses the train split only."""
    rng = np.random.default_rng([seed, 0xDA7A5E7])
    # Long COs yield many rest windows; keep an even share per trace so the
    # pool stays small and every trace is represented.
    quota = -(-spec.cipher_rest // max(spec.cipher_start, 1)) + 1
    starts, rest = [], []
    for trace in cipher_traces:
        body = strip_preamble(trace, samples_per_instr)
        if body.size < n:
            continue
        ws = label_cipher_trace(body, n)
        starts.append(ws[0].values.astype(np.float32))
        others = ws[1:]
        if len(others) > quota:
            others = [others[i] for i in np.sort(rng.choice(len(others), quota, replace=False))]
        rest.extend(w.values.astype(np.float32) for w in others)
        if len(starts) >= spec.cipher_start and len(rest) >= spec.cipher_rest:
            break
    starts = _take(starts, spec.cipher_start, "cipher start", rng)
    rest = _take(rest, spec.cipher_rest, "cipher rest", rng)
    noise_ws = [w.values.astype(np.float32) for w in sample_noise_windows(noise, n, spec.noise, rng)]

    values = np.stack(starts + rest + noise_ws) if spec.total else np.zeros((0, n), np.float32)
    labels = np.concatenate([np.ones(len(starts)), np.zeros(len(rest) + len(noise_ws))]).astype(np.uint8)
    sources = np.concatenate([np.full(len(starts), Source.CIPHER_START), np.full(len(rest), Source.CIPHER_REST),
                              np.full(len(noise_ws), Source.NOISE)]).astype(np.uint8)
    order = rng.permutation(len(labels))
    sizes = split_sizes(len(labels))
    windows, labs, srcs = {}, {}, {}
    lo = 0
    for name in SPLITS:
        idx = order[lo:lo + sizes[name]]
        lo += sizes[name]
        windows[name], labs[name], srcs[name] = values[idx], labels[idx], sources[idx]
    train = windows["train"].astype(np.float64)
    std = float(train.std()) if train.size else 1.0
    norm = (float(train.mean()) if train.size else 0.0, std if std > 0 else 1.0)
    counts = {"cipher_start": spec.cipher_start, "cipher_rest": spec.cipher_rest, "noise": spec.noise}
    return Dataset(n, windows, labs, norm, counts, seed, srcs)


# -- persistence ------------------------------------------------------------------------


def save_dataset(ds: Dataset, directory) -> Path:
    """Manifest plus one shard per split: windows (f32 LE) followed by one label byte per window."""
    directory = ensure_dir(directory)
    for name in SPLITS:
        with open(directory / f"{name}.bin", "wb") as fh:
            fh.write(np.ascontiguousarray(ds.windows[name], dtype="<f4").tobytes())
            fh.write(ds.labels[name].astype(np.uint8).tobytes())
    (directory / "manifest.json").write_text(json.dumps(ds.manifest(), indent=1, sort_keys=True) + "\n")
    return directory


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    n = int(manifest["n_train"])
    windows, labels = {}, {}
    for name in SPLITS:
        m = int(manifest["sizes"][name])
        raw = (directory / f"{name}.bin").read_bytes()
        if len(raw) != m * (4 * n + 1):
            raise ValueError(f"{name}.bin: expected {m * (4 * n + 1)} bytes, found {len(raw)}")
        windows[name] = np.frombuffer(raw[:4 * n * m], dtype="<f4").reshape(m, n).astype(np.float32)
        labels[name] = np.frombuffer(raw[4 * n * m:], dtype=np.uint8).copy()
    ns = manifest["norm_stats"]
    return Dataset(n, windows, labels, (float(ns["mean"]), float(ns["std"])), manifest["counts"],
                   int(manifest["seed"]))
