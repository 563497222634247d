"""The locator network: a small 1-D ResNet, its training loop and its file format.

Layout: conv block (1 -> f0) -> residual block (f0 -> f1, identity shortcut)
-> residual block (f1 -> f2, 1x1 projection shortcut) -> global average
pooling -> affine -> ReLU -> affine -> 2 logits.  A conv block is conv ->
batch norm -> ReLU; a residual block sums two chained conv blocks with its
shortcut.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import ParamStore, Tensor

log = logging.getLogger(__name__)

MODEL_MAGIC = b"SCNN"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    kernel_size: int = 64
    filters: tuple[int, int, int] = (16, 16, 32)
    fc_hidden: int = 32
    n_train: int = 2200
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        if len(self.filters) != 3 or min(self.filters) < 1:
            raise ValueError("filters needs three positive widths")
        if self.filters[1] < self.filters[0]:
            raise ValueError("filters[1] must be >= filters[0]")
        if self.kernel_size < 1:
            raise ValueError("kernel_size must be >= 1")


@dataclass
class ScoreVector:
    linear: np.ndarray
    probs: np.ndarray


@dataclass
class TrainedModel:
    config: ModelConfig
    params: ParamStore
    norm_stats: tuple[float, float] = (0.0, 1.0)
    val_error: float = float("nan")
    epoch_of_best: int = -1
    history: list = field(default_factory=list)
    calibration: dict = field(default_factory=dict)

    # -- inference ---------------------------------------------------------------

    def standardize(self, windows) -> np.ndarray:
        mean, std = self.norm_stats
        return ((np.asarray(windows, dtype=np.float64) - mean) / std).astype(np.float32)

    def logits(self, windows, standardized: bool = False, batch_size: int = 256) -> np.ndarray:
        """Eval-mode linear scores for a (count, N) stack of windows."""
        windows = np.atleast_2d(windows)
        out = np.empty((windows.shape[0], 2), dtype=np.float64)
        for i in range(0, windows.shape[0], batch_size):
            chunk = windows[i:i + batch_size]
            x = chunk.astype(np.float32) if standardized else self.standardize(chunk)
            out[i:i + batch_size] = network(self.params, self.config, x, training=False).data
        return out

    def predict(self, windows, standardized: bool = False) -> np.ndarray:
        return np.argmax(self.logits(windows, standardized), axis=1)

    def sliding_logits(self, samples, n: int, s: int, batch_size: int = 256) -> np.ndarray:
        """Eval-mode scores of every ``n``-window at stride ``s`` over a raw trace.

        Inside a window, features further than the edge margins from both
        ends equal the features of the whole trace, so the pooled sum is a
        difference of running sums over one pass of the trace plus two short
        edge runs per window.  Equal to scoring each window on its own up to
        float rounding; falls back to that when ``n`` is too short to gain.
        """
        samples = np.asarray(samples, dtype=np.float64)
        count = (samples.size - n) // s + 1
        if count < 1:
            raise ValueError(f"trace of {samples.size} samples is shorter than the window ({n})")
        left, right = edge_margins(self.config)
        span = left + right
        if n < 2 * span:
            windows = np.lib.stride_tricks.sliding_window_view(samples, n)[::s]
            return self.logits(windows, batch_size=batch_size)
        x = self.standardize(samples)
        origins = np.arange(count) * s
        inner = self._running_sums(x, origins + left, origins + n - right)
        edges = np.empty_like(inner)
        for lo in range(0, count, batch_size):
            o = origins[lo:lo + batch_size]
            idx = np.concatenate([o, o + n - span])[:, None] + np.arange(span)
            f = feature_maps(self.params, self.config, x[idx], training=False).data
            m = len(o)
            edges[lo:lo + m] = f[:m, :, :left].sum(axis=2, dtype=np.float64) + \
                f[m:, :, left:].sum(axis=2, dtype=np.float64)
        pooled = ((inner + edges) / n).astype(np.float32)
        return head(self.params, Tensor(pooled)).data.astype(np.float64)

    def _running_sums(self, x: np.ndarray, lo: np.ndarray, hi: np.ndarray,
                      piece: int = 4096, group: int = 8) -> np.ndarray:
        """Per-channel sums of whole-trace features over ``[lo[i], hi[i])``.

        Every mark lies in ``[left, len(x) - right]`` where the trace's own
        boundary padding is out of reach, so pieces of the trace can be
        processed as a batch of overlapping snippets (overlap-save).
        """
        left, right = edge_margins(self.config)
        begin, end = left, x.size - right
        marks = np.concatenate([lo, hi])
        if marks.size and (marks.min() < begin or marks.max() > end):
            raise ValueError("summation range reaches into the trace edges")
        order = np.argsort(marks, kind="stable")
        at = np.empty((marks.size, self.config.filters[2]))
        total = np.zeros(self.config.filters[2])
        j = 0
        pos = begin
        while pos < end:
            m = min(group, -(-(end - pos) // piece))
            width = min(piece, end - pos) if m == 1 else piece
            m = min(m, (end - pos) // width)
            origins = pos + width * np.arange(m)
            snippets = x[(origins - left)[:, None] + np.arange(width + left + right)]
            f = feature_maps(self.params, self.config, snippets, training=False).data
            f = f[:, :, left:left + width].astype(np.float64)
            f = f.transpose(1, 0, 2).reshape(f.shape[1], m * width)
            stop = pos + m * width
            csum = np.concatenate([np.zeros((f.shape[0], 1)), np.cumsum(f, axis=1)], axis=1)
            # running total up to (excluding) every mark inside this stretch
            while j < marks.size and marks[order[j]] < stop:
                at[order[j]] = total + csum[:, marks[order[j]] - pos]
                j += 1
            total = total + csum[:, -1]
            pos = stop
        while j < marks.size:
            at[order[j]] = total
            j += 1
        return at[lo.size:] - at[:lo.size]


def init_params(config: ModelConfig, dtype=np.float32) -> ParamStore:
    """Kaiming-uniform (fan-in) weights, zero biases, unit BN scales; seeded by ``config.seed``."""
    rng = np.random.default_rng([config.seed, 0x5EED])
    ps = ParamStore()
    k = config.kernel_size
    f0, f1, f2 = config.filters

    def conv(name, c_in, c_out, width):
        bound = np.sqrt(6.0 / (c_in * width))
        ps.add(f"{name}.w", rng.uniform(-bound, bound, (c_out, c_in, width)).astype(dtype))
        ps.add(f"{name}.b", np.zeros(c_out, dtype))

    def bn(name, c):
        ps.add(f"{name}.gamma", np.ones(c, dtype))
        ps.add(f"{name}.beta", np.zeros(c, dtype))
        ps.add_buffer(f"{name}.running_mean", np.zeros(c, dtype))
        ps.add_buffer(f"{name}.running_var", np.ones(c, dtype))

    def fc(name, d_in, d_out):
        bound = np.sqrt(6.0 / d_in)
        ps.add(f"{name}.w", rng.uniform(-bound, bound, (d_out, d_in)).astype(dtype))
        ps.add(f"{name}.b", np.zeros(d_out, dtype))

    conv("stem.conv", 1, f0, k)
    bn("stem.bn", f0)
    for blk, (c_in, c_out) in (("res1", (f0, f1)), ("res2", (f1, f2))):
        conv(f"{blk}.a.conv", c_in, c_out, k)
        bn(f"{blk}.a.bn", c_out)
        conv(f"{blk}.b.conv", c_out, c_out, k)
        bn(f"{blk}.b.bn", c_out)
        if c_in != c_out:
            conv(f"{blk}.proj", c_in, c_out, 1)
    fc("fc1", f2, config.fc_hidden)
    fc("fc2", config.fc_hidden, 2)
    return ps


def _conv_block(ps: ParamStore, name: str, x: Tensor, training: bool) -> Tensor:
    h = ag.conv1d(x, ps[f"{name}.conv.w"], ps[f"{name}.conv.b"])
    h = ag.batchnorm1d(h, ps[f"{name}.bn.gamma"], ps[f"{name}.bn.beta"],
                       ps.buffers[f"{name}.bn.running_mean"], ps.buffers[f"{name}.bn.running_var"],
                       training)
    return ag.relu(h)


def _residual_block(ps: ParamStore, name: str, x: Tensor, training: bool) -> Tensor:
    h = _conv_block(ps, f"{name}.a", x, training)
    h = _conv_block(ps, f"{name}.b", h, training)
    shortcut = x
    if f"{name}.proj.w" in ps.params:
        shortcut = ag.conv1d(x, ps[f"{name}.proj.w"], ps[f"{name}.proj.b"])
    return ag.add(h, shortcut)


def feature_maps(ps: ParamStore, config: ModelConfig, windows: np.ndarray, training: bool) -> Tensor:
    """(B, f2, N) output of the convolutional trunk."""
    x = Tensor(np.asarray(windows)[:, None, :])
    h = _conv_block(ps, "stem", x, training)
    h = _residual_block(ps, "res1", h, training)
    return _residual_block(ps, "res2", h, training)


def head(ps: ParamStore, pooled: Tensor) -> Tensor:
    h = ag.relu(ag.affine(pooled, ps["fc1.w"], ps["fc1.b"]))
    return ag.affine(h, ps["fc2.w"], ps["fc2.b"])


def network(ps: ParamStore, config: ModelConfig, windows: np.ndarray, training: bool) -> Tensor:
    """Linear (pre-softmax) scores for a (B, N) batch of standardized windows."""
    return head(ps, ag.global_avg_pool(feature_maps(ps, config, windows, training)))


CONV_DEPTH = 5      # stacked kernel_size convolutions between input and pooling


def edge_margins(config: ModelConfig) -> tuple[int, int]:
    """Widths at the left/right window edges whose features see the zero padding."""
    left, right = ag.conv_padding(config.kernel_size)
    return CONV_DEPTH * left, CONV_DEPTH * right


def forward(model: TrainedModel, window, mode: str = "eval", standardized: bool = False) -> ScoreVector:
    """Score one window (or a (B, N) batch).  ``mode="train"`` needs a batch of 2 or more."""
    if mode not in ("train", "eval"):
        raise ValueError("mode is 'train' or 'eval'")
    x = np.atleast_2d(window)
    x = x.astype(np.float32) if standardized else model.standardize(x)
    logits = network(model.params, model.config, x, training=mode == "train")
    probs = ag.softmax(Tensor(logits.data.astype(np.float64))).data
    linear = logits.data.astype(np.float64)
    if np.ndim(window) == 1:
        return ScoreVector(linear[0], probs[0])
    return ScoreVector(linear, probs)


# -- training --------------------------------------------------------------------------


def error_rate(model: TrainedModel, windows: np.ndarray, labels: np.ndarray) -> float:
    pred = model.predict(windows, standardized=True)
    return float(np.mean(pred != labels))


CALIBRATION_QUANTILES = (0.001, 0.01, 0.02, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99, 0.999)


def score_calibration(logits: np.ndarray, labels: np.ndarray) -> dict:
    """Quantiles of the class-one linear score per true class (keys are quantile strings)."""
    out = {}
    for cls in (0, 1):
        scores = logits[labels == cls, 1]
        if scores.size:
            out[f"c{cls}"] = {f"{q:g}": float(v) for q, v in
                              zip(CALIBRATION_QUANTILES, np.quantile(scores, CALIBRATION_QUANTILES))}
    return out


def train(dataset, config: ModelConfig, epochs: int = 2, batch: int = 64, lr: float = 1e-3,
          progress=None) -> TrainedModel:
    """Adam on the cross-entropy loss; returns the epoch snapshot with the lowest validation error.

    ``dataset`` provides ``split(name) -> (standardized windows, labels)`` and
    ``norm_stats``.  ``progress(epoch, step, loss)`` is called after every step.
    """
    x_train, y_train = dataset.split("train")
    x_val, y_val = dataset.split("val")
    if len(y_train) == 0 or len(y_val) == 0:
        raise ValueError("training and validation partitions must be nonempty")
    if batch < 2:
        raise ValueError("batch normalisation needs mini-batches of at least 2")
    ps = init_params(config)
    model = TrainedModel(config, ps, tuple(float(v) for v in dataset.norm_stats))
    rng = np.random.default_rng([config.seed, 0xBA7C])
    eye = np.eye(2, dtype=np.float32)
    best = None
    for epoch in range(epochs):
        order = rng.permutation(len(y_train))
        losses = []
        for step, i in enumerate(range(0, len(order), batch)):
            idx = np.sort(order[i:i + batch])
            if idx.size < 2:
                continue
            logits = network(ps, config, x_train[idx], training=True)
            loss = ag.softmax_cross_entropy(logits, eye[y_train[idx]])
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at epoch {epoch} step {step}")
            loss.backward()
            ag.adam_step(ps, lr)
            losses.append(value)
            if progress is not None:
                progress(epoch, step, value)
        val_logits = model.logits(x_val, standardized=True)
        val_err = float(np.mean(np.argmax(val_logits, axis=1) != y_val))
        model.history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_error": val_err})
        log.info("epoch %d: train loss %.4f, validation error %.4f", epoch, np.mean(losses), val_err)
        if best is None or val_err < best[0]:
            best = (val_err, epoch, ps.snapshot(), score_calibration(val_logits, y_val))
    model.val_error, model.epoch_of_best, model.calibration = best[0], best[1], best[3]
    ps.restore(best[2])
    return model


def confusion_matrix(model: TrainedModel, windows: np.ndarray, labels: np.ndarray,
                     standardized: bool = True) -> dict:
    """2x2 counts indexed ``[predicted][true]`` with row- and column-normalised percentages."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("confusion matrix of an empty set")
    pred = model.predict(windows, standardized=standardized)
    counts = np.zeros((2, 2), dtype=np.int64)
    np.add.at(counts, (pred, labels), 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        col = np.nan_to_num(100.0 * counts / counts.sum(axis=0, keepdims=True))
        row = np.nan_to_num(100.0 * counts / counts.sum(axis=1, keepdims=True))
    return {"counts": counts, "column_pct": col, "row_pct": row,
            "accuracy": float(np.trace(counts) / counts.sum())}


# -- serialisation -------------------------------------------------------------------------


def save_model(model: TrainedModel, path) -> None:
    meta = {"config": asdict(model.config), "val_error": model.val_error,
            "epoch_of_best": model.epoch_of_best, "history": model.history,
            "calibration": model.calibration}
    blob = json.dumps(meta, sort_keys=True).encode()
    arrays = model.params.arrays()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC + struct.pack("<B", MODEL_VERSION))
        fh.write(struct.pack("<I", len(blob)) + blob)
        fh.write(struct.pack("<2d", *model.norm_stats))
        fh.write(struct.pack("<I", len(arrays)))
        for name in model.params.names():
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFormatError(f"{self.path}: truncated model file")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_model(path) -> TrainedModel:
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.take(4) != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: not a model file")
    (version,) = r.unpack("<B")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported model version {version}")
    (blob_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(blob_len))
        config = ModelConfig(**meta["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"{path}: bad config block: {exc}") from exc
    norm_stats = r.unpack("<2d")
    (count,) = r.unpack("<I")
    ps = init_params(config)
    expected = ps.names()
    if count != len(expected):
        raise ModelFormatError(f"{path}: {count} parameters, architecture has {len(expected)}")
    arrays = {}
    for name in expected:
        (n,) = r.unpack("<H")
        got = r.take(n).decode()
        if got != name:
            raise ModelFormatError(f"{path}: expected parameter {name}, found {got}")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        want = ps.arrays()[name].shape
        if tuple(shape) != want:
            raise ModelFormatError(f"{path}: shape mismatch for {name}: {tuple(shape)} vs {want}")
        arrays[name] = np.frombuffer(r.take(4 * int(np.prod(shape))), dtype="<f4").reshape(shape)
    if r.pos != len(r.data):
        raise ModelFormatError(f"{path}: trailing bytes")
    ps.restore(arrays)
    return TrainedModel(config, ps, tuple(norm_stats), meta["val_error"], meta["epoch_of_best"],
                        meta.get("history", []), meta.get("calibration", {}))
