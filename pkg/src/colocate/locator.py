"""Sliding-window classification, segmentation, alignment and the hits metric."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .trace import ScoreSeries, Trace, slice_windows, window_count

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.0
DEFAULT_MEDIAN_K = 5


@dataclass(frozen=True, eq=False)
class SquareWave:
    values: np.ndarray      # int8 in {-1, +1}
    stride: int = 1
    window_size: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.int8)
        if v.ndim != 1 or not np.all((v == 1) | (v == -1)):
            raise ValueError("a square wave takes values in {-1, +1}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class StartList:
    starts: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "starts", tuple(int(s) for s in self.starts))
        if any(b <= a for a, b in zip(self.starts, self.starts[1:])):
            raise ValueError("starts must be strictly increasing")
        if self.starts and self.starts[0] < 0:
            raise ValueError("starts must be non-negative")

    def __len__(self) -> int:
        return len(self.starts)

    def __iter__(self):
        return iter(self.starts)

    def check_bounds(self, length: int) -> "StartList":
        if self.starts and self.starts[-1] >= length:
            raise ValueError(f"start {self.starts[-1]} beyond a trace of {length} samples")
        return self


@dataclass(frozen=True, eq=False)
class AlignedBlock:
    segments: np.ndarray                     # (M, seg_len)
    starts: tuple[int, ...]
    plaintexts: Optional[tuple[bytes, ...]] = None
    dropped: int = 0

    def __post_init__(self):
        seg = np.asarray(self.segments, dtype=np.float64)
        if seg.ndim != 2:
            raise ValueError("aligned segments form a matrix")
        object.__setattr__(self, "segments", seg)
        if len(self.starts) != seg.shape[0]:
            raise ValueError("one start per segment")
        if self.plaintexts is not None and len(self.plaintexts) != seg.shape[0]:
            raise ValueError("one plaintext per segment")

    def __len__(self) -> int:
        return self.segments.shape[0]

    @property
    def seg_len(self) -> int:
        return self.segments.shape[1]

    def head(self, count: int) -> "AlignedBlock":
        pts = None if self.plaintexts is None else self.plaintexts[:count]
        return AlignedBlock(self.segments[:count], self.starts[:count], pts)


@dataclass(frozen=True)
class HitsResult:
    percent: float
    pairs: tuple[tuple[int, int], ...]       # (truth start, predicted start)
    n_truth: int
    n_predicted: int

    @property
    def matched(self) -> int:
        return len(self.pairs)

    @property
    def false_starts(self) -> int:
        return self.n_predicted - len(self.pairs)


# -- sliding-window classification ------------------------------------------------------


def _samples(trace) -> np.ndarray:
    return trace.samples if isinstance(trace, Trace) else np.asarray(trace, dtype=np.float64)


def classify_series(model, trace, n_inf: int, s: int, score: str = "linear",
                    batch_size: int = 256) -> ScoreSeries:
    """Class-one score of every ``n_inf``-window at stride ``s``.

    ``score="linear"`` uses the fully-connected output, ``"softmax"`` the
    class-one probability.
    """
    samples = _samples(trace)
    if score not in ("linear", "softmax"):
        raise ValueError(f"unknown score type {score!r}")
    if s < 1:
        raise ValueError("stride must be >= 1")
    if n_inf > samples.size:
        raise ValueError(f"trace of {samples.size} samples is shorter than n_inf={n_inf}")
    if hasattr(model, "sliding_logits"):
        logits = model.sliding_logits(samples, n_inf, s, batch_size=batch_size)
    else:
        windows = slice_windows(samples, n_inf, s)
        logits = np.concatenate([model.logits(windows[lo:lo + batch_size])
                                 for lo in range(0, len(windows), batch_size)])
    if score == "linear":
        out = logits[:, 1].astype(np.float64)
    else:
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        out = e[:, 1] / e.sum(axis=1)
    assert out.size == window_count(samples.size, n_inf, s)
    return ScoreSeries(out, s, n_inf)


def calibrated_threshold(model, q: float = 0.05) -> float:
    """The ``q``-quantile of the validation c1 linear scores recorded at training time.

    Quantiles between the stored ones are interpolated linearly.
    """
    table = (getattr(model, "calibration", None) or {}).get("c1")
    if not table:
        raise ValueError("model carries no score calibration")
    if not 0 < q < 1:
        raise ValueError("quantile must lie in (0, 1)")
    pts = sorted((float(k), float(v)) for k, v in table.items())
    return float(np.interp(q, [a for a, _ in pts], [b for _, b in pts]))


def resolve_threshold(model, th, q: float = 0.05) -> float:
    """``th`` as a number; the string ``"auto"`` selects :func:`calibrated_threshold`."""
    if isinstance(th, str):
        if th != "auto":
            raise ValueError(f"threshold must be a number or 'auto', got {th!r}")
        return calibrated_threshold(model, q)
    return float(th)


# -- segmentation ---------------------------------------------------------------------


def threshold(swc, th: float = DEFAULT_THRESHOLD) -> SquareWave:
    """+1 where the score is strictly above ``th``, else -1."""
    if isinstance(swc, ScoreSeries):
        scores, stride, n = swc.scores, swc.stride, swc.window_size
    else:
        scores, stride, n = np.asarray(swc, dtype=np.float64), 1, 0
    return SquareWave(np.where(scores > th, 1, -1).astype(np.int8), stride, n)


def _wave(sq) -> tuple[np.ndarray, int, int]:
    if isinstance(sq, SquareWave):
        return sq.values, sq.stride, sq.window_size
    return SquareWave(sq).values, 1, 0


def median_filter(sq, k: int = DEFAULT_MEDIAN_K) -> SquareWave:
    """Centred running median of odd width ``k`` with reflect padding.

    On a +-1 signal the median of an odd number of values is the sign of
    their sum, which is what is computed.
    """
    if k < 1 or k % 2 == 0:
        raise ValueError(f"median filter width must be odd and >= 1, got {k}")
    values, stride, n = _wave(sq)
    if k == 1 or values.size == 0:
        return SquareWave(values.copy(), stride, n)
    h = k // 2
    # numpy's reflect needs at least h+1 samples; repeat the reflection otherwise
    padded = np.pad(values.astype(np.int64), h, mode="reflect" if values.size > h else "symmetric")
    sums = np.convolve(padded, np.ones(k, dtype=np.int64), mode="valid")
    return SquareWave(np.where(sums > 0, 1, -1).astype(np.int8), stride, n)


def rising_edges(sq) -> list[int]:
    """Indices ``i`` with ``sq[i-1] == -1`` and ``sq[i] == +1``."""
    values, _, _ = _wave(sq)
    return (np.flatnonzero((values[1:] == 1) & (values[:-1] == -1)) + 1).tolist()


def to_start_list(edges: Sequence[int], s: int) -> StartList:
    return StartList(tuple(int(i) * s for i in edges))


def segment(swc: ScoreSeries, th: float = DEFAULT_THRESHOLD, k: int = DEFAULT_MEDIAN_K) -> StartList:
    """Threshold, median filter and rising-edge detection in one call."""
    return to_start_list(rising_edges(median_filter(threshold(swc, th), k)), swc.stride)


def locate(model, trace, n_inf: int, s: int, th: float = DEFAULT_THRESHOLD,
           k: int = DEFAULT_MEDIAN_K, score: str = "linear") -> tuple[StartList, ScoreSeries]:
    swc = classify_series(model, trace, n_inf, s, score)
    return segment(swc, th, k), swc


# -- alignment and scoring --------------------------------------------------------------


def align(trace, starts, seg_len: int, plaintexts=None) -> AlignedBlock:
    """Cut ``seg_len`` samples at every start; starts running past the end are dropped and counted."""
    if seg_len < 1:
        raise ValueError("seg_len must be >= 1")
    samples = _samples(trace)
    starts = tuple(starts)
    if plaintexts is not None and len(plaintexts) != len(starts):
        raise ValueError("one plaintext per start is required")
    keep = [i for i, st in enumerate(starts) if st + seg_len <= samples.size]
    dropped = len(starts) - len(keep)
    if dropped:
        log.info("align: %d start(s) overrun the trace end and were dropped", dropped)
    if keep:
        idx = np.array([starts[i] for i in keep])[:, None] + np.arange(seg_len)
        segments = samples[idx]
    else:
        segments = np.zeros((0, seg_len))
    pts = None if plaintexts is None else tuple(bytes(plaintexts[i]) for i in keep)
    return AlignedBlock(segments, tuple(starts[i] for i in keep), pts, dropped)


def hits(predicted, truth, tol: int) -> HitsResult:
    """Greedy in-order one-to-one matching of predicted to true starts within ``+-tol``.

    An empty truth list scores 100% (nothing to find); unmatched predictions
    are reported as false starts.
    """
    if tol < 0:
        raise ValueError("tol must be >= 0")
    pred = sorted(int(p) for p in predicted)
    true = sorted(int(t) for t in truth)
    pairs = []
    j = 0
    for t in true:
        while j < len(pred) and pred[j] < t - tol:
            j += 1
        if j < len(pred) and pred[j] <= t + tol:
            pairs.append((t, pred[j]))
            j += 1
    percent = 100.0 * len(pairs) / len(true) if true else 100.0
    return HitsResult(percent, tuple(pairs), len(true), len(pred))


def match_plaintexts(predicted: StartList, truth_starts, truth_plaintexts, tol: int):
    """Plaintext of the true CO matched by each predicted start (None when unmatched).

    The attacker knows the inputs it fed the device in order; this pairs them
    with the located COs.
    """
    res = hits(predicted, truth_starts, tol)
    pt_of = dict(zip((int(t) for t in truth_starts), truth_plaintexts))
    by_pred = {p: pt_of[t] for t, p in res.pairs}
    return [by_pred.get(p) for p in predicted]
