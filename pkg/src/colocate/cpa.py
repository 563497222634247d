"""First-round correlation power analysis on aligned CO segments."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .synth import HW, SBOX

log = logging.getLogger(__name__)

N_BYTES = 16
N_GUESSES = 256


class DegenerateVariance(UserWarning):
    """A correlation was requested against a constant vector."""


def aggregate(segments, a: int) -> np.ndarray:
    """Non-overlapping sums of ``a`` consecutive samples per row; the tail is dropped."""
    x = np.atleast_2d(np.asarray(getattr(segments, "segments", segments), dtype=np.float64))
    if a < 1:
        raise ValueError("aggregation width must be >= 1")
    if a > x.shape[1]:
        raise ValueError(f"aggregation width {a} exceeds the segment length {x.shape[1]}")
    cols = x.shape[1] // a
    return x[:, :cols * a].reshape(x.shape[0], cols, a).sum(axis=2)


def _pt_matrix(plaintexts) -> np.ndarray:
    pts = np.array([np.frombuffer(bytes(p), dtype=np.uint8) for p in plaintexts], dtype=np.uint8)
    if pts.ndim != 2 or (pts.size and pts.shape[1] != N_BYTES):
        raise ValueError("plaintexts must be 16-byte blocks")
    return pts.reshape(-1, N_BYTES)


def hypothesis(plaintexts, b: int, g: int) -> np.ndarray:
    """HW(S-box(pt[b] ^ g)) for every plaintext."""
    pts = _pt_matrix(plaintexts)
    return HW[SBOX[pts[:, b] ^ np.uint8(g)]].astype(np.int64)


def hypothesis_matrix(pt_column: np.ndarray) -> np.ndarray:
    """(M, 256) predicted leakage of one plaintext byte under every key guess."""
    guesses = np.arange(N_GUESSES, dtype=np.uint8)
    return HW[SBOX[pt_column[:, None] ^ guesses[None, :]]].astype(np.float64)


def pearson(x, y) -> float:
    """Sample Pearson correlation; 0.0 (with a warning) when either side is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two vectors of equal length")
    if x.size < 2:
        raise ValueError("pearson needs at least two observations")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        warnings.warn("constant input to pearson; correlation defined as 0", DegenerateVariance)
        return 0.0
    r = float(xc @ yc) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


class CpaAccumulator:
    """Running sums for all 16 bytes x 256 guesses x columns.

    Rows can be added in chunks; :meth:`correlations` is then valid for all
    rows seen so far, which makes a whole CO-count schedule cost one pass.
    Samples are shifted by the first chunk's column means to keep the sums
    well conditioned.
    """

    def __init__(self, n_cols: int):
        self.n_cols = n_cols
        self.count = 0
        self.shift: Optional[np.ndarray] = None
        self.sx = np.zeros(n_cols)
        self.sxx = np.zeros(n_cols)
        self.sh = np.zeros((N_BYTES, N_GUESSES))
        self.shh = np.zeros((N_BYTES, N_GUESSES))
        self.shx = np.zeros((N_BYTES, N_GUESSES, n_cols))

    def update(self, columns: np.ndarray, plaintexts) -> None:
        x = np.atleast_2d(np.asarray(columns, dtype=np.float64))
        pts = _pt_matrix(plaintexts)
        if x.shape[0] != pts.shape[0]:
            raise ValueError(f"{x.shape[0]} segments but {pts.shape[0]} plaintexts")
        if x.shape[1] != self.n_cols:
            raise ValueError("column count changed between updates")
        if x.shape[0] == 0:
            return
        if self.shift is None:
            self.shift = x.mean(axis=0)
        x = x - self.shift
        self.count += x.shape[0]
        self.sx += x.sum(axis=0)
        self.sxx += np.einsum("ij,ij->j", x, x)
        for b in range(N_BYTES):
            h = hypothesis_matrix(pts[:, b])
            self.sh[b] += h.sum(axis=0)
            self.shh[b] += np.einsum("ij,ij->j", h, h)
            self.shx[b] += h.T @ x

    def correlations(self) -> np.ndarray:
        """(16, 256, n_cols) Pearson coefficients; constant columns give 0."""
        n = self.count
        if n < 2:
            raise ValueError("CPA needs at least two COs")
        vx = self.sxx - self.sx ** 2 / n
        vh = self.shh - self.sh ** 2 / n
        cov = self.shx - self.sh[:, :, None] * self.sx[None, None, :] / n
        denom = np.sqrt(np.clip(vh, 0, None)[:, :, None] * np.clip(vx, 0, None)[None, None, :])
        # variances below round-off of their own sums count as zero
        tiny = (vx <= 1e-12 * np.maximum(self.sxx, 1e-300))[None, None, :] | \
            (vh <= 1e-12 * np.maximum(self.shh, 1e-300))[:, :, None]
        with np.errstate(invalid="ignore", divide="ignore"):
            rho = np.where(tiny | (denom == 0), 0.0, cov / np.where(denom == 0, 1.0, denom))
        return np.clip(rho, -1.0, 1.0)


@dataclass(frozen=True, eq=False)
class ByteResult:
    byte: int
    scores: np.ndarray                      # (256,) max |rho| over columns
    best_guess: int
    rank: Optional[int]
    correlations: Optional[np.ndarray] = None   # (256, n_cols)
    leak_column: Optional[int] = None       # column of the true key's peak


@dataclass(frozen=True, eq=False)
class CpaResult:
    bytes: tuple[ByteResult, ...]
    num_cos_used: int
    agg_width: int

    @property
    def ranks(self) -> Optional[list[int]]:
        if any(r.rank is None for r in self.bytes):
            return None
        return [r.rank for r in self.bytes]

    @property
    def recovered_key(self) -> bytes:
        return bytes(r.best_guess for r in self.bytes)

    def all_rank1(self) -> bool:
        ranks = self.ranks
        return ranks is not None and all(r == 1 for r in ranks)


def guess_ranks(scores: np.ndarray) -> np.ndarray:
    """Rank of every guess: 1 + guesses scoring strictly higher + other guesses tying it."""
    scores = np.asarray(scores)
    higher = (scores[None, :] > scores[:, None]).sum(axis=1)
    ties = (scores[None, :] == scores[:, None]).sum(axis=1) - 1
    return 1 + higher + ties


def _result(rho: np.ndarray, n: int, a: int, true_key, keep_correlations: bool) -> CpaResult:
    key = None if true_key is None else np.frombuffer(bytes(true_key), dtype=np.uint8)
    out = []
    for b in range(N_BYTES):
        scores = np.abs(rho[b]).max(axis=1) if rho.shape[2] else np.zeros(N_GUESSES)
        rank = leak = None
        if key is not None:
            rank = int(guess_ranks(scores)[key[b]])
            leak = int(np.abs(rho[b, key[b]]).argmax()) if rho.shape[2] else None
        out.append(ByteResult(b, scores, int(scores.argmax()), rank,
                              rho[b] if keep_correlations else None, leak))
    return CpaResult(tuple(out), n, a)


def attack(block, plaintexts=None, a: int = 4, true_key=None, keep_correlations: bool = True) -> CpaResult:
    """CPA on every key byte of an aligned block.

    ``block`` is an AlignedBlock (its plaintexts are used unless given) or a
    plain (M, L) matrix.
    """
    if plaintexts is None:
        plaintexts = getattr(block, "plaintexts", None)
    if plaintexts is None:
        raise ValueError("CPA needs the plaintext of every segment")
    cols = aggregate(block, a)
    if cols.shape[0] != len(plaintexts):
        raise ValueError(f"{cols.shape[0]} segments but {len(plaintexts)} plaintexts")
    if cols.shape[0] < 2:
        raise ValueError("CPA needs at least two COs")
    acc = CpaAccumulator(cols.shape[1])
    acc.update(cols, plaintexts)
    return _result(acc.correlations(), acc.count, a, true_key, keep_correlations)


@dataclass(frozen=True)
class ScheduleResult:
    counts: tuple[int, ...]
    ranks: tuple[tuple[int, ...], ...]        # per scheduled count, 16 ranks
    per_byte: tuple[Optional[int], ...]       # first count with rank 1 (and kept after), per byte
    overall: Optional[int]                    # first count with all 16 ranks == 1

    @property
    def reached(self) -> bool:
        return self.overall is not None


def min_cos_to_rank1(block, plaintexts=None, a: int = 4, true_key=None,
                     schedule: Sequence[int] = ()) -> ScheduleResult:
    """Smallest scheduled CO count at which every key byte ranks first.

    Uses the first ``c`` rows of the block for each count ``c``.  Counts
    beyond the block size are skipped.
    """
    if true_key is None:
        raise ValueError("the true key is needed to rank guesses")
    if plaintexts is None:
        plaintexts = getattr(block, "plaintexts", None)
    cols = aggregate(block, a)
    if cols.shape[0] != len(plaintexts):
        raise ValueError(f"{cols.shape[0]} segments but {len(plaintexts)} plaintexts")
    schedule = [int(c) for c in schedule]
    if any(b <= a_ for a_, b in zip(schedule, schedule[1:])):
        raise ValueError("schedule must be strictly increasing")
    schedule = [c for c in schedule if 2 <= c <= cols.shape[0]]
    acc = CpaAccumulator(cols.shape[1])
    done = 0
    counts, ranks = [], []
    for c in schedule:
        acc.update(cols[done:c], plaintexts[done:c])
        done = c
        res = _result(acc.correlations(), c, a, true_key, False)
        counts.append(c)
        ranks.append(tuple(res.ranks))
    per_byte = []
    for b in range(N_BYTES):
        first = None
        for c, r in zip(counts, ranks):
            if r[b] == 1:
                first = c if first is None else first
            else:
                first = None
        per_byte.append(first)
    overall = next((c for c, r in zip(counts, ranks) if all(x == 1 for x in r)), None)
    return ScheduleResult(tuple(counts), tuple(ranks), tuple(per_byte), overall)


def fixed_stride_cut(trace, seg_len: int, count: int, period: Optional[int] = None,
                     offset: int = 0) -> np.ndarray:
    """Cut ``count`` segments at ``offset + i * period`` without any localisation.

    ``period`` defaults to the trace length divided by ``count`` (the mean CO
    period an attacker could estimate).  Segments past the end are dropped.
    """
    samples = getattr(trace, "samples", trace)
    samples = np.asarray(samples, dtype=np.float64)
    if period is None:
        period = samples.size // count
    starts = offset + period * np.arange(count)
    starts = starts[starts + seg_len <= samples.size]
    return samples[starts[:, None] + np.arange(seg_len)]
