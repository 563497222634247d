"""Instruction-level power simulator for a CPU running ciphers under random delay.

Every executed instruction emits ``samples_per_instr`` samples of
``beta + alpha * HW(data_byte) + N(0, sigma)``.  A cipher execution (CO) is a
fixed per-profile program whose data bytes are a pseudo-random, blocky
pattern: a start-up phase on high-weight data (state and key loading), then
low-weight and unbiased blocks.  The first-round S-box outputs
``SBOX[pt[i] ^ key[i]]`` replace the pattern at the profile's leak positions,
right after start-up, each held for ``leak_span`` instructions.  The random-delay countermeasure
inserts ``U{0..m}`` dummy instructions with uniform data between consecutive
program instructions.
"""

from __future__ import annotations

import enum
import math
import zlib
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional

import numpy as np

from .trace import GroundTruth, Trace, TraceMeta

# FIPS-197 forward S-box.
SBOX = np.array([
    0x63, 0x7C, 0x77, 0x7B, 0xF2, 0x6B, 0x6F, 0xC5, 0x30, 0x01, 0x67, 0x2B, 0xFE, 0xD7, 0xAB, 0x76,
    0xCA, 0x82, 0xC9, 0x7D, 0xFA, 0x59, 0x47, 0xF0, 0xAD, 0xD4, 0xA2, 0xAF, 0x9C, 0xA4, 0x72, 0xC0,
    0xB7, 0xFD, 0x93, 0x26, 0x36, 0x3F, 0xF7, 0xCC, 0x34, 0xA5, 0xE5, 0xF1, 0x71, 0xD8, 0x31, 0x15,
    0x04, 0xC7, 0x23, 0xC3, 0x18, 0x96, 0x05, 0x9A, 0x07, 0x12, 0x80, 0xE2, 0xEB, 0x27, 0xB2, 0x75,
    0x09, 0x83, 0x2C, 0x1A, 0x1B, 0x6E, 0x5A, 0xA0, 0x52, 0x3B, 0xD6, 0xB3, 0x29, 0xE3, 0x2F, 0x84,
    0x53, 0xD1, 0x00, 0xED, 0x20, 0xFC, 0xB1, 0x5B, 0x6A, 0xCB, 0xBE, 0x39, 0x4A, 0x4C, 0x58, 0xCF,
    0xD0, 0xEF, 0xAA, 0xFB, 0x43, 0x4D, 0x33, 0x85, 0x45, 0xF9, 0x02, 0x7F, 0x50, 0x3C, 0x9F, 0xA8,
    0x51, 0xA3, 0x40, 0x8F, 0x92, 0x9D, 0x38, 0xF5, 0xBC, 0xB6, 0xDA, 0x21, 0x10, 0xFF, 0xF3, 0xD2,
    0xCD, 0x0C, 0x13, 0xEC, 0x5F, 0x97, 0x44, 0x17, 0xC4, 0xA7, 0x7E, 0x3D, 0x64, 0x5D, 0x19, 0x73,
    0x60, 0x81, 0x4F, 0xDC, 0x22, 0x2A, 0x90, 0x88, 0x46, 0xEE, 0xB8, 0x14, 0xDE, 0x5E, 0x0B, 0xDB,
    0xE0, 0x32, 0x3A, 0x0A, 0x49, 0x06, 0x24, 0x5C, 0xC2, 0xD3, 0xAC, 0x62, 0x91, 0x95, 0xE4, 0x79,
    0xE7, 0xC8, 0x37, 0x6D, 0x8D, 0xD5, 0x4E, 0xA9, 0x6C, 0x56, 0xF4, 0xEA, 0x65, 0x7A, 0xAE, 0x08,
    0xBA, 0x78, 0x25, 0x2E, 0x1C, 0xA6, 0xB4, 0xC6, 0xE8, 0xDD, 0x74, 0x1F, 0x4B, 0xBD, 0x8B, 0x8A,
    0x70, 0x3E, 0xB5, 0x66, 0x48, 0x03, 0xF6, 0x0E, 0x61, 0x35, 0x57, 0xB9, 0x86, 0xC1, 0x1D, 0x9E,
    0xE1, 0xF8, 0x98, 0x11, 0x69, 0xD9, 0x8E, 0x94, 0x9B, 0x1E, 0x87, 0xE9, 0xCE, 0x55, 0x28, 0xDF,
    0x8C, 0xA1, 0x89, 0x0D, 0xBF, 0xE6, 0x42, 0x68, 0x41, 0x99, 0x2D, 0x0F, 0xB0, 0x54, 0xBB, 0x16,
], dtype=np.uint8)

HW = np.array([bin(v).count("1") for v in range(256)], dtype=np.uint8)


def hw(b: int) -> int:
    return int(HW[b & 0xFF])


def aes_sbox(b: int) -> int:
    return int(SBOX[b & 0xFF])


class Kind(enum.IntEnum):
    NOP = 0
    CIPHER = 1
    RANDOM_DELAY = 2
    NOISE = 3


@dataclass(frozen=True)
class InstrEvent:
    data_byte: int
    kind: Kind

    def __post_init__(self):
        if not 0 <= self.data_byte <= 255:
            raise ValueError("data_byte must fit in a byte")
        if self.kind == Kind.NOP and self.data_byte != 0:
            raise ValueError("a NOP carries no data")


@dataclass(frozen=True, eq=False)
class InstrStream:
    """Array-backed sequence of instruction events."""

    data: np.ndarray
    kind: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", np.asarray(self.data, dtype=np.uint8))
        object.__setattr__(self, "kind", np.asarray(self.kind, dtype=np.uint8))
        if self.data.shape != self.kind.shape:
            raise ValueError("data and kind arrays differ in length")

    def __len__(self) -> int:
        return self.data.size

    def __getitem__(self, i: int) -> InstrEvent:
        return InstrEvent(int(self.data[i]), Kind(int(self.kind[i])))

    def __iter__(self) -> Iterator[InstrEvent]:
        return (self[i] for i in range(len(self)))

    def __eq__(self, other) -> bool:
        return (isinstance(other, InstrStream) and np.array_equal(self.data, other.data)
                and np.array_equal(self.kind, other.kind))

    @classmethod
    def of(cls, events) -> "InstrStream":
        events = list(events)
        return cls([e.data_byte for e in events], [int(e.kind) for e in events])

    @classmethod
    def filled(cls, kind: Kind, data) -> "InstrStream":
        data = np.asarray(data, dtype=np.uint8)
        return cls(data, np.full(data.size, int(kind), dtype=np.uint8))

    @staticmethod
    def concat(parts) -> "InstrStream":
        parts = list(parts)
        return InstrStream(np.concatenate([p.data for p in parts]), np.concatenate([p.kind for p in parts]))


# -- cipher profiles ------------------------------------------------------------

@dataclass(frozen=True)
class TableRow:
    mean_len: int
    n_train: int
    n_inf: int
    stride: int
    cipher_start: int
    cipher_rest: int
    noise: int


# Per-cipher pipeline parameters and dataset sizes (full scale, in samples / windows).
PIPELINE_TABLE = {
    "aes128": TableRow(220_000, 22_000, 20_000, 1_000, 65_536, 65_536, 32_768),
    "aes128-masked": TableRow(50_000, 4_800, 5_000, 100, 131_072, 65_536, 65_536),
    "clefia128": TableRow(108_000, 6_000, 6_000, 500, 65_536, 32_768, 32_768),
    "camellia128": TableRow(6_000, 1_400, 1_000, 100, 32_768, 65_536, 32_768),
    "simon128": TableRow(10_000, 2_000, 2_000, 100, 65_536, 32_768, 32_768),
}


@dataclass(frozen=True)
class CipherProfile:
    name: str
    mean_len_samples: int
    body_len_instr: int
    leak_positions: tuple[int, ...]
    leak_span: int = 1
    data_fraction: float = 0.0
    prologue_instr: int = 0

    def __post_init__(self):
        lp = self.leak_positions
        if len(lp) != 16:
            raise ValueError("a profile leaks exactly 16 S-box bytes")
        if any(b <= a for a, b in zip(lp, lp[1:])):
            raise ValueError("leak positions must be strictly increasing")
        if lp[0] < 0 or lp[-1] + self.leak_span > self.body_len_instr:
            raise ValueError("leak positions fall outside the CO body")
        if self.leak_span < 1:
            raise ValueError("leak_span must be >= 1")
        if not 0 <= self.prologue_instr < self.body_len_instr:
            raise ValueError("prologue must be shorter than the CO body")

    def program(self) -> np.ndarray:
        """The profile's fixed instruction data pattern (same on every execution)."""
        return _program_pattern(self.name, self.body_len_instr, self.prologue_instr)


def _name_seed(name: str) -> int:
    return zlib.crc32(name.encode())


def _bytes_by_hw():
    groups = {}
    for v in range(256):
        groups.setdefault(hw(v), []).append(v)
    low = np.array(groups[0] + groups[1] + groups[2], dtype=np.uint8)
    high = np.array(groups[6] + groups[7] + groups[8], dtype=np.uint8)
    return low, high


_LOW_BYTES, _HIGH_BYTES = _bytes_by_hw()


def _program_pattern(name: str, length: int, prologue: int = 0) -> np.ndarray:
    # Basic blocks of 4..24 instructions.  The start-up phase (the first
    # ``prologue`` instructions: state and key loading) runs on high-weight
    # data only; the rest of the CO alternates low-weight and unbiased blocks
    # and never returns to the start-up level.
    rng = np.random.default_rng([_name_seed(name), 0xC0DE])
    out = np.empty(length, dtype=np.uint8)
    pos = 0
    while pos < length:
        n = min(int(rng.integers(4, 25)), length - pos)
        if pos < prologue:
            n = min(n, prologue - pos)
            out[pos:pos + n] = rng.choice(_HIGH_BYTES, n)
        elif pos == 0:
            out[pos:pos + n] = rng.choice(_HIGH_BYTES, n)
        elif rng.integers(2) == 0:
            out[pos:pos + n] = rng.choice(_LOW_BYTES, n)
        else:
            out[pos:pos + n] = rng.integers(0, 256, n)
        pos += n
    return out


def make_profile(name: str, scale: float = 100, samples_per_instr: int = 4,
                 leak_span: int = 1, data_fraction: float = 0.0,
                 prologue_frac: float = 0.6) -> CipherProfile:
    """Profile for a tabulated cipher; ``scale`` divides the tabulated lengths.

    The start-up phase lasts ``prologue_frac`` training windows (at zero
    delay).  Profiles too short for sixteen leaks of ``leak_span``
    instructions after the start-up phase are lengthened.
    """
    row = PIPELINE_TABLE[name]
    mean_len = int(round(row.mean_len / scale))
    body = max(int(round(mean_len / samples_per_instr)), 64)
    prologue = int(round(prologue_frac * row.n_train / scale / samples_per_instr))
    prologue = min(prologue, body // 2)
    # First-round S-box outputs are produced right after start-up.
    offset = max(8, prologue)
    spacing = max(leak_span, 2)
    need = offset + 15 * spacing + leak_span + 8
    if need > body:
        # very short scaled profiles grow to hold all sixteen leaks
        body = need
        mean_len = body * samples_per_instr
    leaks = tuple(offset + spacing * i for i in range(16))
    return CipherProfile(name, mean_len, body, leaks, leak_span, data_fraction, prologue)


# -- configuration ----------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    profile: CipherProfile
    rd_max: int = 4
    samples_per_instr: int = 4
    alpha: float = 1.0
    beta: float = 0.0
    sigma: float = 0.5
    nop_preamble_instr: int = 0
    seed: int = 0
    num_cos: int = 1
    noise_mix: float = 0.0
    noise_len_range: tuple[int, int] = (200, 800)
    key: Optional[bytes] = None
    # idle application data ahead of the first CO, so that CO gets a rising edge
    lead_in_instr: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.rd_max < 0:
            raise ValueError("rd_max must be >= 0")
        if self.samples_per_instr < 1:
            raise ValueError("samples_per_instr must be >= 1")
        if self.nop_preamble_instr < 0:
            raise ValueError("nop_preamble_instr must be >= 0")
        if self.lead_in_instr < 0:
            raise ValueError("lead_in_instr must be >= 0")
        if not 0.0 <= self.noise_mix <= 1.0:
            raise ValueError("noise_mix is a probability")
        lo, hi = self.noise_len_range
        if not 1 <= lo <= hi:
            raise ValueError("noise_len_range must satisfy 1 <= min <= max")
        if self.key is not None and len(self.key) != 16:
            raise ValueError("key must be 16 bytes")

    def session_key(self) -> bytes:
        if self.key is not None:
            return bytes(self.key)
        return substream(self.seed, "key").bytes(16)


def default_preamble(n_train: int, samples_per_instr: int) -> int:
    return math.ceil(n_train / samples_per_instr)


# Substream tags keep independent draws from colliding.
_STREAMS = {"key": 1, "session": 2, "co": 3, "noise": 4, "cipher": 5, "delay": 6, "emit": 7, "pt": 8}


def substream(seed: int, purpose: str, *counters: int) -> np.random.Generator:
    """Counter-derived generator: a pure function of (seed, purpose, counters)."""
    return np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), _STREAMS[purpose], *counters]))


# -- leakage ------------------------------------------------------------------------

def emit_instr(e: InstrEvent, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    level = cfg.beta + cfg.alpha * hw(e.data_byte)
    return level + cfg.sigma * rng.standard_normal(cfg.samples_per_instr)


def emit_stream(stream: InstrStream, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Vectorised ``emit_instr`` over a whole stream."""
    levels = cfg.beta + cfg.alpha * HW[stream.data].astype(np.float64)
    samples = np.repeat(levels, cfg.samples_per_instr)
    if cfg.sigma > 0:
        samples += cfg.sigma * rng.standard_normal(samples.size)
    return samples


def build_co_instrs(profile: CipherProfile, pt: bytes, key: bytes, rng: np.random.Generator,
                    nop_preamble: int = 0) -> InstrStream:
    if len(pt) != 16 or len(key) != 16:
        raise ValueError("plaintext and key are 16-byte blocks")
    data = profile.program().copy()
    if profile.data_fraction > 0:
        mask = _data_mask(profile)
        data[mask] = rng.integers(0, 256, int(mask.sum()), dtype=np.uint8)
    sub = SBOX[np.frombuffer(bytes(pt), np.uint8) ^ np.frombuffer(bytes(key), np.uint8)]
    for i, p in enumerate(profile.leak_positions):
        data[p:p + profile.leak_span] = sub[i]
    body = InstrStream.filled(Kind.CIPHER, data)
    if nop_preamble:
        return InstrStream.concat([InstrStream.filled(Kind.NOP, np.zeros(nop_preamble)), body])
    return body


def _data_mask(profile: CipherProfile) -> np.ndarray:
    rng = np.random.default_rng([_name_seed(profile.name), 0xDA7A])
    mask = rng.random(profile.body_len_instr) < profile.data_fraction
    for p in profile.leak_positions:
        mask[p:p + profile.leak_span] = False
    return mask


def apply_random_delay(instrs: InstrStream, m: int, rng: np.random.Generator,
                       gap_mask: Optional[np.ndarray] = None):
    """Insert ``U{0..m}`` dummy instructions into every gap between consecutive events.

    ``gap_mask[i]`` (length ``len(instrs) - 1``) disables insertion between
    events i and i+1.  Returns ``(stream, index_map)`` where ``index_map[i]``
    is the new position of original event i.
    """
    if m < 0:
        raise ValueError("m must be >= 0")
    n = len(instrs)
    if m == 0 or n < 2:
        return instrs, np.arange(n)
    gaps = rng.integers(0, m + 1, n - 1)
    if gap_mask is not None:
        gaps[~np.asarray(gap_mask, dtype=bool)] = 0
    index_map = np.arange(n) + np.concatenate(([0], np.cumsum(gaps)))
    total = n + int(gaps.sum())
    data = rng.integers(0, 256, total, dtype=np.uint8)
    kind = np.full(total, int(Kind.RANDOM_DELAY), dtype=np.uint8)
    data[index_map] = instrs.data
    kind[index_map] = instrs.kind
    return InstrStream(data, kind), index_map


def _noise_burst(rng: np.random.Generator, n: int) -> InstrStream:
    return InstrStream.filled(Kind.NOISE, rng.integers(0, 256, n, dtype=np.uint8))


def gen_session(cfg: SynthConfig, plaintexts=None) -> Trace:
    """A trace of ``num_cos`` COs, optionally interleaved with noise applications.

    Ground truth records the first sample of each CO body.  Random delay is
    applied everywhere except inside NOP preambles.
    """
    if cfg.num_cos < 1:
        raise ValueError("num_cos must be >= 1")
    key = cfg.session_key()
    parts, body_first, protected = [], [], []
    pts = []
    pos = 0
    if cfg.lead_in_instr:
        parts.append(_noise_burst(substream(cfg.seed, "session", 0), cfg.lead_in_instr))
        pos = cfg.lead_in_instr
    for k in range(cfg.num_cos):
        rng = substream(cfg.seed, "co", k)
        if cfg.noise_mix > 0 and rng.random() < cfg.noise_mix:
            lo, hi = cfg.noise_len_range
            burst = _noise_burst(rng, int(rng.integers(lo, hi + 1)))
            parts.append(burst)
            pos += len(burst)
        pt = bytes(plaintexts[k]) if plaintexts is not None else rng.bytes(16)
        pts.append(pt)
        co = build_co_instrs(cfg.profile, pt, key, rng, cfg.nop_preamble_instr)
        if cfg.nop_preamble_instr:
            # no insertion between preamble NOPs nor between the last NOP and the body
            protected.append(np.arange(pos, pos + cfg.nop_preamble_instr))
        parts.append(co)
        body_first.append(pos + cfg.nop_preamble_instr)
        pos += len(co)
    stream = InstrStream.concat(parts)
    gap_mask = np.ones(max(len(stream) - 1, 0), dtype=bool)
    if protected:
        gap_mask[np.concatenate(protected)] = False
    stream, index_map = apply_random_delay(stream, cfg.rd_max, substream(cfg.seed, "delay"), gap_mask)
    samples = emit_stream(stream, cfg, substream(cfg.seed, "emit"))
    starts = tuple(int(index_map[i]) * cfg.samples_per_instr for i in body_first)
    truth = GroundTruth(starts, tuple(pts), key)
    return Trace(samples, TraceMeta(samples.size, cfg.profile.name, cfg.rd_max, cfg.seed, truth))


def gen_noise_trace(cfg: SynthConfig, len_instr: int) -> Trace:
    if len_instr < 1:
        raise ValueError("len_instr must be >= 1")
    stream = _noise_burst(substream(cfg.seed, "noise", 0), len_instr)
    stream, _ = apply_random_delay(stream, cfg.rd_max, substream(cfg.seed, "noise", 1))
    samples = emit_stream(stream, cfg, substream(cfg.seed, "noise", 2))
    truth = GroundTruth((), ())
    return Trace(samples, TraceMeta(samples.size, "noise", cfg.rd_max, cfg.seed, truth))


def _stratified_block(seed: int, tag: int, i: int) -> bytes:
    # Each aligned group of 256 consecutive indices sees every byte value once
    # per position.
    group, offset = divmod(i, 256)
    rng = substream(seed, "cipher", tag, group)
    return bytes(int(rng.permutation(256)[offset]) for _ in range(16))


def gen_cipher_traces(cfg: SynthConfig, count: int, start_index: int = 0) -> Iterator[Trace]:
    """Single-CO traces, each with the NOP preamble of ``cfg``.

    Keys and plaintexts are stratified per byte position.  Trace ``i`` only
    depends on ``(cfg.seed, i)``, so any sub-range can be regenerated alone.
    """
    for i in range(start_index, start_index + count):
        one = replace(cfg, num_cos=1, noise_mix=0.0, seed=_cipher_seed(cfg.seed, i),
                      key=_stratified_block(cfg.seed, 1, i))
        yield gen_session(one, plaintexts=[_stratified_block(cfg.seed, 2, i)])


def _cipher_seed(seed: int, i: int) -> int:
    return int(substream(seed, "cipher", 0, i).integers(0, 2**63))
