"""CSI matrices: synthesis, angle-delay transform, normalization, noise, storage.

The dataset file layout (all little-endian)::

    magic        4 bytes  b"TCLD"
    version      u16
    n_a, n_t     u16, u16
    count        u32
    lo, hi       f64, f64
    samples      count x [2, n_a, n_t] float32, row-major, real plane first
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from tclnet.errors import FormatError, InvalidParameterError

DATASET_MAGIC = b"TCLD"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sHHHIdd")


@dataclass(frozen=True)
class CsiMatrix:
    """Spatial-frequency channel, ``n_c`` subcarriers by ``n_t`` antennas."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.complex128)
        if data.ndim != 2 or 0 in data.shape:
            raise InvalidParameterError(f"CSI matrix must be 2-D and non-empty, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidParameterError("CSI matrix has non-finite entries")
        object.__setattr__(self, "data", data)

    @property
    def n_c(self) -> int:
        return self.data.shape[0]

    @property
    def n_t(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class AngleDelayCsi:
    """The first ``n_a`` delay rows of the angle-delay channel."""

    data: np.ndarray
    origin_n_c: int

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.complex128)
        if data.ndim != 2 or 0 in data.shape:
            raise InvalidParameterError(f"angle-delay matrix must be 2-D and non-empty, got shape {data.shape}")
        if data.shape[0] > self.origin_n_c:
            raise InvalidParameterError(f"n_a={data.shape[0]} exceeds origin n_c={self.origin_n_c}")
        object.__setattr__(self, "data", data)

    @property
    def n_a(self) -> int:
        return self.data.shape[0]

    @property
    def n_t(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class NormalizationMeta:
    lo: float
    hi: float

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)) or self.hi <= self.lo:
            raise InvalidParameterError(f"normalization needs hi > lo, got lo={self.lo}, hi={self.hi}")

    @classmethod
    def fit(cls, matrices) -> NormalizationMeta:
        """Dataset-wide min/max over real and imaginary parts jointly."""
        parts = np.concatenate([np.concatenate([m.data.real.ravel(), m.data.imag.ravel()]) for m in matrices])
        lo, hi = float(parts.min()), float(parts.max())
        if hi <= lo:
            hi = lo + 1.0
        return cls(lo, hi)


@dataclass(frozen=True)
class RealCsiTensor:
    """Autoencoder I/O: ``[2, n_a, n_t]`` in [0, 1], real plane then imaginary."""

    data: np.ndarray
    norm_meta: NormalizationMeta

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[0] != 2:
            raise InvalidParameterError(f"real CSI tensor must be [2, n_a, n_t], got {data.shape}")
        if np.any(data < 0) or np.any(data > 1) or not np.all(np.isfinite(data)):
            raise InvalidParameterError("real CSI tensor entries must lie in [0, 1]")
        object.__setattr__(self, "data", data)


@dataclass(frozen=True)
class ChannelParams:
    n_c: int
    n_t: int
    num_paths: int = 3
    max_delay_taps: int = 4
    angle_spread: float = np.pi / 3
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_c", "n_t", "num_paths", "max_delay_taps"):
            if getattr(self, name) < 1:
                raise InvalidParameterError(f"{name} must be positive")
        if self.max_delay_taps > self.n_c:
            raise InvalidParameterError(
                f"max_delay_taps={self.max_delay_taps} exceeds n_c={self.n_c}"
            )
        if not 0 <= self.seed < 2**64:
            raise InvalidParameterError("seed must be an unsigned 64-bit integer")


def steering_vector(n_t: int, theta: float) -> np.ndarray:
    """Half-wavelength ULA response."""
    return np.exp(1j * np.pi * np.arange(n_t) * np.sin(theta))


def synthesize_channel(params: ChannelParams) -> CsiMatrix:
    """Tapped-delay multipath channel with on-grid delays and ULA steering.

    Delays are integers in ``[0, max_delay_taps)`` and the delay ramp is chosen
    so that a delay of ``d`` taps lands in angle-delay row ``d``.
    """
    params.validate()
    rng = np.random.default_rng(params.seed)
    center = rng.uniform(-np.pi / 3, np.pi / 3)
    angles = center + rng.uniform(-0.5, 0.5, params.num_paths) * params.angle_spread
    delays = rng.integers(0, params.max_delay_taps, params.num_paths)
    gains = (rng.standard_normal(params.num_paths) + 1j * rng.standard_normal(params.num_paths)) / np.sqrt(
        2 * params.num_paths
    )
    subcarriers = np.arange(params.n_c)
    h = np.zeros((params.n_c, params.n_t), dtype=np.complex128)
    for g, tau, theta in zip(gains, delays, angles):
        ramp = np.exp(2j * np.pi * subcarriers * tau / params.n_c)
        h += g * np.outer(ramp, steering_vector(params.n_t, theta))
    return CsiMatrix(h)


def dft_matrix(n: int) -> np.ndarray:
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) / np.sqrt(n)


def to_angle_delay(h: CsiMatrix, n_a: int) -> AngleDelayCsi:
    if not 1 <= n_a <= h.n_c:
        raise InvalidParameterError(f"n_a={n_a} must lie in [1, n_c={h.n_c}]")
    full = dft_matrix(h.n_c) @ h.data @ dft_matrix(h.n_t)
    return AngleDelayCsi(full[:n_a].copy(), origin_n_c=h.n_c)


def from_angle_delay(h_a: AngleDelayCsi) -> CsiMatrix:
    padded = np.zeros((h_a.origin_n_c, h_a.n_t), dtype=np.complex128)
    padded[: h_a.n_a] = h_a.data
    f_c, f_t = dft_matrix(h_a.origin_n_c), dft_matrix(h_a.n_t)
    return CsiMatrix(f_c.conj().T @ padded @ f_t.conj().T)


def normalize(h_a: AngleDelayCsi, meta: NormalizationMeta) -> RealCsiTensor:
    stacked = np.stack([h_a.data.real, h_a.data.imag])
    scaled = (stacked - meta.lo) / (meta.hi - meta.lo)
    return RealCsiTensor(np.clip(scaled, 0.0, 1.0), meta)


def denormalize(t: RealCsiTensor, origin_n_c: int | None = None) -> AngleDelayCsi:
    meta = t.norm_meta
    values = np.asarray(t.data, dtype=np.float64) * (meta.hi - meta.lo) + meta.lo
    n_a = values.shape[1]
    return AngleDelayCsi(values[0] + 1j * values[1], origin_n_c=origin_n_c or n_a)


def add_awgn(h: CsiMatrix, snr_db: float, seed: int) -> CsiMatrix:
    """Circularly-symmetric complex Gaussian noise at the requested SNR."""
    if not np.isfinite(snr_db):
        raise InvalidParameterError("snr_db must be finite")
    rng = np.random.default_rng(seed)
    signal_power = float(np.mean(np.abs(h.data) ** 2))
    noise_var = signal_power / 10 ** (snr_db / 10)
    noise = rng.standard_normal(h.data.shape) + 1j * rng.standard_normal(h.data.shape)
    return CsiMatrix(h.data + np.sqrt(noise_var / 2) * noise)


def make_dataset(
    samples: int,
    n_c: int,
    n_t: int,
    n_a: int,
    num_paths: int = 3,
    max_delay_taps: int = 4,
    seed: int = 0,
    snr_db: float | None = None,
) -> tuple[list[RealCsiTensor], NormalizationMeta]:
    """Synthesize, transform and normalise a seed-pinned dataset.

    Sample ``i`` uses channel seed ``seed * 1_000_003 + i``; noise, when
    requested, is drawn from a separate stream offset by 7919.
    """
    mats = []
    for i in range(samples):
        s = seed * 1_000_003 + i
        h = synthesize_channel(ChannelParams(n_c, n_t, num_paths, max_delay_taps, seed=s))
        if snr_db is not None:
            h = add_awgn(h, snr_db, seed=s + 7_919)
        mats.append(to_angle_delay(h, n_a))
    meta = NormalizationMeta.fit(mats)
    return [normalize(m, meta) for m in mats], meta


def save_dataset(path, samples: list[RealCsiTensor], meta: NormalizationMeta) -> None:
    if samples:
        shape = samples[0].data.shape
        if any(s.data.shape != shape for s in samples):
            raise InvalidParameterError("all samples must share one shape")
        _, n_a, n_t = shape
        body = np.stack([s.data for s in samples]).astype("<f4").tobytes()
    else:
        n_a = n_t = 0
        body = b""
    header = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n_a, n_t, len(samples), meta.lo, meta.hi)
    Path(path).write_bytes(header + body)


def load_dataset(path) -> tuple[list[RealCsiTensor], NormalizationMeta]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n_a, n_t, count, lo, hi = _HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = count * 2 * n_a * n_t * 4
    if len(raw) - _HEADER.size != expected:
        raise FormatError(f"{path}: expected {expected} sample bytes, found {len(raw) - _HEADER.size}")
    try:
        meta = NormalizationMeta(lo, hi)
    except InvalidParameterError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if count == 0:
        return [], meta
    arr = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(count, 2, n_a, n_t)
    try:
        return [RealCsiTensor(a.astype(np.float32), meta) for a in arr], meta
    except InvalidParameterError as exc:
        raise FormatError(f"{path}: {exc}") from exc
