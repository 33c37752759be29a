"""End-to-end compression, metrics, the decode-latency model and sweeps."""
from __future__ import annotations

import io
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from tclnet.codec.hybrid import hybrid_decode, hybrid_encode
from tclnet.codec.payload import CompressedPayload
from tclnet.codec.quantize import QuantizedSymbols, dequantize, quantize
from tclnet.csi import AngleDelayCsi, NormalizationMeta, RealCsiTensor, denormalize, normalize
from tclnet.errors import IncompatibleModelError, InvalidParameterError, TclNetError
from tclnet.lossy import LossyAutoencoder, decode, encode
from tclnet.probmodels.base import FactorizedModel

NMSE_FLOOR_DB = -300.0


# ---------------------------------------------------------------------------
# metrics


def _complex_batch(x) -> np.ndarray:
    if isinstance(x, AngleDelayCsi):
        return x.data[None]
    if isinstance(x, (list, tuple)):
        return np.stack([_complex_batch(v)[0] for v in x])
    arr = np.asarray(x)
    return arr[None] if arr.ndim == 2 else arr


def nmse(h, h_hat) -> float:
    """``10 log10 E[||H - H_hat||^2 / ||H||^2]`` over samples, floored at -300 dB."""
    a, b = _complex_batch(h), _complex_batch(h_hat)
    if a.shape != b.shape:
        raise InvalidParameterError(f"shape mismatch {a.shape} vs {b.shape}")
    axes = tuple(range(1, a.ndim))
    power = np.sum(np.abs(a) ** 2, axis=axes)
    if np.any(power == 0):
        raise InvalidParameterError("reference CSI has zero energy")
    ratio = float(np.mean(np.sum(np.abs(a - b) ** 2, axis=axes) / power))
    if ratio <= 0:
        return NMSE_FLOOR_DB
    return max(10.0 * np.log10(ratio), NMSE_FLOOR_DB)


def bit_rate(total_bits: float, n: int) -> float:
    """Bits per real-valued CSI entry."""
    if n <= 0:
        raise InvalidParameterError("N must be positive")
    return total_bits / n


def fixed_length_bits(n_bits: int, latent_len: int) -> int:
    return n_bits * latent_len


@dataclass(frozen=True)
class LatencyParams:
    t_lm: float
    t_fm: float
    t_ad: float = 1e-6

    def __post_init__(self):
        if min(self.t_lm, self.t_fm, self.t_ad) <= 0:
            raise InvalidParameterError("latency parameters must be positive")


def modeled_latency(params: LatencyParams, z: int, c: float) -> float:
    """LM and FM streams decode side by side; the slower limb sets the latency."""
    return max((1 - c) * z * params.t_lm, c * z * params.t_fm)


def modeled_latency_approx(params: LatencyParams, z: int, c: float) -> float:
    """The LM limb alone, valid when the FM is far cheaper per token."""
    return (1 - c) * z * params.t_lm


def svd_baseline(samples, latent_len: int) -> float:
    """NMSE of the best rank-``latent_len`` linear projection of the flattened samples.

    ``samples`` is ``[N, 2, n_a, n_t]`` in the normalised domain; the error is
    measured after denormalisation, i.e. relative to the zero level
    ``-lo / (hi - lo)`` when a meta is attached (``RealCsiTensor`` list),
    otherwise on the raw arrays.
    """
    if len(samples) and isinstance(samples[0], RealCsiTensor):
        meta = samples[0].norm_meta
        x = np.stack([s.data for s in samples]).astype(np.float64)
        zero = -meta.lo / (meta.hi - meta.lo)
    else:
        x = np.asarray(samples, dtype=np.float64)
        zero = 0.0
    flat = x.reshape(len(x), -1)
    if not 1 <= latent_len <= flat.shape[1]:
        raise InvalidParameterError(f"latent_len={latent_len} outside [1, {flat.shape[1]}]")
    _, _, vt = np.linalg.svd(flat, full_matrices=False)
    basis = vt[:latent_len]
    approx = (flat @ basis.T) @ basis
    return nmse((flat - zero)[:, None], (approx - zero)[:, None])


# ---------------------------------------------------------------------------
# codec


@dataclass
class TclNetCodec:
    """Everything both ends must share: weights, models, quantizer depth and c.

    ``model_ids`` maps component name to checkpoint sha256; a payload made
    under different ids is refused.
    """

    model: LossyAutoencoder
    fm: FactorizedModel
    context: object
    meta: NormalizationMeta
    n_bits: int = 7
    c: float = 0.5
    model_ids: dict = field(default_factory=dict)

    def check_ids(self, ids: dict) -> None:
        for name, digest in ids.items():
            mine = self.model_ids.get(name)
            if mine is not None and mine != digest:
                raise IncompatibleModelError(f"{name} checkpoint mismatch: payload {digest}, local {mine}")


def _stage(name: str, fn, *args):
    try:
        return fn(*args)
    except TclNetError as exc:
        raise type(exc)(f"{name}: {exc}") from exc


def compress_tensor(x: RealCsiTensor, codec: TclNetCodec, c: float | None = None) -> tuple[CompressedPayload, QuantizedSymbols]:
    latent = _stage("lossy encode", encode, x, codec.model)
    q = _stage("quantize", quantize, latent, codec.n_bits)
    c = codec.c if c is None else c
    result = _stage("entropy code", hybrid_encode, q, codec.context, codec.fm, c)
    return result.payload, q


def compress(h_a: AngleDelayCsi, codec: TclNetCodec, c: float | None = None) -> CompressedPayload:
    x = _stage("normalize", normalize, h_a, codec.meta)
    return compress_tensor(x, codec, c)[0]


def decode_latent(payload: CompressedPayload, codec: TclNetCodec) -> QuantizedSymbols:
    if payload.n_bits != codec.n_bits:
        raise IncompatibleModelError(f"payload uses {payload.n_bits}-bit symbols, codec {codec.n_bits}")
    if payload.z != codec.model.cfg.latent_len:
        raise IncompatibleModelError(f"payload has {payload.z} symbols, model latent is {codec.model.cfg.latent_len}")
    return _stage("entropy decode", hybrid_decode, payload, codec.context, codec.fm)


def decompress_tensor(payload: CompressedPayload, codec: TclNetCodec) -> np.ndarray:
    q = decode_latent(payload, codec)
    return decode(dequantize(q), codec.model)


def decompress(payload: CompressedPayload, codec: TclNetCodec, model_ids: dict | None = None, origin_n_c: int | None = None) -> AngleDelayCsi:
    if model_ids:
        codec.check_ids(model_ids)
    x = decompress_tensor(payload, codec)
    return denormalize(RealCsiTensor(np.clip(x, 0.0, 1.0), codec.meta), origin_n_c)


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class RdcPoint:
    c: float
    bit_rate: float
    bit_rate_with_overhead: float
    nmse_db: float
    decode_wall_time: float
    modeled_latency: float


CSV_HEADER = "c,bit_rate,bit_rate_with_overhead,nmse_db,decode_ms_measured,decode_ms_modeled"


def _median_time(fn, runs: int) -> float:
    fn()
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def calibrate_latency(codec: TclNetCodec, sample: RealCsiTensor, runs: int = 3) -> LatencyParams:
    """Per-token decode cost of each limb, timed on an all-LM and an all-FM payload."""
    z = codec.model.cfg.latent_len
    all_lm, _ = compress_tensor(sample, codec, 0.0)
    all_fm, _ = compress_tensor(sample, codec, 1.0)
    t_lm = _median_time(lambda: decode_latent(all_lm, codec), runs) / z
    t_fm = _median_time(lambda: decode_latent(all_fm, codec), runs) / z
    return LatencyParams(t_lm=t_lm, t_fm=t_fm)


def rdc_sweep(codec: TclNetCodec, c_values, samples: list[RealCsiTensor], latency: LatencyParams | None = None, runs: int = 5) -> list[RdcPoint]:
    """Rate, distortion and decode time for each ``c``.

    Decode time is the median over ``runs`` timed lossless decodes of the
    first sample after one warm-up.
    """
    if not samples:
        raise InvalidParameterError("sweep needs at least one sample")
    cfg = codec.model.cfg
    n = 2 * cfg.n_a * cfg.n_t
    if latency is None:
        latency = calibrate_latency(codec, samples[0])
    points = []
    for c in c_values:
        payloads, recon = [], []
        for x in samples:
            payload, _ = compress_tensor(x, codec, c)
            payloads.append(payload)
            recon.append(denormalize(RealCsiTensor(np.clip(decompress_tensor(payload, codec), 0, 1), codec.meta)))
        truth = [denormalize(x) for x in samples]
        wall = _median_time(lambda: decode_latent(payloads[0], codec), runs)
        points.append(
            RdcPoint(
                c=float(c),
                bit_rate=float(np.mean([bit_rate(p.stream_bits, n) for p in payloads])),
                bit_rate_with_overhead=float(np.mean([bit_rate(p.total_bits, n) for p in payloads])),
                nmse_db=nmse(truth, recon),
                decode_wall_time=wall,
                modeled_latency=modeled_latency(latency, cfg.latent_len, c),
            )
        )
    return points


def rdc_csv(points: list[RdcPoint]) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    for p in points:
        row = (p.c, p.bit_rate, p.bit_rate_with_overhead, p.nmse_db, 1e3 * p.decode_wall_time, 1e3 * p.modeled_latency)
        buf.write(",".join(f"{v:.6g}" for v in row) + "\n")
    return buf.getvalue()
