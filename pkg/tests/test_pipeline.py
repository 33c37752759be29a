import numpy as np
import pytest
import torch

from tclnet.codec import decode_payload, encode_payload, quantize
from tclnet.csi import ChannelParams, NormalizationMeta, RealCsiTensor, denormalize, normalize, synthesize_channel, to_angle_delay
from tclnet.errors import FormatError, IncompatibleModelError, InvalidParameterError, TclNetError
from tclnet.lossy import LossyAutoencoder, LossyModelConfig, encode, reconstruct, train_lossy
from tclnet.pipeline import (
    CSV_HEADER,
    NMSE_FLOOR_DB,
    LatencyParams,
    RdcPoint,
    TclNetCodec,
    bit_rate,
    compress,
    compress_tensor,
    decode_latent,
    decompress,
    decompress_tensor,
    fixed_length_bits,
    modeled_latency,
    modeled_latency_approx,
    nmse,
    rdc_csv,
    rdc_sweep,
    svd_baseline,
)
from tclnet.probmodels import Alphabet, FactorizedModel, fit_fm


def test_nmse_examples():
    h = np.array([[1.0, 0.0]])
    assert nmse(h, np.array([[0.9, 0.0]])) == pytest.approx(-20.0, abs=1e-9)
    assert nmse(h, np.zeros((1, 2))) == pytest.approx(0.0, abs=1e-12)
    assert nmse(h, h) == NMSE_FLOOR_DB


def test_nmse_averages_ratios_over_samples():
    h = np.array([[[1.0, 0.0]], [[2.0, 0.0]]])
    h_hat = np.array([[[0.9, 0.0]], [[0.0, 0.0]]])
    assert nmse(h, h_hat) == pytest.approx(10 * np.log10((0.01 + 1.0) / 2), abs=1e-9)


def test_nmse_errors():
    with pytest.raises(InvalidParameterError):
        nmse(np.zeros((1, 2)), np.zeros((1, 2)))
    with pytest.raises(InvalidParameterError):
        nmse(np.ones((1, 2)), np.ones((1, 3)))


@pytest.mark.parametrize("den,expected", [(8, 0.875), (16, 0.4375)])
def test_fixed_length_bit_rate(den, expected):
    cfg = LossyModelConfig(cr_den=den)
    assert bit_rate(fixed_length_bits(7, cfg.latent_len), 2 * 16 * 16) == expected


def test_bit_rate_edges():
    assert bit_rate(0, 512) == 0
    with pytest.raises(InvalidParameterError):
        bit_rate(1, 0)


def test_modeled_latency_examples():
    p = LatencyParams(t_lm=10e-3, t_fm=0.1e-3)
    assert modeled_latency(p, 100, 0.5) == pytest.approx(0.5, abs=1e-15)
    assert modeled_latency(p, 100, 1.0) == pytest.approx(100 * 0.1e-3, abs=1e-15)
    assert modeled_latency(p, 100, 0.0) == pytest.approx(100 * 10e-3, abs=1e-15)
    assert modeled_latency_approx(p, 100, 0.5) == pytest.approx(0.5, abs=1e-15)


def test_modeled_latency_shape():
    p = LatencyParams(t_lm=1.0, t_fm=0.25)
    cs = np.linspace(0, 1, 101)
    vals = [modeled_latency(p, 10, c) for c in cs]
    cross = 1.0 / 1.25
    for c, v in zip(cs, vals):
        assert v == pytest.approx(max((1 - c) * 10, c * 2.5))
    before = [v for c, v in zip(cs, vals) if c <= cross]
    assert all(a >= b for a, b in zip(before, before[1:]))


def test_latency_params_positive():
    with pytest.raises(InvalidParameterError):
        LatencyParams(0.0, 1.0)


def test_svd_full_rank_and_rank_one():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((10, 2, 2, 2))
    assert svd_baseline(x, 8) == NMSE_FLOOR_DB
    rank1 = np.outer(rng.standard_normal(6), rng.standard_normal(8)).reshape(6, 2, 2, 2)
    assert svd_baseline(rank1, 1) == NMSE_FLOOR_DB
    with pytest.raises(InvalidParameterError):
        svd_baseline(x, 9)


def test_svd_matches_independent_projection():
    # oracle: eigenvectors of the Gram matrix give the same subspace as the SVD
    rng = np.random.default_rng(1)
    x = rng.standard_normal((30, 2, 3, 2))
    flat = x.reshape(30, -1)
    w, v = np.linalg.eigh(flat.T @ flat)
    basis = v[:, np.argsort(w)[::-1][:5]]
    approx = flat @ basis @ basis.T
    expected = 10 * np.log10(np.mean(np.sum((flat - approx) ** 2, 1) / np.sum(flat**2, 1)))
    assert svd_baseline(x, 5) == pytest.approx(expected, abs=1e-9)


def test_svd_uses_zero_level_of_normalised_data():
    meta = NormalizationMeta(-1.0, 3.0)
    rng = np.random.default_rng(2)
    raw = rng.uniform(-1, 3, (12, 2, 2, 2))
    samples = [RealCsiTensor((r + 1) / 4, meta) for r in raw]
    flat = np.stack([s.data for s in samples]).reshape(12, -1)
    _, _, vt = np.linalg.svd(flat, full_matrices=False)
    approx = flat @ vt[:3].T @ vt[:3]
    # errors and energies in the physical domain: subtract the zero level 0.25
    err = np.sum((4 * (flat - approx)) ** 2, 1)
    energy = np.sum((4 * (flat - 0.25)) ** 2, 1)
    assert svd_baseline(samples, 3) == pytest.approx(10 * np.log10(np.mean(err / energy)), abs=1e-9)


# end to end with a briefly trained small model


def _dataset(n, n_a=8, n_t=8, seed=0):
    mats = [
        to_angle_delay(synthesize_channel(ChannelParams(16, n_t, num_paths=2, max_delay_taps=4, seed=seed + i)), n_a)
        for i in range(n)
    ]
    meta = NormalizationMeta.fit(mats)
    return mats, [normalize(m, meta) for m in mats], meta


@pytest.fixture(scope="module")
def toy():
    mats, samples, meta = _dataset(24)
    cfg = LossyModelConfig(n_a=8, n_t=8, r=4, window=2, heads=1, width=4)
    model = train_lossy(np.stack([s.data for s in samples]), cfg, epochs=15, warmup=2, batch_size=8).model
    q_all = [quantize(encode(s, model), 7).symbols for s in samples]
    fm = fit_fm([bytes(q.astype(np.uint8)) for q in q_all], Alphabet(7))
    codec = TclNetCodec(model, fm, fm, meta, n_bits=7, c=0.5, model_ids={"lossy": "a" * 64})
    return mats, samples, codec


def test_round_trip_shape_and_range(toy):
    mats, samples, codec = toy
    payload = compress(mats[0], codec)
    x = decompress_tensor(payload, codec)
    assert x.shape == (2, 8, 8)
    assert np.all((x > 0) & (x < 1))
    h = decompress(payload, codec, origin_n_c=16)
    assert h.data.shape == (8, 8) and h.origin_n_c == 16


def test_lossless_stage_is_exact(toy):
    _, samples, codec = toy
    for c in (0.0, 0.5, 1.0):
        payload, q = compress_tensor(samples[1], codec, c)
        back = decode_latent(decode_payload(encode_payload(payload)), codec)
        assert np.array_equal(back.symbols, q.symbols)
        assert (back.z_min, back.z_max) == (q.z_min, q.z_max)


def test_all_fm_payload_has_empty_lm_stream(toy):
    _, samples, codec = toy
    payload, _ = compress_tensor(samples[2], codec, 1.0)
    assert payload.b_l.nbits == 0


def test_quantized_nmse_close_to_unquantized(toy):
    mats, samples, codec = toy
    x = np.stack([s.data for s in samples])
    plain = [denormalize(RealCsiTensor(r, codec.meta)) for r in np.clip(reconstruct(codec.model, x), 0, 1)]
    coded = [decompress(compress(m, codec), codec) for m in mats]
    truth = [denormalize(s) for s in samples]
    assert abs(nmse(truth, coded) - nmse(truth, plain)) <= 0.5


def test_hash_mismatch_refused(toy):
    mats, _, codec = toy
    payload = compress(mats[0], codec)
    with pytest.raises(IncompatibleModelError):
        decompress(payload, codec, model_ids={"lossy": "b" * 64})


def test_payload_for_other_config_refused(toy):
    _, samples, codec = toy
    payload, _ = compress_tensor(samples[0], codec)
    other = TclNetCodec(codec.model, FactorizedModel.uniform(Alphabet(6)), codec.context, codec.meta, n_bits=6)
    with pytest.raises(IncompatibleModelError):
        decode_latent(payload, other)


def test_corrupted_payload_structured_error(toy):
    mats, _, codec = toy
    raw = encode_payload(compress(mats[3], codec))
    with pytest.raises(FormatError):
        decode_payload(raw[:-2])
    for i in range(0, len(raw), 3):
        bad = bytearray(raw)
        bad[i] ^= 0xA5
        try:
            decompress(decode_payload(bytes(bad)), codec)
        except TclNetError:
            pass


def test_sweep_nmse_identical_across_c(toy):
    _, samples, codec = toy
    lat = LatencyParams(1e-3, 1e-5)
    points = rdc_sweep(codec, [0.0, 0.5, 1.0], samples[:4], latency=lat, runs=1)
    assert len({p.nmse_db for p in points}) == 1
    for p in points:
        assert p.bit_rate >= 0 and p.decode_wall_time > 0
        assert p.bit_rate_with_overhead > p.bit_rate
        assert p.modeled_latency == modeled_latency(lat, codec.model.cfg.latent_len, p.c)


def _without_timing(csv):
    return [",".join(line.split(",")[:4]) for line in csv.splitlines()]


def test_sweep_csv_stable(toy):
    _, samples, codec = toy
    lat = LatencyParams(1e-3, 1e-5)
    a = rdc_csv(rdc_sweep(codec, [0.25, 0.75], samples[:3], latency=lat, runs=1))
    b = rdc_csv(rdc_sweep(codec, [0.25, 0.75], samples[:3], latency=lat, runs=1))
    assert a.splitlines()[0] == CSV_HEADER
    assert len(a.splitlines()) == 3
    assert _without_timing(a) == _without_timing(b)


def test_csv_six_significant_digits():
    csv = rdc_csv([RdcPoint(0.5, 1 / 3, 0.5, -12.3456789, 0.0012345678, 0.002)])
    assert csv.splitlines()[1] == "0.5,0.333333,0.5,-12.3457,1.23457,2"


def test_sweep_needs_samples(toy):
    with pytest.raises(InvalidParameterError):
        rdc_sweep(toy[2], [0.5], [])


def test_untrained_model_roundtrip_uses_fresh_weights():
    torch.manual_seed(0)
    model = LossyAutoencoder(LossyModelConfig(n_a=8, n_t=8, r=4, window=2, heads=1, width=4)).eval()
    _, samples, meta = _dataset(2, seed=50)
    fm = FactorizedModel.uniform(Alphabet(4))
    codec = TclNetCodec(model, fm, fm, meta, n_bits=4, c=0.25)
    payload, q = compress_tensor(samples[0], codec)
    assert payload.stream_bits == 4 * q.symbols.size + 2
    assert np.array_equal(decode_latent(payload, codec).symbols, q.symbols)
