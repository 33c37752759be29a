import socket
import threading
import time

import httpx
import numpy as np
import pytest
import torch
from fastapi import FastAPI
from fastapi.testclient import TestClient
from hypothesis import given, settings
from hypothesis import strategies as st

from tclnet.codec.entropy import entropy_bits, factorized_entropy
from tclnet.errors import FormatError, InvalidParameterError, ProtocolError, ProviderUnavailableError
from tclnet.probmodels import (
    Alphabet,
    ByteLM,
    FactorizedModel,
    LlmProvider,
    LmConfig,
    LmProvider,
    ascii_detokenize,
    ascii_tokenize,
    build_prompt,
    cross_entropy_bits,
    fit_fm,
    fm_next,
    llm_next,
    lm_forward,
    load_lm,
    logprobs_to_distribution,
    restrict_to_alphabet,
    save_lm,
    train_lm,
)
from tclnet.probmodels.mock_llm import create_app


def markov_corpus(n_seqs, length, flip, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_seqs):
        s = np.empty(length, dtype=np.uint8)
        s[0] = rng.integers(2)
        flips = rng.random(length - 1) < flip
        for k in range(1, length):
            s[k] = s[k - 1] ^ flips[k - 1]
        out.append(s.tobytes())
    return out


def binary_entropy(p):
    return float(-p * np.log2(p) - (1 - p) * np.log2(1 - p))


# flip probability whose binary entropy is 0.5 bits
FLIP = 0.11002786443835955


def test_flip_constant_has_half_bit_entropy():
    assert binary_entropy(FLIP) == pytest.approx(0.5, abs=1e-9)


# tokenization


def test_tokenize_identity_embedding():
    assert ascii_tokenize([0, 5, 127], 7) == bytes([0, 5, 127])


def test_tokenize_round_trip_random():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        s = rng.integers(0, 1 << n, size=int(rng.integers(0, 50)))
        assert np.array_equal(ascii_detokenize(ascii_tokenize(s, n), n), s)


def test_detokenize_out_of_alphabet():
    with pytest.raises(FormatError):
        ascii_detokenize(bytes([3, 200]), 7)


def test_tokenize_rejects_bad_symbols():
    with pytest.raises(InvalidParameterError):
        ascii_tokenize([4], 2)
    with pytest.raises(InvalidParameterError):
        ascii_tokenize([0], 9)


def test_alphabet_bounds():
    assert Alphabet(8).size == 256
    for n in (0, 9):
        with pytest.raises(InvalidParameterError):
            Alphabet(n)


# factorized model


def test_fit_fm_all_zero_corpus():
    fm = fit_fm([bytes(5), bytes(3)], Alphabet(1))
    np.testing.assert_allclose(fm.pi, [9 / 10, 1 / 10], rtol=0, atol=1e-15)


def test_fit_fm_uniform_corpus():
    fm = fit_fm([bytes(range(16)) * 3], Alphabet(4))
    np.testing.assert_allclose(fm.pi, np.full(16, 1 / 16), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.binary(max_size=40), min_size=1, max_size=5))
def test_fit_fm_normalized(corpus):
    fm = fit_fm(corpus, Alphabet(8))
    assert abs(fm.pi.sum() - 1) <= 1e-9
    assert np.all(fm.pi > 0)


def test_fit_fm_empty_corpus():
    with pytest.raises(InvalidParameterError):
        fit_fm([], Alphabet(3))


def test_fm_invariants_enforced():
    with pytest.raises(InvalidParameterError):
        FactorizedModel(np.array([1.0, 0.0]), Alphabet(1))
    with pytest.raises(InvalidParameterError):
        FactorizedModel(np.array([0.5, 0.6]), Alphabet(1))


def test_fm_next_context_free():
    fm = fit_fm([bytes([0, 1, 1, 3, 2, 1])], Alphabet(2))
    a, b = fm_next(fm, [0, 0, 1]), fm_next(fm, [3])
    assert np.array_equal(a, b)
    assert np.array_equal(a, fm.pi)
    assert np.array_equal(fm.session().advance([1, 2]), fm.pi)
    assert entropy_bits(a) == pytest.approx(factorized_entropy(fm), abs=1e-12)


def test_fm_dict_round_trip():
    fm = fit_fm([bytes([0, 1, 1, 3])], Alphabet(2))
    back = FactorizedModel.from_dict(fm.to_dict())
    assert np.array_equal(back.pi, fm.pi) and back.alphabet == fm.alphabet


def test_restrict_to_alphabet():
    p = np.array([0.1, 0.3, 0.6, 0.0])
    np.testing.assert_allclose(restrict_to_alphabet(p, 2), [0.25, 0.75])


# language model


def _tiny_lm(seed=0, max_len=64):
    torch.manual_seed(seed)
    return ByteLM(LmConfig(embed=16, blocks=2, heads=2, ffn=32, max_len=max_len)).eval()


def test_lm_config_validation():
    with pytest.raises(InvalidParameterError):
        LmConfig(embed=10, heads=4)
    with pytest.raises(InvalidParameterError):
        LmConfig(blocks=0)
    big = LmConfig.full_scale()
    assert (big.embed, big.blocks, big.heads, big.ffn) == (256, 4, 8, 1024)


def test_lm_outputs_are_distributions():
    p = lm_forward(_tiny_lm(), bytes([1, 2, 3, 250, 0]))
    assert p.shape == (5, 256)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)


def _perturbed_lm():
    # a fresh LM has a zero head; randomise it so the check is not vacuous
    model = _tiny_lm(1)
    with torch.no_grad():
        model.head.weight.normal_()
    return model


def test_lm_causal_prefix_invariance():
    model = _perturbed_lm()
    rng = np.random.default_rng(0)
    for _ in range(10):
        toks = rng.integers(0, 256, 20)
        k = int(rng.integers(0, 20))
        other = toks.copy()
        other[k:] = rng.integers(0, 256, 20 - k)
        a, b = lm_forward(model, toks), lm_forward(model, other)
        assert np.max(np.abs(a[: k + 1] - b[: k + 1])) <= 1e-9
    assert np.max(np.abs(a - b)) > 0


def test_lm_position_zero_uses_start_embedding():
    model = _perturbed_lm()
    a = lm_forward(model, [7, 1])[0]
    b = lm_forward(model, [200, 9])[0]
    assert np.max(np.abs(a - b)) <= 1e-9


def test_lm_over_length():
    with pytest.raises(InvalidParameterError):
        lm_forward(_tiny_lm(max_len=8), bytes(9))


def test_lm_session_matches_teacher_forcing():
    model = _perturbed_lm()
    toks = list(np.random.default_rng(1).integers(0, 256, 12))
    full = lm_forward(model, toks)
    sess = LmProvider(model, Alphabet(8)).session()
    rows = [sess.advance([])]
    rows.append(sess.advance(toks[:3]))
    rows.append(sess.advance(toks[3:4]))
    rows.append(sess.advance(toks[4:11]))
    # session rows predict the tokens at positions 0, 3, 4 and 11
    for row, pos in zip(rows, (0, 3, 4, 11)):
        np.testing.assert_allclose(row, full[pos], atol=1e-5)


def test_lm_session_rejects_overflow():
    sess = LmProvider(_tiny_lm(max_len=4), Alphabet(8)).session()
    sess.advance([1, 2])
    with pytest.raises(InvalidParameterError):
        sess.advance([1, 2])


def test_initial_loss_is_eight_bits():
    res = train_lm([bytes(range(40))], LmConfig(embed=16, blocks=1, heads=2, ffn=32, max_len=64), iters=1, batch=2)
    assert abs(res.losses[0] - 8.0) <= 0.5


def test_train_empty_corpus():
    with pytest.raises(InvalidParameterError):
        train_lm([], iters=1)
    with pytest.raises(InvalidParameterError):
        train_lm([b""], iters=1)


def test_train_deterministic():
    corpus = markov_corpus(4, 32, 0.2, 0)
    cfg = LmConfig(embed=16, blocks=1, heads=2, ffn=32, max_len=64)
    a = train_lm(corpus, cfg, iters=5, batch=4, seed=3)
    b = train_lm(corpus, cfg, iters=5, batch=4, seed=3)
    assert a.losses == b.losses


def test_uniform_corpus_converges_to_n_bits():
    n_bits = 3
    rng = np.random.default_rng(0)
    corpus = [rng.integers(0, 8, 128).astype(np.uint8).tobytes() for _ in range(64)]
    held = [rng.integers(0, 8, 128).astype(np.uint8).tobytes() for _ in range(32)]
    cfg = LmConfig(embed=32, blocks=1, heads=2, ffn=64, max_len=128)
    model = train_lm(corpus, cfg, iters=150, batch=16, lr=3e-3).model
    assert abs(cross_entropy_bits(model, held) - n_bits) <= 0.1


@pytest.fixture(scope="module")
def markov_lm():
    cfg = LmConfig(embed=32, blocks=1, heads=2, ffn=64, max_len=128)
    return train_lm(markov_corpus(64, 128, FLIP, 1), cfg, iters=200, batch=16, lr=3e-3).model


def test_markov_corpus_reaches_transition_entropy(markov_lm):
    held = markov_corpus(32, 128, FLIP, 2)
    ce = cross_entropy_bits(markov_lm, held)
    assert ce <= 0.7
    # structured data: strictly below the marginal entropy, which is 1 bit here
    fm = fit_fm(held, Alphabet(1))
    assert ce < factorized_entropy(fm)


def test_held_out_within_fm_entropy_margin(markov_lm):
    held = markov_corpus(16, 128, FLIP, 3)
    fm = fit_fm(held, Alphabet(1))
    assert cross_entropy_bits(markov_lm, held) <= factorized_entropy(fm) + 0.2


def test_alternating_pattern_is_learned():
    pattern = bytes([0, 1] * 32)
    cfg = LmConfig(embed=32, blocks=1, heads=2, ffn=64, max_len=64)
    model = train_lm([pattern], cfg, iters=120, batch=4, lr=3e-3).model
    p = lm_forward(model, pattern)
    correct = p[np.arange(len(pattern)), list(pattern)]
    assert np.all(correct[4:] > 0.9)


def test_lm_save_load(tmp_path):
    model = _perturbed_lm()
    digest = save_lm(tmp_path, model)
    loaded, digest2 = load_lm(tmp_path)
    assert digest == digest2
    toks = bytes([5, 6, 7])
    assert np.array_equal(lm_forward(model, toks), lm_forward(loaded, toks))


# prompt


def test_prompt_deterministic_and_literal():
    a = build_prompt(Alphabet(7), 128)
    assert a == build_prompt(Alphabet(7), 128)
    assert "128 byte symbols" in a
    assert "[0,127]" in a
    assert len(a.encode()) < 2048
    assert "\n" not in a


def test_prompt_budget_at_extremes():
    assert len(build_prompt(Alphabet(8), 10**9).encode()) < 2048


# external provider


def _provider(app, **kw):
    return LlmProvider(Alphabet(kw.pop("n_bits", 3)), client=TestClient(app), backoff=0.0, **kw)


def test_llm_uniform_mock():
    p = llm_next(_provider(create_app("uniform")), "x", [1, 2])
    np.testing.assert_allclose(p, np.full(8, 1 / 8), atol=1e-12)


def test_llm_out_of_alphabet_falls_back_to_uniform():
    p = llm_next(_provider(create_app("oob")), "x", [])
    np.testing.assert_allclose(p, np.full(8, 1 / 8), atol=1e-12)


def test_llm_fm_echo_matches_pi():
    pi = np.array([0.5, 0.2, 0.1, 0.1, 0.05, 0.03, 0.01, 0.01])
    prov = _provider(create_app("fm-echo", pi=pi))
    np.testing.assert_allclose(prov.session(10).advance([3, 4]), pi, atol=1e-12)


def test_llm_markov_mock_follows_context():
    t = np.array([[0.9, 0.1], [0.2, 0.8]])
    prov = _provider(create_app("markov", transition=t), n_bits=1)
    sess = prov.session(4)
    np.testing.assert_allclose(sess.advance([]), [0.5, 0.5], atol=1e-12)
    np.testing.assert_allclose(sess.advance([1]), t[1], atol=1e-12)
    np.testing.assert_allclose(sess.advance([0]), t[0], atol=1e-12)
    rows = prov.vocab_distributions([1, 0, 0])
    np.testing.assert_allclose(rows, [[0.5, 0.5], t[1], t[0]], atol=1e-12)


def test_missing_entries_get_floor():
    p = logprobs_to_distribution({"0": 0.0}, Alphabet(2))
    floor = 2.0**-16
    np.testing.assert_allclose(p, np.array([1, floor, floor, floor]) / (1 + 3 * floor))
    assert np.all(p >= floor / 2)


def test_out_of_alphabet_mass_redistributed_proportionally():
    lp = {"0": np.log(0.3), "1": np.log(0.1), "9": np.log(0.6)}
    p = logprobs_to_distribution(lp, Alphabet(1))
    np.testing.assert_allclose(p, [0.75, 0.25])


@pytest.mark.parametrize(
    "logprobs",
    ["nope", {"x": -1.0}, {"300": -1.0}, {"1": 0.5}, {"1": "a"}, {"1": float("nan")}, {"1": True}],
)
def test_malformed_logprobs(logprobs):
    with pytest.raises(ProtocolError):
        logprobs_to_distribution(logprobs, Alphabet(2))


def _flaky_app(fail_times, status=503):
    app = FastAPI()
    app.state.calls = 0

    @app.post("/v1/next_token")
    def next_token() -> dict:
        app.state.calls += 1
        if app.state.calls <= fail_times:
            from fastapi import HTTPException

            raise HTTPException(status_code=status)
        return {"logprobs": {"0": 0.0}}

    return app


def test_llm_retries_then_succeeds():
    app = _flaky_app(2)
    p = llm_next(_provider(app, retries=2), "x", [])
    assert app.state.calls == 3
    assert p[0] > 0.99


def test_llm_unavailable_after_retries():
    app = _flaky_app(10)
    with pytest.raises(ProviderUnavailableError):
        llm_next(_provider(app, retries=2), "x", [])
    assert app.state.calls == 3


def test_llm_client_error_is_protocol_error():
    app = _flaky_app(10, status=422)
    with pytest.raises(ProtocolError):
        llm_next(_provider(app, retries=2), "x", [])
    assert app.state.calls == 1


def test_llm_bad_body():
    app = FastAPI()

    @app.post("/v1/next_token")
    def next_token() -> dict:
        return {"probs": {}}

    with pytest.raises(ProtocolError):
        llm_next(_provider(app), "x", [])


def test_llm_transport_error_unavailable():
    def refuse(request):
        raise httpx.ConnectError("refused", request=request)

    client = httpx.Client(transport=httpx.MockTransport(refuse), base_url="http://mock")
    prov = LlmProvider(Alphabet(2), client=client, retries=1, backoff=0.0)
    with pytest.raises(ProviderUnavailableError):
        prov.next_distribution("x", [])


def test_mock_rejects_bad_base64():
    client = TestClient(create_app("uniform"))
    resp = client.post("/v1/next_token", json={"prompt": "", "context_bytes": "!!", "alphabet_bits": 2})
    assert resp.status_code == 400


def test_mock_over_real_socket():
    import uvicorn

    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    server = uvicorn.Server(uvicorn.Config(create_app("uniform"), host="127.0.0.1", port=port, log_level="error"))
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    try:
        deadline = time.time() + 10
        while not server.started and time.time() < deadline:
            time.sleep(0.02)
        prov = LlmProvider(Alphabet(2), url=f"http://127.0.0.1:{port}")
        np.testing.assert_allclose(prov.next_distribution("x", [1, 0]), np.full(4, 0.25), atol=1e-12)
    finally:
        server.should_exit = True
        thread.join(timeout=10)
