import numpy as np
import pytest

from mapspan import autodiff as ad
from mapspan.encoder import (INIT_SCALE, EncoderConfig, Vocabulary, VocabularyError, encode,
                             init_encoder)
from mapspan.experiments import scaled_params

KINDS = [
    {"kind": "birnn"},
    {"kind": "birnn", "pack": "qpq"},
    {"kind": "birnn", "match": True},
    {"kind": "birnn", "layers": 2},
    {"kind": "attention"},
]


def cfg_of(d=16, **kw):
    return EncoderConfig(vocab_size=20, d=d, embed=kw.pop("embed", 12), **kw)


@pytest.mark.parametrize("kw", KINDS)
def test_shapes(kw):
    cfg = cfg_of(**kw)
    out = encode([3, 4, 5, 6], [7, 8, 9, 10, 11, 12, 13], init_encoder(cfg, 0), cfg)
    assert out.H.shape == (7, 16) and out.H_Q.shape == (4, 16)
    assert np.isfinite(out.H.data).all()


@pytest.mark.parametrize("kw", KINDS)
def test_deterministic_and_sensitive(kw):
    cfg = cfg_of(**kw)
    ps = scaled_params(init_encoder(cfg, 1), 10)
    rng = np.random.default_rng(0)
    q = rng.integers(3, 20, size=3).tolist()
    p = rng.integers(3, 20, size=9).tolist()
    H = encode(q, p, ps, cfg).H.data
    assert np.array_equal(H, encode(q, p, ps, cfg).H.data)
    perm = p[::-1]
    assert not np.array_equal(H, encode(q, perm, ps, cfg).H.data)
    q2 = list(q)
    q2[0] = 3 if q[0] != 3 else 4
    assert not np.array_equal(H, encode(q2, p, ps, cfg).H.data)  # question-aware


def test_qpq_backward_half_sees_question():
    cfg = cfg_of(pack="qpq")
    ps = scaled_params(init_encoder(cfg, 2), 10)
    p = [5, 6, 7, 8]
    a = encode([3, 4], p, ps, cfg).H.data
    b = encode([3, 9], p, ps, cfg).H.data
    # last passage row: the backward half has read the trailing question only under qpq
    assert not np.allclose(a[-1, 8:], b[-1, 8:])
    plain = cfg_of()
    ps2 = scaled_params(init_encoder(plain, 2), 10)
    np.testing.assert_array_equal(encode([3, 4], p, ps2, plain).H.data[-1, 8:],
                                  encode([3, 9], p, ps2, plain).H.data[-1, 8:])


def test_init_range_and_seeds():
    cfg = cfg_of(match=True)
    a, b, c = init_encoder(cfg, 0), init_encoder(cfg, 0), init_encoder(cfg, 1)
    for name, t in a.items():
        assert np.array_equal(t.data, b[name].data)
        assert (np.abs(t.data) < INIT_SCALE).all()
    assert any(not np.array_equal(t.data, c[name].data) for name, t in a.items())


def test_errors():
    cfg = cfg_of()
    ps = init_encoder(cfg, 0)
    with pytest.raises(VocabularyError):
        encode([3], [20], ps, cfg)
    with pytest.raises(ValueError):
        encode([], [3], ps, cfg)
    with pytest.raises(ValueError):
        encode([3], [], ps, cfg)
    with pytest.raises(ValueError):
        EncoderConfig(vocab_size=10, d=15)
    with pytest.raises(ValueError):
        EncoderConfig(vocab_size=10, kind="cnn")
    with pytest.raises(ValueError):
        EncoderConfig(vocab_size=10, pack="pq")
    with pytest.raises(ValueError):
        EncoderConfig(vocab_size=0)


@pytest.mark.parametrize("kw", KINDS)
def test_gradient(kw):
    cfg = cfg_of(d=4, embed=3, **kw)
    ps = scaled_params(init_encoder(cfg, 3), 10)
    q, p = [3, 4], [5, 6, 3, 7]
    w = np.random.default_rng(4).normal(size=(4, 4))

    def f(params):
        out = encode(q, p, params, cfg)
        # fixed random readout so every H entry matters
        return ad.add(ad.tensor_sum(ad.mul(out.H, w)), ad.tensor_sum(out.H_Q))

    assert ad.grad_check(f, ps) < 1e-4


class TestVocabulary:
    def test_reserved(self):
        v = Vocabulary(["a", "b", "a"])
        assert (v.pad_id, v.unk_id, v.sep_id) == (0, 1, 2)
        assert len(v) == 5
        assert v.encode(["b", "zzz"]) == [4, 1]
        assert v.decode([3, 4]) == ["a", "b"]

    def test_dense_injective(self):
        v = Vocabulary(f"w{i % 7}" for i in range(30))
        ids = [v.stoi[t] for t in v.itos]
        assert ids == list(range(len(v)))

    def test_roundtrip(self):
        v = Vocabulary(["x", "y"])
        assert Vocabulary.from_list(v.to_list()).stoi == v.stoi
        with pytest.raises(VocabularyError):
            Vocabulary.from_list(["x"])
