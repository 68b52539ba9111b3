from __future__ import annotations

import numpy as np
import pytest

from anchorkv.anchor import build_anchor_mask, causal_bias, plant_anchors
from anchorkv.errors import ConfigError, InputError, NumericError, ShapeError
from anchorkv.model import (
    AdamState,
    ModelConfig,
    forward,
    init_model,
    loss_and_grads,
    loss_only,
    sequence_inputs,
    train_step,
)
from anchorkv.numerics import NEG_INF, Rng
from anchorkv.vocab import DEFAULT_VOCAB as V

SMALL = dict(d_model=16, n_heads=4, n_layers=2, max_seq=64)


def small(**kw) -> ModelConfig:
    return ModelConfig(**{**SMALL, **kw})


def anchored(text):
    return list(plant_anchors(V.encode(text), V.linebreak_id, V.anchor_id).tokens)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(d_model=12, n_heads=4)  # odd head dimension
    with pytest.raises(ConfigError):
        ModelConfig(anchor_token_id=500)
    with pytest.raises(ConfigError):
        ModelConfig(taa_layers={7})
    with pytest.raises(ConfigError):
        ModelConfig(taa_layers={0}, laa_anchor_layer=0)  # no deeper consumer
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"bogus": 1})


def test_config_dict_round_trip():
    cfg = small(taa_layers={0, 1}, laa_anchor_layer=0, mhpe=True)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.laa_consumers == frozenset({1})


def test_init_is_deterministic_and_shaped():
    cfg = small()
    a, b = init_model(cfg), init_model(cfg)
    for name in a.params:
        assert np.array_equal(a[name], b[name])
    assert a.layer(0, "wq").shape == (16, 16)
    assert a.layer(1, "w_in").shape == (16, 64)


def test_init_embedding_std():
    w = init_model(ModelConfig(vocab_size=256, d_model=64))
    assert 0.015 <= w["embed"].std() <= 0.025
    assert abs(w.layer(0, "wo").std() - 0.02 / np.sqrt(8)) < 0.002


def test_single_token_forward():
    tr = forward(init_model(small()), [5], capture=True)
    assert np.all(np.isfinite(tr.logits))
    for a in tr.attention:
        np.testing.assert_array_equal(a, np.ones((4, 1, 1)))


def test_forward_deterministic():
    w = init_model(small())
    toks = V.encode("abc\ndef")
    assert np.array_equal(forward(w, toks).logits, forward(w, toks).logits)


@pytest.mark.parametrize("kind", ["dense", "taa", "laa"])
def test_attention_rows_sum_to_one(kind):
    cfg = {"dense": small(), "taa": small(taa_layers={1}, mhpe=True),
           "laa": small(taa_layers={0, 1}, laa_anchor_layer=0, mhpe=True)}[kind]
    tr = forward(init_model(cfg), anchored("ab\ncd\nef\ng"), capture=True)
    for a in tr.attention:
        np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-9)


def test_masked_position_equals_removed_position():
    rng = Rng(3)
    w = init_model(small(), rng)
    for trial in range(5):
        n = 9
        toks = rng.integers(0, 96, size=n).tolist()
        j = int(rng.integers(1, n))
        bias = causal_bias(n)
        bias[:, j] = NEG_INF
        masked = forward(w, toks, bias, dense_mask=bias).logits
        keep = [i for i in range(n) if i != j]
        removed = forward(w, [toks[i] for i in keep], positions=np.array(keep)).logits
        np.testing.assert_allclose(masked[keep], removed, atol=1e-8)


def test_vocabulary_relabelling_equivariance():
    cfg = small()
    w = init_model(cfg)
    perm = Rng(4).permutation(cfg.vocab_size)
    w2 = w.copy()
    w2.params["embed"] = w["embed"][np.argsort(perm)]
    toks = np.array(V.encode("hello\nworld"))
    a = forward(w, toks).logits
    b = forward(w2, perm[toks]).logits
    np.testing.assert_allclose(b[:, perm], a, atol=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_forward_errors():
    w = init_model(small())
    with pytest.raises(ShapeError):
        forward(w, list(range(65)))
    with pytest.raises(ShapeError):
        forward(w, [1, 2, 3], np.zeros((2, 2)))
    with pytest.raises(InputError):
        forward(w, [1, 500])
    w.params["layer0.wv"] = w.layer(0, "wv") * np.inf
    with pytest.raises(NumericError) as exc:
        forward(w, [1, 2, 3])
    assert exc.value.layer == 0


def test_sequence_inputs_use_anchor_mask_only_for_anchor_models():
    toks = anchored("ab\ncd\nef\ng")
    bias, _ = sequence_inputs(small(), toks)
    np.testing.assert_array_equal(bias, causal_bias(len(toks)))
    bias, kpos = sequence_inputs(small(taa_layers={1}, mhpe=True), toks)
    anchors = [i for i, t in enumerate(toks) if t == V.anchor_id]
    np.testing.assert_array_equal(bias, build_anchor_mask(len(toks), anchors).bias)
    assert kpos.shape == (len(toks), 4)


def test_uniform_logits_give_log_vocab_loss():
    cfg = small()
    w = init_model(cfg)
    w.params["embed"] = np.zeros_like(w["embed"])
    loss, _ = loss_and_grads(w, [V.encode("abcdef")])
    assert abs(loss - np.log(cfg.vocab_size)) < 1e-6


def test_anchor_targets_are_excluded():
    cfg = small(taa_layers={1})
    w = init_model(cfg)
    toks = anchored("ab\ncd")
    lw = np.ones(len(toks) - 1)
    lw[toks.index(V.anchor_id) - 1] = 1e6  # would dominate if anchors were targets
    assert abs(loss_only(w, [toks], loss_weights=[lw]) - loss_only(w, [toks])) < 1e-12


def test_no_targets_is_an_error():
    w = init_model(small())
    with pytest.raises(InputError):
        loss_and_grads(w, [[3]])
    with pytest.raises(InputError):
        loss_and_grads(w, [])


def test_loss_matches_loss_only_and_batching():
    w = init_model(small(taa_layers={0, 1}, laa_anchor_layer=0, mhpe=True))
    a, b = anchored("ab\ncd\ne"), anchored("x\nyz")
    loss, _ = loss_and_grads(w, [a, b])
    assert abs(loss - loss_only(w, [a, b])) < 1e-12
    na, nb = (sum(t != V.anchor_id for t in s[1:]) for s in (a, b))
    joint = (loss_only(w, [a]) * na + loss_only(w, [b]) * nb) / (na + nb)
    assert abs(loss - joint) < 1e-12


def test_zero_gradient_zero_decay_keeps_weights():
    w = init_model(small())
    state = AdamState.zeros(w, weight_decay=0.0)
    zero = {k: np.zeros_like(v) for k, v in w.params.items()}
    w2, state2 = train_step(w, zero, state, 1e-3)
    for k in w.params:
        assert np.array_equal(w[k], w2[k])
    assert state2.step == 1


def test_weight_decay_only_on_matrices():
    w = init_model(small())
    zero = {k: np.zeros_like(v) for k, v in w.params.items()}
    w2, _ = train_step(w, zero, AdamState.zeros(w), 0.1)
    np.testing.assert_allclose(w2["embed"], w["embed"] * (1 - 0.1 * 0.1))
    np.testing.assert_array_equal(w2["ln_f"], w["ln_f"])


def test_training_is_deterministic_and_loss_decreases():
    from anchorkv.harness.corpus import make_corpus

    corpus = make_corpus(Rng(0), 200, "lines", seq_len=100)
    cfg = small(max_seq=128)

    def run():
        w = init_model(cfg)
        st = AdamState.zeros(w)
        losses = []
        for _ in range(20):
            loss, g = loss_and_grads(w, corpus)
            w, st = train_step(w, g, st, 1e-3)
            losses.append(loss)
        return w, losses

    w1, losses = run()
    w2, _ = run()
    for k in w1.params:
        assert np.array_equal(w1[k], w2[k])
    ups = sum(b > a for a, b in zip(losses, losses[1:]))
    assert ups <= 2 and losses[-1] < losses[0]
