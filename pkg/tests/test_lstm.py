import numpy as np
import pytest

from phenoicu.models.lstm import (Batch, LstmConfig, LstmModel, LstmParams, NumericError, fit_standardizer,
                                  gradient_check, loss_and_grads, make_batch, predict_sequences, train_lstm)


def tiny(rng, n_out=1, D=3, H=4, B=2, T=3):
    p = LstmParams.init(D, H, n_out, rng)
    X = rng.normal(size=(B, T, D))
    K = 2 if n_out == 1 else n_out
    y = rng.integers(0, K, size=(B, T))
    return p, Batch(X, y, np.ones((B, T)))


@pytest.mark.parametrize("n_out", [1, 4])
def test_gradient_check_passes(rng, n_out):
    p, batch = tiny(rng, n_out)
    assert gradient_check(p, batch) < 1e-4


def corrupt_forget(p, batch, class_weight=None):
    loss, grads = loss_and_grads(p, batch)
    H = p.hidden
    grads["W"][H:2 * H] *= 1.5
    grads["b"][H:2 * H] *= 1.5
    return loss, grads


def test_gradient_check_catches_corrupted_forget_gate(rng):
    p, batch = tiny(rng)
    assert gradient_check(p, batch, grad_fn=corrupt_forget) > 1e-2


def test_empty_batch_gives_zero(rng):
    p, _ = tiny(rng)
    before = p.copy()
    assert gradient_check(p, make_batch([], [])) == 0.0
    assert np.array_equal(p.W, before.W)


def test_zero_init_predicts_half(rng):
    p = LstmParams.init(3, 5, 1, rng, zero=True)
    probs = predict_sequences(p, rng.normal(size=(2, 4, 3)))
    assert np.allclose(probs, 0.5)


def test_hidden_state_bounded(rng):
    from phenoicu.models.lstm import _forward
    p = LstmParams.init(3, 6, 1, rng)
    p.W *= 50
    out = _forward(p, rng.normal(size=(2, 10, 3)) * 100)
    hs = out[1] if isinstance(out, tuple) else out
    assert np.all(np.abs(hs) <= 1.0 + 1e-12)


def test_constant_label_memorized(rng):
    seqs = [rng.normal(size=(6, 2)) for _ in range(16)]
    labs = [np.ones(6, dtype=int) for _ in seqs]
    p = train_lstm(seqs, labs, None, 2, LstmConfig(hidden_size=4, epochs=30, learning_rate=0.05, seed=0))
    assert p.loss_curve[-1] < 0.05
    assert p.loss_curve[-1] < p.loss_curve[0]


def test_sign_rule_learned(rng):
    def data(n):
        seqs = [rng.normal(size=(8, 1)) for _ in range(n)]
        return seqs, [(s[:, 0] > 0).astype(int) for s in seqs]
    seqs, labs = data(200)
    p = train_lstm(seqs, labs, None, 2, LstmConfig(hidden_size=8, epochs=30, learning_rate=0.02, seed=1))
    ts, tl = data(100)
    probs = predict_sequences(p, make_batch(ts, tl).X)
    acc = np.mean([(probs[k, :, 1] > 0.5) == tl[k] for k in range(100)])
    assert acc >= 0.95


def test_zero_learning_rate_leaves_parameters(rng):
    seqs = [rng.normal(size=(4, 2)) for _ in range(4)]
    labs = [np.zeros(4, dtype=int) for _ in seqs]
    init = LstmParams.init(2, 3, 1, np.random.default_rng(0))
    p = train_lstm(seqs, labs, None, 2, LstmConfig(hidden_size=3, epochs=3, learning_rate=0.0), params=init)
    for name, t in p.tensors().items():
        assert np.array_equal(t, init.tensors()[name])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_aborts(rng):
    seqs = [np.full((3, 2), np.nan)]
    with pytest.raises(NumericError):
        train_lstm(seqs, [np.zeros(3, dtype=int)], None, 2, LstmConfig(hidden_size=2, epochs=1))


def test_mask_excludes_timesteps(rng):
    p, batch = tiny(rng)
    masked = Batch(batch.X, batch.y, np.zeros_like(batch.mask))
    masked.mask[:, -1] = 1
    flipped = batch.y.copy()
    flipped[:, :-1] = 1 - flipped[:, :-1]
    a, _ = loss_and_grads(p, masked)
    b, _ = loss_and_grads(p, Batch(batch.X, flipped, masked.mask))
    assert a == pytest.approx(b)


def test_model_round_trip(rng):
    seqs = [rng.normal(size=(5, 3)) for _ in range(4)]
    mean, std = fit_standardizer(seqs)
    params = LstmParams.init(3, 4, 10, rng)
    m = LstmModel(params, 10, mean, std, LstmConfig(hidden_size=4))
    again = LstmModel.from_bytes(m.to_bytes())
    assert again.to_bytes() == m.to_bytes()
    for a, b in zip(m.predict_proba_sequences(seqs), again.predict_proba_sequences(seqs)):
        assert np.array_equal(a, b)
        assert np.allclose(a.sum(1), 1)
