from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradcheck import ALL_LOSSES, max_relative_error, random_problem
from tdcal.calibrate import LossKind, batch_loss
from tdcal.predictor import (
    FeedforwardPredictor,
    LrSchedule,
    OptimizerState,
    PredictorFormatError,
    forward,
    gradients,
    init,
    load_predictor,
    make_batch,
    optimizer_step,
    save_predictor,
)
from tdcal.rollout import Rollout, StepRecord


def feature_rollout(X, label=1):
    return Rollout("t", tuple(StepRecord(features=tuple(x)) for x in X), label)


def test_parameter_count():
    m = init("feedforward", 4, 0, window=2, hidden=8)
    # (d*window)*H + H, H*H + H, H + 1 with d*window = H = 8
    assert m.n_params == 8 * 8 + 8 + 8 * 8 + 8 + 8 + 1 == 153
    r = init("recurrent", 4, 0, hidden=8, proj=3)
    assert r.n_params == 3 * 4 + 3 + 24 * 3 + 24 + 24 * 8 + 24 + 8 + 1


@pytest.mark.parametrize("kind", ["feedforward", "recurrent"])
def test_seeded_init(kind):
    a, b, c = init(kind, 3, 7), init(kind, 3, 7), init(kind, 3, 8)
    assert np.array_equal(a.flat(), b.flat())
    assert not np.array_equal(a.flat(), c.flat())
    for name, v in a.params.items():
        if name[0] == "b":
            assert np.all(v == 0)


def test_init_limits():
    m = init("feedforward", 4, 0, hidden=8)
    assert np.abs(m.params["W1"]).max() <= np.sqrt(6 / 12)
    assert np.abs(m.params["W3"]).max() <= np.sqrt(6 / 9)
    with pytest.raises(ValueError):
        init("feedforward", 0, 0)
    with pytest.raises(ValueError):
        init("transformer", 3, 0)


@pytest.mark.parametrize("kind", ["feedforward", "recurrent"])
def test_zero_init_outputs_half(kind, rng):
    m = init(kind, 3, 0, zero=True)
    r = feature_rollout(rng.normal(size=(5, 3)) * 100)
    assert np.all(m.predict(r) == 0.5)


def test_feature_dimension_mismatch(rng):
    m = init("recurrent", 3, 0)
    with pytest.raises(ValueError):
        forward(m, feature_rollout(rng.normal(size=(4, 2))), 2)


def test_window_padding(rng):
    m = init("feedforward", 2, 1, window=3, hidden=6)
    X = rng.normal(size=(4, 2))
    padded = feature_rollout(np.vstack([np.zeros((2, 2)), X]))
    assert forward(m, feature_rollout(X), 1) == pytest.approx(forward(m, padded, 3), abs=1e-14)


def test_window_uses_only_recent_steps(rng):
    m = init("feedforward", 2, 1, window=2, hidden=6)
    X = rng.normal(size=(5, 2))
    Y = X.copy()
    Y[0] += 10.0
    assert forward(m, feature_rollout(X), 4) == forward(m, feature_rollout(Y), 4)


def test_recurrent_incremental_equals_full(rng):
    m = init("recurrent", 3, 2, hidden=5, proj=4)
    m.set_flat(rng.normal(scale=0.5, size=m.n_params))
    X = rng.normal(size=(6, 3))
    p = m.params
    H = 5
    sig = lambda x: 1.0 / (1.0 + np.exp(-x))
    h = np.zeros(H)
    for t in range(6):
        u = p["Wp"] @ X[t] + p["bp"]
        gx = p["Wx"] @ u + p["bx"]
        gh = p["Wh"] @ h + p["bh"]
        r = sig(gx[:H] + gh[:H])
        z = sig(gx[H:2 * H] + gh[H:2 * H])
        n = np.tanh(gx[2 * H:] + r * gh[2 * H:])
        h = (1 - z) * n + z * h
        step_score = sig(p["Wo"][0] @ h + p["bo"][0])
        assert forward(m, feature_rollout(X), t + 1) == pytest.approx(step_score, abs=1e-12)


@pytest.mark.parametrize("kind", ["feedforward", "recurrent"])
def test_batch_permutation_isolation(kind, rng):
    m = init(kind, 3, 4, hidden=6)
    seqs = [rng.normal(size=(n, 3)) for n in (5, 2, 4)]
    rolls = [feature_rollout(s) for s in seqs]
    base = m.predict_many(rolls)
    perm = [2, 0, 1]
    shuffled = m.predict_many([rolls[i] for i in perm])
    for j, i in enumerate(perm):
        np.testing.assert_allclose(shuffled[j], base[i], atol=1e-13)
        np.testing.assert_allclose(m.predict(rolls[i]), base[i], atol=1e-13)


@given(st.integers(0, 10_000), st.sampled_from(["feedforward", "recurrent"]))
def test_output_range(seed, kind):
    rng = np.random.default_rng(seed)
    m = init(kind, 3, seed, hidden=4)
    m.set_flat(rng.normal(scale=3.0, size=m.n_params))
    out = m.predict(feature_rollout(rng.normal(scale=50.0, size=(4, 3))))
    assert np.all((out >= 0) & (out <= 1)) and np.all(np.isfinite(out))


@pytest.mark.parametrize("kind", ["feedforward", "recurrent"])
@pytest.mark.parametrize("loss", ALL_LOSSES)
def test_gradients_match_finite_differences(kind, loss):
    for seed in range(3):
        err, _, _ = max_relative_error(*random_problem(kind, loss, seed))
        assert err < 1e-4


@pytest.mark.parametrize("kind", ["feedforward", "recurrent"])
def test_gradient_linearity(kind):
    model, batch, f1 = random_problem(kind, "mse_mc", 1)
    _, _, f2 = random_problem(kind, "bce", 1)
    _, g1 = gradients(model, batch, f1)
    _, g2 = gradients(model, batch, f2)

    def both(s, b):
        v1, d1 = f1(s, b)
        v2, d2 = f2(s, b)
        return v1 + v2, d1 + d2

    _, g = gradients(model, batch, both)
    for k in g:
        np.testing.assert_allclose(g[k], g1[k] + g2[k], rtol=0, atol=1e-12)


def test_constant_loss_gives_zero_gradient():
    model, batch, _ = random_problem("recurrent", "tdqc", 0)
    _, g = gradients(model, batch, lambda s, b: (1.0, np.zeros_like(s)))
    assert all(np.all(v == 0) for v in g.values())


def test_padding_does_not_leak_into_gradients(rng):
    m = init("recurrent", 2, 0, hidden=4)
    short = rng.normal(size=(2, 2))
    w = np.ones(1)
    fn = lambda s, b: batch_loss(LossKind.MSE_MC, s, b, w)
    _, g_alone = gradients(m, make_batch([short], [1]), fn)
    padded = make_batch([short], [1])
    padded.X = np.concatenate([padded.X, rng.normal(size=(1, 3, 2))], axis=1)
    _, g_pad = gradients(m, padded, fn)
    for k in g_alone:
        np.testing.assert_allclose(g_alone[k], g_pad[k], atol=1e-14)


def scalar_model(value):
    return SimpleNamespace(params={"w": np.array([float(value)])})


def test_adamw_zero_grad_no_decay_is_identity():
    m = scalar_model(0.7)
    st_ = OptimizerState(lr=0.1, weight_decay=0.0)
    optimizer_step(st_, m, {"w": np.zeros(1)})
    assert m.params["w"][0] == 0.7


def test_adamw_decay_is_decoupled():
    m = scalar_model(2.0)
    st_ = OptimizerState(lr=0.1, weight_decay=0.5)
    optimizer_step(st_, m, {"w": np.zeros(1)})
    assert m.params["w"][0] == pytest.approx(2.0 * (1 - 0.05), abs=1e-15)


def test_adamw_two_step_hand_trace():
    lr, wd, eps = 0.01, 0.1, 1e-8
    m = scalar_model(1.0)
    st_ = OptimizerState(lr=lr, weight_decay=wd, eps=eps)
    optimizer_step(st_, m, {"w": np.ones(1)})
    assert st_.m["w"][0] == pytest.approx(0.1, abs=1e-15)
    assert st_.v["w"][0] == pytest.approx(0.001, abs=1e-15)
    w1 = 1.0 * (1 - lr * wd) - lr * 1.0 / (1.0 + eps)
    assert m.params["w"][0] == pytest.approx(w1, abs=1e-14)
    optimizer_step(st_, m, {"w": np.ones(1)})
    assert st_.m["w"][0] == pytest.approx(0.19, abs=1e-15)
    assert st_.v["w"][0] == pytest.approx(0.001999, abs=1e-15)
    assert st_.step == 2
    # bias corrections make both moment estimates exactly 1
    w2 = w1 * (1 - lr * wd) - lr * 1.0 / (1.0 + eps)
    assert m.params["w"][0] == pytest.approx(w2, abs=1e-14)


def test_adamw_shape_mismatch():
    m = scalar_model(1.0)
    with pytest.raises(ValueError):
        optimizer_step(OptimizerState(), m, {"w": np.ones(2)})


def test_lr_schedule():
    s = LrSchedule(0.1, step_size=10, gamma=0.5)
    assert s.rate(0) == s.rate(9) == 0.1
    assert s.rate(10) == 0.05 and s.rate(25) == 0.025
    with pytest.raises(ValueError):
        LrSchedule(0.1, gamma=1.5)
    with pytest.raises(ValueError):
        LrSchedule(0.0)


@pytest.mark.parametrize("kind", ["feedforward", "recurrent"])
def test_save_load_round_trip(kind, tmp_path, rng):
    m = init(kind, 3, 5, hidden=7)
    path = tmp_path / "m.json"
    save_predictor(m, path)
    back = load_predictor(path, kind=kind)
    assert type(back) is type(m) and back.arch() == m.arch()
    assert np.array_equal(back.flat(), m.flat())
    r = feature_rollout(rng.normal(size=(5, 3)))
    assert np.array_equal(back.predict(r), m.predict(r))


def test_load_errors(tmp_path):
    path = tmp_path / "m.json"
    save_predictor(init("recurrent", 3, 0), path)
    with pytest.raises(PredictorFormatError):
        load_predictor(path, kind="feedforward")
    text = path.read_text().replace('"format_version": 1', '"format_version": 99')
    path.write_text(text)
    with pytest.raises(PredictorFormatError):
        load_predictor(path)
    path.write_text("not json")
    with pytest.raises(PredictorFormatError):
        load_predictor(path)


def test_accumulate_scores_are_running_sums(rng):
    m = FeedforwardPredictor(2, hidden=4, accumulate=True)
    m.init(rng)
    r = feature_rollout(rng.normal(size=(4, 2)))
    out, _ = m.forward_batch(m.encode(r)[None])
    np.testing.assert_allclose(m.predict(r), np.cumsum(out[0]))
    assert np.all(np.diff(m.predict(r)) >= 0)
