import math

import numpy as np
import pytest

from flowrecon.architectures import MultiScaleSpec, build_multiscale
from flowrecon.conditioning import conditioner_for_model
from flowrecon.engine import ParameterStore, Tape, Tensor, no_grad, ops
from flowrecon.operators import gaussian_matrix
from flowrecon.train import (
    TrainConfig,
    TrainData,
    adam_step,
    dequantize,
    evaluate_nll,
    nll_loss,
    prepare_data,
    read_history,
    train,
    write_history,
)


def vector_model(seed=0, dtype=np.float64):
    store = ParameterStore(seed=seed, dtype=dtype)
    return build_multiscale(MultiScaleSpec(input_shape=(2,), scales=1, couplings_per_block=2,
                                           hidden=8), store)


def toy_data(n=64, seed=0):
    rng = np.random.default_rng(seed)
    return TrainData(rng.standard_normal((n, 2)) * [2.0, 0.5] + [1.0, -1.0])


def test_adam_single_step_matches_formula():
    store = ParameterStore(seed=0, dtype=np.float64)
    store.add("w", (3,))
    w0 = store.values["w"].copy()
    g = np.array([0.5, -2.0, 1e-3])
    store.grads["w"] = g
    adam_step(store, lr=0.01)
    m = 0.1 * g
    v = 0.001 * g * g
    expected = w0 - 0.01 * (m / 0.1) / (np.sqrt(v / 0.001) + 1e-8)
    np.testing.assert_allclose(store.values["w"], expected, rtol=1e-12)
    assert store.step == 1


def test_adam_skips_frozen():
    store = ParameterStore(seed=0, dtype=np.float64)
    store.add("cond.w", (2,))
    store.freeze("cond.")
    w0 = store.values["cond.w"].copy()
    store.grads["cond.w"] = np.ones(2)
    adam_step(store, 0.1)
    np.testing.assert_array_equal(store.values["cond.w"], w0)


def test_plateau_schedule_reduces_lr_twice():
    model = vector_model()
    model.store.freeze("")  # nothing can improve, so every epoch after the first is a plateau
    cfg = TrainConfig(lr=1e-4, plateau_patience=2, early_stop_patience=10, epochs=6,
                      batch_size=16)
    res = train(model, None, toy_data(), cfg)
    lrs = [row["lr"] for row in res.history]
    assert lrs[:3] == [1e-4] * 3
    assert lrs[3] == pytest.approx(8e-5) and lrs[5] == pytest.approx(6.4e-5)


def test_early_stopping():
    model = vector_model()
    model.store.freeze("")
    res = train(model, None, toy_data(), TrainConfig(epochs=50, early_stop_patience=3))
    assert len(res.history) == 4 and res.best_epoch == 0


def test_dequantize_identity_at_zero_variance(rng):
    x = rng.uniform(size=(4, 3))
    assert dequantize(x, 0.0, rng) is x
    noisy = dequantize(np.zeros(100000), 0.01, rng)
    assert noisy.var() == pytest.approx(0.01, rel=0.03)


def test_nll_invariant_to_batch_order(rng):
    model = vector_model()
    x = rng.standard_normal((10, 2))
    perm = rng.permutation(10)
    with no_grad():
        a = float(nll_loss(model, None, x).data)
        b = float(nll_loss(model, None, x[perm]).data)
    assert a == pytest.approx(b, rel=1e-14)


def test_nll_of_identity_flow_is_gaussian(rng):
    model = vector_model()
    x = rng.standard_normal((5, 2))
    # couplings start as identities and the mixes are orthogonal, so p = N(0, I)
    expected = np.mean(0.5 * np.sum(x * x, axis=1) + math.log(2 * math.pi))
    with no_grad():
        assert float(nll_loss(model, None, x).data) == pytest.approx(expected, rel=1e-12)


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        nll_loss(vector_model(), None, np.zeros((0, 2)))


def test_training_reduces_nll():
    model = vector_model()
    res = train(model, None, toy_data(512), TrainConfig(lr=5e-3, epochs=8, batch_size=64))
    assert res.history[-1]["val_nll"] < res.history[0]["val_nll"]
    assert not res.unstable and res.aborted is None


def test_deterministic_given_seed():
    states = []
    for _ in range(2):
        model = vector_model()
        res = train(model, None, toy_data(), TrainConfig(lr=1e-3, epochs=2, batch_size=16))
        states.append(res.last_state)
    for k in states[0]:
        np.testing.assert_array_equal(states[0][k], states[1][k])


def test_resume_is_bit_identical():
    cfg = TrainConfig(lr=1e-3, epochs=3, batch_size=16)
    full = train(vector_model(), None, toy_data(), cfg)
    model = vector_model()
    part = train(model, None, toy_data(), TrainConfig(lr=1e-3, epochs=1, batch_size=16))
    rest = train(model, None, toy_data(), cfg, resume=part)
    assert [r["train_nll"] for r in rest.history] == [r["train_nll"] for r in full.history]
    for k in full.last_state:
        np.testing.assert_array_equal(full.last_state[k], rest.last_state[k])


def test_nan_aborts_and_restores_best():
    model = vector_model()
    data = toy_data()
    data.x[5] = np.nan
    before = model.store.state()
    res = train(model, None, data, TrainConfig(epochs=2, val_fraction=0.0))
    assert res.aborted and res.unstable
    for k in before:
        np.testing.assert_array_equal(model.store.state()[k], before[k])


def test_roundtrip_monitor_flags_threshold():
    res = train(vector_model(), None, toy_data(), TrainConfig(epochs=1, roundtrip_threshold=-1))
    assert res.unstable and res.aborted is None


def test_conditional_training_runs(rng):
    store = ParameterStore(seed=0)
    model = build_multiscale(MultiScaleSpec(input_shape=(1, 4, 4), scales=2, hidden=4,
                                            cond_channels=2, couplings_per_block=1), store)
    op = gaussian_matrix(8, 16, seed=0, image_shape=(4, 4))
    cond = conditioner_for_model(model, op, store, width=2)
    x = rng.uniform(size=(32, 1, 4, 4))
    data = prepare_data(cond, x, op.forward(x[:, 0]))
    assert data.xinv.shape == (32, 4, 4)
    res = train(model, cond, data, TrainConfig(lr=1e-3, epochs=2, batch_size=8))
    assert len(res.history) == 2 and all(math.isfinite(r["val_nll"]) for r in res.history)
    assert res.last_state["param/cond.stem.w"].dtype == np.float32


def test_history_csv_roundtrip(tmp_path):
    hist = [{"epoch": 0, "train_nll": 1.5, "val_nll": math.inf, "lr": 1e-4,
             "roundtrip_residual": 3e-7}]
    write_history(tmp_path / "h.csv", hist)
    assert read_history(tmp_path / "h.csv") == hist


@pytest.mark.parametrize("kw", [{"lr": 0}, {"plateau_factor": 1.0}, {"dequant_variance": -1},
                                {"alpha": -0.1}, {"batch_size": 0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_tensor_input_keeps_graph(rng):
    model = vector_model()
    x = Tensor(rng.standard_normal((3, 2)))
    assert ops.mean(model.log_prob(x)).shape == ()


def test_identity_model_nll_at_origin():
    model = vector_model()
    with no_grad():
        loss = float(nll_loss(model, None, np.zeros((4, 2))).data)
    assert loss == pytest.approx(math.log(2 * math.pi), rel=1e-12)  # (n/2) ln(2 pi) with n = 2


def test_adam_first_step_is_lr_sized():
    store = ParameterStore(seed=0, dtype=np.float64)
    store.add("w", (1,), init="zeros")
    store.set("w", [1.0])
    store.grads["w"] = 2 * store.values["w"]  # d/dw w^2
    adam_step(store, lr=0.1)
    assert store.values["w"][0] == pytest.approx(0.9, abs=1e-6)


def test_adam_zero_gradient_advances_state_only():
    store = ParameterStore(seed=0, dtype=np.float64)
    store.add("w", (3,))
    w0 = store.values["w"].copy()
    adam_step(store, lr=0.1)
    np.testing.assert_array_equal(store.values["w"], w0)
    assert store.step == 1


def test_loss_decreases_over_200_steps():
    model = vector_model()
    x = toy_data(256).x
    losses = []
    for _ in range(200):
        model.store.zero_grad()
        with Tape() as tape:
            loss = nll_loss(model, None, x)
        tape.backward(loss)
        adam_step(model.store, 1e-2)
        losses.append(float(loss.data))
    smooth = np.convolve(losses, np.ones(20) / 20, mode="valid")[::20]
    assert np.all(np.diff(smooth) < 0)


def test_validation_inputs_are_clean():
    model = vector_model()
    data = toy_data(128)
    train_part, val = data.split(0.25, 0)
    res = train(model, None, train_part, TrainConfig(epochs=1, dequant_variance=0.5), val=val)
    assert res.history[0]["val_nll"] == evaluate_nll(model, None, val)
