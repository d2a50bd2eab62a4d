import numpy as np
import pytest

from flowrecon.architectures import IUNetSpec, MultiScaleSpec, build_iunet, build_multiscale
from flowrecon.conditioning import (
    Conditioner,
    ConditionerSpec,
    conditional_loss,
    conditioner_for_model,
    mean_nll,
)
from flowrecon.engine import ParameterStore, Tape, grad_check
from flowrecon.operators import (
    FourierOperator,
    OperatorMismatch,
    RadonOperator,
    gaussian_matrix,
    make_mask,
)

from conftest import randomize


@pytest.mark.parametrize("trunk", ["avgpool", "cnn", "resnet", "unet"])
@pytest.mark.parametrize("levels", [2, 3, 5])
def test_feature_extents(trunk, levels, rng):
    op = gaussian_matrix(64, 1024, seed=0, image_shape=(32, 32))
    spec = ConditionerSpec(trunk=trunk, inversion="adjoint", levels=levels, channels=6, width=8)
    cond = Conditioner(op, spec, ParameterStore(seed=0))
    feats = cond.condition(rng.standard_normal((2, 64)))
    assert len(feats) == levels
    for i, f in enumerate(feats):
        assert f.shape == (2, 6, 32 // 2 ** i, 32 // 2 ** i)
    if trunk == "unet":
        assert [f.shape[2] for f in feats.encoder] == [32 // 2 ** i for i in range(levels)]
        assert feats.recon.shape == (2, 32, 32)


def test_inversion_layers(rng):
    x = rng.uniform(size=(2, 8, 8))
    g = gaussian_matrix(20, 64, seed=1, image_shape=(8, 8))
    r = RadonOperator((8, 8), 10)
    f = FourierOperator(make_mask(8, 0.25, 2), (8, 8))
    cases = [(g, "pinv", g.pseudo_inverse), (g, "tv", lambda y: g.tv_inverse(y, 0.02)),
             (r, "fbp", r.fbp), (f, "zero_filled", f.zero_filled), (g, "adjoint", g.adjoint)]
    for op, kind, ref in cases:
        cond = Conditioner(op, ConditionerSpec(inversion=kind), ParameterStore(seed=0))
        y = op.forward(x)
        np.testing.assert_allclose(cond.invert(y), ref(y), rtol=1e-10, atol=1e-12)


def test_measurement_mismatch(rng):
    op = gaussian_matrix(20, 64, seed=1, image_shape=(8, 8))
    cond = Conditioner(op, ConditionerSpec(), ParameterStore(seed=0))
    with pytest.raises(OperatorMismatch):
        cond.invert(rng.standard_normal((2, 21)))


def test_unet_reconstruction_starts_at_inversion(rng):
    op = gaussian_matrix(16, 64, seed=1, image_shape=(8, 8))
    cond = Conditioner(op, ConditionerSpec(trunk="unet", inversion="pinv"), ParameterStore(seed=0))
    y = rng.standard_normal((2, 16))
    np.testing.assert_allclose(cond.reconstruction(y).data, cond.invert(y), rtol=1e-6, atol=1e-6)
    with pytest.raises(ValueError):
        Conditioner(op, ConditionerSpec(trunk="avgpool"), ParameterStore(seed=1)).reconstruction(y)


def model_and_conditioner(store, trunk="avgpool", kind="multiscale", trainable=True):
    if kind == "multiscale":
        model = build_multiscale(MultiScaleSpec(input_shape=(1, 4, 4), scales=2, hidden=4,
                                                cond_channels=3, couplings_per_block=1), store)
    else:
        model = build_iunet(IUNetSpec(input_shape=(1, 4, 4), scales=2, hidden=4,
                                      coupling="affine", cond_channels=3), store)
    op = gaussian_matrix(8, 16, seed=2, image_shape=(4, 4))
    cond = conditioner_for_model(model, op, store, trunk=trunk, width=4, trainable=trainable)
    return model, cond, op


def test_conditioner_matches_model_slots():
    store = ParameterStore(seed=0)
    model, cond, _ = model_and_conditioner(store, kind="iunet", trunk="unet")
    assert cond.spec.levels == 2 and cond.spec.channels == 3
    assert set(model.cond_slots) == {"main:1"}


@pytest.mark.parametrize("trunk,kind", [("avgpool", "multiscale"), ("cnn", "multiscale"),
                                        ("resnet", "multiscale"), ("unet", "iunet")])
def test_full_nll_graph_gradients(trunk, kind, rng):
    store = ParameterStore(seed=3, dtype=np.float64)
    model, cond, op = model_and_conditioner(store, trunk, kind)
    randomize(store, rng, scale=0.2)
    x = rng.uniform(size=(3, 1, 4, 4))
    y = op.forward(x[:, 0])
    rep = grad_check(lambda: conditional_loss(model, cond, x, y, alpha=0.5 if trunk == "unet"
                                              else 0.0), store, max_entries=6)
    assert rep.passed, str(rep)
    assert any(n.startswith("cond.") for n in rep.errors)


def test_frozen_conditioner_gets_no_gradient(rng):
    store = ParameterStore(seed=3, dtype=np.float64)
    model, cond, op = model_and_conditioner(store, trainable=False)
    randomize(store, rng, scale=0.2, prefix="flow")
    x = rng.uniform(size=(2, 1, 4, 4))
    with Tape() as tape:
        loss = conditional_loss(model, cond, x, op.forward(x[:, 0]), alpha=0.0)
    tape.backward(loss)
    assert all(not store.grads[n].any() for n in store.names("cond."))
    assert any(store.grads[n].any() for n in store.names("flow."))


def test_conditional_loss_adds_reconstruction_mse(rng):
    store = ParameterStore(seed=0, dtype=np.float64)
    op = gaussian_matrix(3, 4, seed=0, image_shape=(2, 2))
    model = build_iunet(IUNetSpec(input_shape=(1, 2, 2), scales=2, cond_channels=2), store)
    cond = conditioner_for_model(model, op, store, trunk="unet", inversion="pinv", width=2)
    x = np.array([[[[0.2, 0.9], [0.4, 0.1]]]])
    y = op.forward(x[:, 0])
    feats = cond.condition(y)
    nll = float(mean_nll(model, x, feats).data)
    alpha = 0.7
    # the zero-initialized head makes the reconstruction equal to the pseudo-inverse
    mse = np.mean((op.pseudo_inverse(y) - x[:, 0]) ** 2)
    got = float(conditional_loss(model, cond, x, y, alpha=alpha).data)
    assert got == pytest.approx(nll + alpha * mse, rel=1e-10)


def test_alpha_requires_unet(rng):
    store = ParameterStore(seed=0)
    model, cond, op = model_and_conditioner(store)
    with pytest.raises(ValueError):
        conditional_loss(model, cond, np.zeros((1, 1, 4, 4)), np.zeros((1, 8)), alpha=1.0)


def test_vector_problems_use_mlp(rng):
    store = ParameterStore(seed=0, dtype=np.float64)
    model = build_multiscale(MultiScaleSpec(input_shape=(2,), scales=1, dense_cond_dim=5), store)
    op = gaussian_matrix(2, 2, seed=0)
    cond = conditioner_for_model(model, op, store, inversion="identity")
    assert cond.spec.trunk == "mlp"
    feats = cond.condition(rng.standard_normal((3, 2)))
    assert feats.dense.shape == (3, 5)
    z, _ = model.forward(rng.standard_normal((3, 2)), feats)
    assert z.shape == (3, 2)
