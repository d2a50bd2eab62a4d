import numpy as np
import pytest

from flowrecon.architectures import Features, FlowState
from flowrecon.engine import ParameterStore, Tape, Tensor, grad_check, no_grad, ops
from flowrecon.layers import (
    HAAR,
    ChannelShuffle,
    CouplingLayer,
    Downsample,
    Flatten,
    Merge,
    OrthogonalMix,
    Split,
    Upsample,
)

from conftest import randomize
from helpers import fd_logdet


def coupling(store, shape, kind="affine", clamp=2.0, cond=None, subnet=None, recompute=False):
    subnet = subnet or ("dense" if len(shape) == 1 else "conv3")
    layer = CouplingLayer(store, "c", shape, kind=kind, subnet=subnet, hidden=8,
                          cond_shape=cond, cond_slot="main:0" if cond else None, clamp=clamp,
                          recompute=recompute)
    randomize(store, np.random.default_rng(5), scale=0.3)
    return layer


def layer_zoo(store):
    return {
        "affine": coupling(store, (3, 2, 2)),
        "additive": CouplingLayer(store, "add", (4, 2, 2), kind="additive", hidden=8),
        "unclamped": CouplingLayer(store, "raw", (2, 2, 2), clamp=None, hidden=8),
        "dense": CouplingLayer(store, "dense", (5,), subnet="dense", hidden=8),
        "conv1": CouplingLayer(store, "c1", (2, 2, 2), subnet="conv1", hidden=8),
        "shuffle": ChannelShuffle(4, seed=1),
        "mix": OrthogonalMix(4, seed=1),
        "haar": Downsample("haar"),
        "checkerboard": Downsample("checkerboard"),
        "upsample": Upsample("haar"),
        "flatten": Flatten((1, 2, 2)),
    }


INPUT_SHAPES = {"affine": (3, 2, 2), "additive": (4, 2, 2), "unclamped": (2, 2, 2),
                "dense": (5,), "conv1": (2, 2, 2), "shuffle": (4, 2, 2), "mix": (4, 2, 2),
                "haar": (1, 4, 4), "checkerboard": (2, 2, 2), "upsample": (4, 2, 2),
                "flatten": (1, 2, 2)}


@pytest.fixture
def zoo(store64):
    zoo = layer_zoo(store64)
    randomize(store64, np.random.default_rng(9), scale=0.3)
    return zoo


@pytest.mark.parametrize("name", sorted(INPUT_SHAPES))
def test_roundtrip(zoo, rng, f64, name):
    layer = zoo[name]
    x = rng.standard_normal((3,) + INPUT_SHAPES[name])
    y, _ = layer.forward(Tensor(x))
    np.testing.assert_allclose(layer.inverse(y).data, x, atol=1e-12)


@pytest.mark.parametrize("name", sorted(INPUT_SHAPES))
def test_logdet_matches_finite_difference_jacobian(zoo, rng, f64, name):
    layer = zoo[name]
    x = rng.standard_normal(INPUT_SHAPES[name])
    _, ld = layer.forward(Tensor(x[None]))
    analytic = 0.0 if ld is None else float(ld.data[0])
    numeric = fd_logdet(lambda t: layer.forward(t)[0].data, x)
    assert analytic == pytest.approx(numeric, rel=1e-3, abs=1e-6)


def test_haar_matrix_is_orthonormal_and_self_inverse():
    np.testing.assert_allclose(HAAR @ HAAR.T, np.eye(4), atol=1e-15)
    np.testing.assert_allclose(HAAR @ HAAR, np.eye(4), atol=1e-15)


def test_haar_low_band_is_scaled_average(rng, f64):
    x = rng.standard_normal((1, 1, 4, 4))
    y, _ = Downsample("haar").forward(Tensor(x))
    avg = x.reshape(1, 1, 2, 2, 2, 2).mean(axis=(3, 5))
    np.testing.assert_allclose(y.data[:, :1], 2 * avg, atol=1e-14)


def test_additive_is_volume_preserving(store64, rng, f64):
    layer = CouplingLayer(store64, "a", (2, 4, 4), kind="additive", hidden=8)
    randomize(store64, rng)
    y, ld = layer.forward(Tensor(rng.standard_normal((2, 2, 4, 4))))
    assert ld is None and layer.volume_preserving


def test_clamp_bounds_log_scale(store64, rng, f64):
    layer = coupling(store64, (2, 4, 4), clamp=0.5)
    randomize(store64, rng, scale=50.0)
    _, ld = layer.forward(Tensor(rng.standard_normal((1, 2, 4, 4))))
    assert abs(float(ld.data[0])) <= 0.5 * 16 + 1e-12


def test_conditional_coupling_uses_features(store64, rng, f64):
    layer = coupling(store64, (2, 4, 4), cond=(3, 4, 4))
    x = rng.standard_normal((2, 2, 4, 4))
    h1, h2 = (Tensor(rng.standard_normal((2, 3, 4, 4))) for _ in range(2))
    y1, _ = layer.forward(Tensor(x), h1)
    y2, _ = layer.forward(Tensor(x), h2)
    assert not np.allclose(y1.data, y2.data)
    np.testing.assert_allclose(layer.inverse(y1, h1).data, x, atol=1e-12)
    with pytest.raises(ValueError):
        layer.forward(Tensor(x))


def test_conditional_logdet_jacobian(store64, rng, f64):
    layer = coupling(store64, (3, 2, 2), cond=(2, 2, 2))
    h = Tensor(rng.standard_normal((1, 2, 2, 2)))
    x = rng.standard_normal((3, 2, 2))
    _, ld = layer.forward(Tensor(x[None]), h)
    numeric = fd_logdet(lambda t: layer.forward(t, h)[0].data, x)
    assert float(ld.data[0]) == pytest.approx(numeric, rel=1e-3)


def test_recompute_gradients_match_stored(rng, f64):
    x = rng.standard_normal((2, 2, 4, 4))
    hval = rng.standard_normal((2, 3, 4, 4))
    grads = []
    for recompute in (False, True):
        store = ParameterStore(seed=1, dtype=np.float64)
        layer = coupling(store, (2, 4, 4), cond=(3, 4, 4), recompute=recompute)
        xt = Tensor(x, requires_grad=True)
        ht = Tensor(hval, requires_grad=True)
        with Tape() as tape:
            y, ld = layer.forward(xt, ht)
            loss = ops.add(ops.sum(ops.square(y)), ops.sum(ld))
        gx, gh = tape.backward(loss, wrt=[xt, ht])
        grads.append((gx, gh, {n: store.grads[n].copy() for n in store.names()}))
    (a, b, pa), (c, d, pc) = grads
    np.testing.assert_allclose(a, c, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(b, d, rtol=1e-10, atol=1e-12)
    for n in pa:
        np.testing.assert_allclose(pa[n], pc[n], rtol=1e-10, atol=1e-12)


def test_coupling_parameter_gradients(store64, rng, f64):
    layer = coupling(store64, (3, 4, 4))
    x = rng.standard_normal((2, 3, 4, 4))

    def f():
        y, ld = layer.forward(Tensor(x))
        return ops.add(ops.sum(ops.square(y)), ops.sum(ld))
    rep = grad_check(f, store64, max_entries=10)
    assert rep.passed, str(rep)


def test_split_and_merge_state(rng, f64):
    x = rng.standard_normal((2, 4, 2, 2))
    split = Split((4, 2, 2), 1, dest="skip")
    merge = Merge((3, 2, 2), 1)
    state = FlowState(Tensor(x))
    split.apply(state, None)
    assert state.x.shape == (2, 3, 2, 2) and len(state.skips) == 1
    merge.apply(state, None)
    np.testing.assert_array_equal(state.x.data, x)
    merge.unapply(state, None)
    split.unapply(state, None)
    np.testing.assert_array_equal(state.x.data, x)


def test_split_to_output(rng, f64):
    split = Split((6,), 2)
    state = FlowState(Tensor(rng.standard_normal((3, 6))))
    split.apply(state, Features())
    assert split.part_shape == (2,) and state.outputs[0].shape == (3, 2)


def test_coupling_rejects_single_channel(store64):
    with pytest.raises(ValueError):
        CouplingLayer(store64, "x", (1, 4, 4))


def test_odd_extent_downsample_rejected():
    with pytest.raises(ValueError):
        Downsample("haar").out_shape((1, 5, 4))


def test_shuffle_is_a_permutation(f64):
    s = ChannelShuffle(6, seed=3)
    assert sorted(s.perm) == list(range(6))
    with no_grad():
        y, _ = s.forward(Tensor(np.arange(6.0)[None]))
    np.testing.assert_array_equal(y.data[0], s.perm)
