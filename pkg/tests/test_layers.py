import math
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from udaqa import autodiff as ad
from udaqa.autodiff import Tensor
from udaqa.layers import (AdamState, CheckpointError, LinearLayer, Mlp, NonFiniteGradientError, adam_step,
                          bind, init_params, load_checkpoint, mlp_forward, save_checkpoint)


def test_init_biases_are_zero():
    (layer,) = init_params([4, 1], 7)
    assert np.all(layer.bias == 0.0)


def test_init_is_deterministic():
    a, b = init_params([5, 3, 2], 11), init_params([5, 3, 2], 11)
    for la, lb in zip(a, b):
        assert la.weight.tobytes() == lb.weight.tobytes()


def test_init_respects_fan_in_bound():
    for layer in init_params([64, 32, 1], 0):
        assert np.all(np.abs(layer.weight) < 1 / math.sqrt(layer.in_width))
        # the draw should actually use the range, not a tiny fraction of it
        assert np.abs(layer.weight).max() > 0.5 / math.sqrt(layer.in_width)


@pytest.mark.parametrize("widths", [[4, 0, 1], [3], [], [2, -1]])
def test_init_rejects_bad_widths(widths):
    with pytest.raises(ValueError):
        init_params(widths, 0)


def test_identity_layer_passes_input_through():
    net = Mlp([LinearLayer(np.eye(3), np.zeros(3))])
    x = np.array([[1.0, -2.0, 3.0]])
    np.testing.assert_array_equal(mlp_forward(net, Tensor(x)).data, x)


def test_zero_weights_give_final_bias():
    net = Mlp([LinearLayer(np.zeros((4, 3)), np.ones(4)), LinearLayer(np.zeros((2, 4)), np.array([0.5, -1.0]))])
    np.testing.assert_array_equal(mlp_forward(net, Tensor(np.ones(3))).data, [0.5, -1.0])


def test_two_layer_hand_example():
    # h = relu([[1, -1], [2, 1]] @ [1, 2] + [0, -1]) = relu([-1, 3]) = [0, 3]; y = [1, 2] @ h + 0.5 = 6.5
    net = Mlp([LinearLayer(np.array([[1.0, -1.0], [2.0, 1.0]]), np.array([0.0, -1.0])),
               LinearLayer(np.array([[1.0, 2.0]]), np.array([0.5]))])
    assert mlp_forward(net, Tensor([1.0, 2.0])).data.tolist() == [6.5]


def test_width_mismatch_rejected():
    net = Mlp(init_params([3, 2], 0))
    with pytest.raises(ad.ShapeError):
        mlp_forward(net, Tensor(np.ones((2, 4))))
    with pytest.raises(ValueError):
        Mlp([LinearLayer(np.ones((2, 3)), np.zeros(2)), LinearLayer(np.ones((1, 3)), np.zeros(1))])


def test_mlp_gradients_pass_finite_difference_check():
    net = Mlp(init_params([4, 6, 5, 2], 3))
    x = np.random.default_rng(0).normal(size=(3, 4))
    point = {f"{k}{i}": arr for i, l in enumerate(net.layers) for k, arr in (("w", l.weight), ("b", l.bias))}

    def fn(**p):
        pairs = [(p[f"w{i}"], p[f"b{i}"]) for i in range(len(net.layers))]
        return ad.tsum(ad.square(mlp_forward(pairs, Tensor(x))))

    res = ad.finite_diff_check(fn, point)
    assert res.checked > 0 and res.max_rel_error <= 1e-4


def test_bind_reuses_leaves():
    net = Mlp(init_params([2, 2], 0))
    leaf = Tensor(net.layers[0].weight, requires_grad=True)
    (w, b), = bind(net, {id(net.layers[0].weight): leaf})
    assert w is leaf and not b.requires_grad


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_is_lr_sized():
    p = {"w": np.array([0.0])}
    adam_step(p, {"w": np.array([1.0])}, AdamState(), lr=0.1)
    # bias correction makes m_hat = v_hat = 1, so the step is lr / (1 + eps)
    assert p["w"][0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)


@given(st.lists(st.floats(-50, 50).filter(lambda g: abs(g) > 1e-3), min_size=1, max_size=6))
def test_adam_with_zero_betas_is_a_sign_step(g):
    g = np.array(g)
    p = {"w": np.zeros_like(g)}
    adam_step(p, {"w": g}, AdamState(beta1=0.0, beta2=0.0, eps=0.0), lr=0.01)
    np.testing.assert_allclose(p["w"], -0.01 * np.sign(g), rtol=1e-12)


def test_adam_converges_on_a_quadratic():
    p, state = {"w": np.array([3.0])}, AdamState()
    for _ in range(500):
        adam_step(p, {"w": 2 * (p["w"] - 1.25)}, state, lr=0.05)
    assert abs(p["w"][0] - 1.25) < 1e-3
    assert state.step == 500


def test_adam_coupled_weight_decay_enters_the_gradient():
    a, b = {"w": np.array([2.0])}, {"w": np.array([2.0])}
    sa, sb = AdamState(), AdamState()
    for _ in range(3):
        adam_step(a, {"w": np.array([0.3])}, sa, lr=0.01, weight_decay=0.1)
        adam_step(b, {"w": np.array([0.3]) + 0.1 * b["w"]}, sb, lr=0.01)
    assert a["w"].tobytes() == b["w"].tobytes()


def test_adam_is_bitwise_reproducible():
    def run():
        p, s = {"w": np.linspace(-1, 1, 5)}, AdamState()
        for k in range(20):
            adam_step(p, {"w": np.sin(p["w"] * (k + 1))}, s, lr=0.02, weight_decay=1e-5)
        return p["w"].tobytes()

    assert run() == run()


def test_adam_nan_gradient_aborts_before_any_update():
    p = {"a": np.array([1.0]), "b": np.array([2.0])}
    state = AdamState()
    with pytest.raises(NonFiniteGradientError, match="'b'"):
        adam_step(p, {"a": np.array([1.0]), "b": np.array([np.nan])}, state, lr=0.1)
    assert p["a"][0] == 1.0 and state.step == 0


def test_adam_rejects_missing_gradient_and_bad_lr():
    with pytest.raises(KeyError):
        adam_step({"a": np.zeros(1)}, {}, AdamState(), lr=0.1)
    with pytest.raises(ValueError):
        adam_step({"a": np.zeros(1)}, {"a": np.zeros(1)}, AdamState(), lr=0.0)


def test_checkpoint_round_trip_is_bitwise(tmp_path, rng):
    arrays = [("net.0.weight", rng.normal(size=(3, 4))), ("net.0.bias", rng.normal(size=3)),
              ("scalar", np.array(np.pi))]
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, arrays)
    back = load_checkpoint(path)
    assert [n for n, _ in back] == [n for n, _ in arrays]
    for (_, a), (_, b) in zip(arrays, back):
        assert a.shape == b.shape and a.tobytes() == b.tobytes()
    save_checkpoint(tmp_path / "again.ckpt", back)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_layout_is_as_documented(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, [("w", np.array([1.5, -2.0]))])
    blob = path.read_bytes()
    assert blob[:8] == b"UDAQACKP"
    version, hlen = struct.unpack("<II", blob[8:16])
    assert version == 1
    assert blob[16 + hlen:] == struct.pack("<2d", 1.5, -2.0)


@pytest.mark.parametrize("damage", ["truncate", "magic", "version", "trailing", "short"])
def test_corrupt_checkpoints_rejected(tmp_path, damage):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, [("w", np.ones((2, 2)))])
    blob = bytearray(path.read_bytes())
    if damage == "truncate":
        blob = blob[:-3]
    elif damage == "magic":
        blob[0:1] = b"X"
    elif damage == "version":
        blob[8:12] = struct.pack("<I", 99)
    elif damage == "trailing":
        blob += b"\0"
    else:
        blob = blob[:10]
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_checkpoint_file(tmp_path):
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(tmp_path / "nope.ckpt")
