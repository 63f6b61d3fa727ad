import numpy as np
import pytest

from cpaem.errors import DegenerateNetworkError, InputError
from cpaem.network import (
    ActivationCode,
    GenerativeNetwork,
    Layer,
    NoiseModel,
    activation_code,
    activation_signs,
    backprop_affine,
    forward,
    linear_network,
    load_model,
    parse_architecture,
    partial_affine,
    per_region_affine,
    random_network,
    save_model,
    slope_diagonals,
)

from conftest import knot_net, rng


def test_forward_identity():
    net = linear_network(np.eye(2), np.zeros(2))
    assert np.array_equal(forward(net, [0.3, -0.7]), [0.3, -0.7])


def test_forward_hand_evaluated(relu_knot):
    assert forward(relu_knot, [2.0])[0] == 2.0
    assert forward(relu_knot, [-3.0])[0] == 3.0
    assert forward(knot_net("abs"), [2.0])[0] == 4.0


def test_forward_dimension_mismatch(relu_knot):
    with pytest.raises(InputError):
        forward(relu_knot, [1.0, 2.0])


def test_codes_and_tie_rule(relu_knot):
    assert activation_code(relu_knot, [2.0]).signs == ((1, -1),)
    assert activation_code(relu_knot, [-2.0]).signs == ((-1, 1),)
    assert activation_code(relu_knot, [0.0]).signs == ((1, 1),)


def test_affine_of_knot_code(relu_knot):
    aff = per_region_affine(relu_knot, ActivationCode(((1, -1),)))
    assert np.allclose(aff.slope, [[1.0]]) and np.allclose(aff.offset, [0.0])
    w, b = partial_affine(relu_knot, ActivationCode(((1, -1),)), 1)
    assert np.array_equal(w, [[1.0], [-1.0]]) and np.array_equal(b, [0.0, 0.0])
    assert np.array_equal(backprop_affine(relu_knot, ActivationCode(((1, -1),)), 1), [[1.0, 1.0]])


def test_linear_net_empty_code():
    w = np.array([[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]])
    net = linear_network(w, [1.0, 2.0, 3.0])
    code = activation_code(net, np.zeros(2))
    aff = per_region_affine(net, code)
    assert code.flat == ()
    assert np.array_equal(aff.slope, w) and np.array_equal(aff.offset, [1.0, 2.0, 3.0])


@pytest.mark.parametrize("act", ["relu", "leaky_relu", "abs"])
def test_forward_equals_region_affine(act):
    net = random_network([2, 6, 5, 3], act, eta=0.3, rng=11)
    zs = rng(1).normal(size=(200, 2)) * 2
    for z in zs:
        aff = per_region_affine(net, activation_code(net, z))
        assert np.max(np.abs(forward(net, z) - aff(z))) < 1e-10


def test_layer_factorization(planar_net):
    for z in rng(2).normal(size=(20, 2)):
        code = activation_code(planar_net, z)
        a = per_region_affine(planar_net, code).slope
        diags = slope_diagonals(planar_net, code)
        for ell in range(1, planar_net.depth):
            head = backprop_affine(planar_net, code, ell)
            w, _ = partial_affine(planar_net, code, ell)
            assert np.allclose(head @ (diags[ell - 1][:, None] * w), a, atol=1e-10)
        assert np.array_equal(backprop_affine(planar_net, code, planar_net.depth), np.eye(2))
        w_last, b_last = partial_affine(planar_net, code, planar_net.depth)
        assert np.allclose(w_last, a, atol=1e-12)


def test_batch_signs_match_codes(planar_net):
    zs = rng(3).normal(size=(50, 2))
    signs = activation_signs(planar_net, zs)
    for z, row in zip(zs, signs):
        assert tuple(row) == activation_code(planar_net, z).flat


def test_code_flip_and_order():
    c = ActivationCode(((1, -1), (1,)))
    assert c.flip(1, 1).signs == ((1, 1), (1,))
    assert c.flip(2, 0) < c
    assert c.key() == np.array([1, -1, 1], dtype=np.int8).tobytes()


def test_parse_architecture():
    assert parse_architecture("1-8-2 relu") == ([1, 8, 2], "relu", 0.0)
    assert parse_architecture("1-4-4-2 leaky_relu:0.2") == ([1, 4, 4, 2], "leaky_relu", 0.2)
    for bad in ["", "1", "1-x-2", "1-2 swish", "0-2 relu"]:
        with pytest.raises(InputError):
            parse_architecture(bad)


def test_random_network_seeded():
    a = random_network([1, 8, 2], rng=7)
    b = random_network([1, 8, 2], rng=7)
    assert np.array_equal(a.parameters(), b.parameters())
    net = random_network([1, 4, 4, 2], "leaky_relu", 0.2, rng=1)
    assert net.depth == 3 and net.hidden_widths == (4, 4)


def test_mismatched_dims_rejected():
    with pytest.raises(InputError):
        GenerativeNetwork((Layer(np.ones((3, 1)), np.zeros(3), "relu"), Layer(np.ones((2, 2)), np.zeros(2))))


def test_dead_unit_rejected():
    with pytest.raises(DegenerateNetworkError):
        GenerativeNetwork((Layer(np.array([[1.0], [0.0]]), np.zeros(2), "relu"), Layer(np.ones((1, 2)), np.zeros(1))))


def test_model_round_trip(tmp_path, planar_net):
    noise = NoiseModel(np.diag([0.2, 0.3]), 2.0 * np.eye(2))
    path = tmp_path / "m.json"
    save_model(path, planar_net, noise)
    net2, noise2 = load_model(path)
    assert np.array_equal(net2.parameters(), planar_net.parameters())
    assert np.array_equal(noise2.sigma_x, noise.sigma_x)
    assert [l.activation for l in net2.layers] == [l.activation for l in planar_net.layers]
    assert net2.layers[0].eta == 0.2


def test_noise_requires_spd():
    with pytest.raises(InputError):
        NoiseModel(np.array([[1.0, 2.0], [2.0, 1.0]]), np.eye(1))
