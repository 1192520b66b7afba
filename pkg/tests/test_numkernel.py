# -*- coding: utf-8 -*-

import numpy as np
import pytest

from cfdglib.lab_def import InvalidInputError, LabIOError, NumericError
from cfdglib.numkernel import (PARAMS_HEADER, AdamState, LrSchedule, MlpParams, adam_step, build_mlp, cosine_lr,
                               init_mlp, load_networks, mlp_backward, mlp_forward, mlp_forward_cached, mlp_grad,
                               networks_from_text, networks_to_text, save_networks)


def _scalar_forward(params, x):
    """Straight-line evaluation of a 2-layer net."""
    w0, b0 = params.weights[0], params.biases[0]
    w1, b1 = params.weights[1], params.biases[1]
    hidden = []
    for i in range(w0.shape[0]):
        z = b0[i]
        for j in range(w0.shape[1]):
            z += w0[i, j] * x[j]
        hidden.append(max(z, 0.0))
    out = []
    for i in range(w1.shape[0]):
        z = b1[i]
        for j in range(w1.shape[1]):
            z += w1[i, j] * hidden[j]
        out.append(z)
    return np.array(out)


def _squared_error(target):
    def loss(y):
        diff = y - target
        return 0.5 * float(np.sum(diff ** 2)), diff
    return loss


def test_zero_network_gives_zero_output(rng):
    params = init_mlp([3, 4, 2], rng).zeros_like()
    np.testing.assert_array_equal(mlp_forward(params, rng.normal(size=3)), np.zeros(2))


def test_identity_layer_passes_nonnegative_input():
    params = MlpParams([np.eye(2)], [np.zeros(2)])
    np.testing.assert_array_equal(mlp_forward(params, np.array([0.5, 2.0])), [0.5, 2.0])


def test_forward_matches_scalar_evaluation(rng):
    params = init_mlp([3, 5, 2], rng)
    xs = rng.normal(size=(10, 3))
    batch = mlp_forward(params, xs)
    for x, y in zip(xs, batch):
        np.testing.assert_allclose(y, _scalar_forward(params, x), rtol=0, atol=1e-12)


def test_single_input_returns_vector(rng):
    params = init_mlp([3, 5, 2], rng)
    assert mlp_forward(params, np.ones(3)).shape == (2,)
    assert mlp_forward(params, np.ones((4, 3))).shape == (4, 2)


def test_residual_hidden_layer_adds_its_input(rng):
    params = init_mlp([2, 4, 4, 1], rng, residual=True)
    x = rng.normal(size=2)
    h1 = np.maximum(params.weights[0] @ x + params.biases[0], 0.0)
    h2 = np.maximum(params.weights[1] @ h1 + params.biases[1], 0.0) + h1
    expected = params.weights[2] @ h2 + params.biases[2]
    np.testing.assert_allclose(mlp_forward(params, x), expected, atol=1e-12)

    plain = MlpParams(params.weights, params.biases, residual=False)
    h2_plain = np.maximum(params.weights[1] @ h1 + params.biases[1], 0.0)
    np.testing.assert_allclose(mlp_forward(plain, x), params.weights[2] @ h2_plain + params.biases[2], atol=1e-12)


def test_input_dimension_mismatch_raises(rng):
    params = init_mlp([3, 4, 2], rng)
    with pytest.raises(InvalidInputError):
        mlp_forward(params, np.ones(4))


def test_non_finite_weights_report_layer(rng):
    params = init_mlp([3, 4, 2], rng)
    params.weights[1][0, 0] = np.inf
    with pytest.raises(NumericError) as excinfo:
        mlp_forward(params, np.ones(3))
    assert excinfo.value.layer == 1
    assert 'layer 1' in str(excinfo.value)


@pytest.mark.parametrize('seed', range(10))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    params = init_mlp([3, 5, 2], rng)
    x = rng.normal(size=(4, 3))
    loss = _squared_error(rng.normal(size=(4, 2)))
    _, grads = mlp_grad(params, loss, x)

    h = 1e-5
    tensors = params.tensors()
    for t_index, tensor in enumerate(tensors):
        numeric = np.zeros_like(tensor)
        for idx in np.ndindex(tensor.shape):
            plus = [t.copy() for t in tensors]
            minus = [t.copy() for t in tensors]
            plus[t_index][idx] += h
            minus[t_index][idx] -= h
            f_plus, _ = loss(mlp_forward(params.replace_tensors(plus), x))
            f_minus, _ = loss(mlp_forward(params.replace_tensors(minus), x))
            numeric[idx] = (f_plus - f_minus) / (2 * h)
        np.testing.assert_allclose(grads.tensors()[t_index], numeric, rtol=1e-4, atol=1e-8)


def test_input_gradient_matches_finite_differences(rng):
    params = init_mlp([3, 6, 6, 2], rng)
    x = rng.normal(size=(1, 3))
    target = rng.normal(size=(1, 2))
    y, cache = mlp_forward_cached(params, x)
    _, grad_x = mlp_backward(params, cache, y - target)

    h = 1e-5
    for j in range(3):
        step = np.zeros_like(x)
        step[0, j] = h
        f_plus = 0.5 * np.sum((mlp_forward(params, x + step) - target) ** 2)
        f_minus = 0.5 * np.sum((mlp_forward(params, x - step) - target) ** 2)
        assert grad_x[0, j] == pytest.approx((f_plus - f_minus) / (2 * h), rel=1e-4, abs=1e-8)


def test_constant_loss_gives_zero_gradients(rng):
    params = build_mlp(3, 2, 8, 3, rng)
    value, grads = mlp_grad(params, lambda y: (4.0, np.zeros_like(y)), rng.normal(size=(5, 3)))
    assert value == 4.0
    for g in grads.tensors():
        np.testing.assert_array_equal(g, np.zeros_like(g))


# -----------------------------------------------------
# Adam and schedule
# -----------------------------------------------------

def _scalar_params(value):
    return MlpParams([np.array([[value]])], [np.array([0.0])])


def test_adam_zero_gradient_keeps_parameters(rng):
    params = init_mlp([2, 3, 1], rng)
    state = AdamState.for_params(params)
    new_params, new_state = adam_step(params, params.zeros_like(), state, 1e-3)
    for a, b in zip(params.tensors(), new_params.tensors()):
        np.testing.assert_array_equal(a, b)
    assert new_state.step_count == 1


def test_adam_first_step_is_sign_of_gradient():
    params = _scalar_params(0.5)
    grads = _scalar_params(0.3)
    new_params, _ = adam_step(params, grads, AdamState.for_params(params), 1e-3)
    assert new_params.weights[0][0, 0] - 0.5 == pytest.approx(-1e-3, rel=1e-6)


def test_adam_two_steps_moments():
    params = _scalar_params(0.0)
    state = AdamState.for_params(params)
    params, state = adam_step(params, _scalar_params(1.0), state, 1e-3)
    params, state = adam_step(params, _scalar_params(-1.0), state, 1e-3)
    assert state.step_count == 2
    assert state.first_moment[0][0, 0] == pytest.approx(0.9 * 0.1 - 0.1, abs=1e-10)
    assert state.second_moment[0][0, 0] == pytest.approx(0.999 * 0.001 + 0.001, abs=1e-10)


def test_adam_rejects_bad_arguments(rng):
    params = init_mlp([2, 3, 1], rng)
    state = AdamState.for_params(params)
    with pytest.raises(InvalidInputError):
        adam_step(params, params.zeros_like(), state, 0.0)
    with pytest.raises(InvalidInputError):
        adam_step(params, init_mlp([2, 4, 1], rng), state, 1e-3)


def test_cosine_schedule_endpoints():
    schedule = LrSchedule(1e-3, 1e-5, 100)
    assert cosine_lr(0, schedule) == pytest.approx(1e-3)
    assert cosine_lr(100, schedule) == pytest.approx(1e-5)
    assert cosine_lr(50, LrSchedule(2e-3, 0.0, 100)) == pytest.approx(1e-3)
    with pytest.raises(InvalidInputError):
        cosine_lr(101, schedule)


@pytest.mark.parametrize('lr_min', [0.0, 1e-5, 1e-3])
def test_cosine_schedule_never_increases(lr_min):
    schedule = LrSchedule(1e-3, lr_min, 37)
    rates = np.array([cosine_lr(step, schedule) for step in range(schedule.total_steps + 1)])
    assert np.all(np.diff(rates) <= 0.0)


def test_schedule_validation():
    with pytest.raises(InvalidInputError):
        LrSchedule(0.0, 0.0, 10)
    with pytest.raises(InvalidInputError):
        LrSchedule(1e-3, 1e-2, 10)


# -----------------------------------------------------
# Serialization
# -----------------------------------------------------

def test_text_container_is_bit_exact(rng):
    nets = {'critic': build_mlp(4, 1, 8, 3, rng), 'embed': init_mlp([3, 4], rng, residual=False)}
    text = networks_to_text(nets)
    assert text.startswith(PARAMS_HEADER + '\n')
    assert '@net embed residual=0' in text
    loaded = networks_from_text(text)
    assert list(loaded) == ['critic', 'embed']
    for name, params in nets.items():
        assert loaded[name].residual == params.residual
        for a, b in zip(params.tensors(), loaded[name].tensors()):
            np.testing.assert_array_equal(a, b)


def test_text_container_rejects_missing_header():
    with pytest.raises(InvalidInputError):
        networks_from_text('@net x residual=1\n0 bias 1 0.0\n')


def test_save_and_load_networks(tmp_path, rng):
    nets = {'policy': build_mlp(2, 2, 4, 2, rng)}
    path = str(tmp_path / 'sub' / 'agent.ckpt')
    save_networks(path, nets)
    loaded = load_networks(path)
    np.testing.assert_array_equal(loaded['policy'].weights[0], nets['policy'].weights[0])
    with pytest.raises(LabIOError):
        load_networks(str(tmp_path / 'missing.ckpt'))
