"""Tests for canvas compositing and the Bernoulli emission"""

import numpy as np
import pytest

from errors import ContractError
from numerics import Tensor, backward, tensor_sum, value_of
from renderer import (
    RendererParams,
    composite_step,
    emit,
    initial_canvas,
    log_likelihood_image,
    render,
    render_canvas,
    sample_image,
)


def make_params(seed=0, canvas=6, pixels=9):
    rng = np.random.default_rng(seed)
    return RendererParams(
        w_alpha=rng.normal(size=(canvas, 2)), b_alpha=rng.normal(size=canvas),
        w_x=rng.normal(size=(canvas, 2)), b_x=rng.normal(size=canvas),
        w_v=rng.normal(size=(pixels, canvas)), b_v=rng.normal(size=pixels),
        theta_x0=rng.normal(size=canvas),
    )


def test_render_shape_and_range():
    params = make_params()
    positions = np.random.default_rng(1).normal(size=(4, 3, 2, 2))
    probs = value_of(render(params, positions))
    assert probs.shape == (4, 3, 9)
    assert np.all((probs > 0) & (probs < 1))


def test_no_objects_renders_the_initial_canvas():
    params = make_params()
    probs = value_of(render(params, np.zeros((3, 0, 2))))
    expected = value_of(emit(params, np.tanh(params.theta_x0)[None]))
    np.testing.assert_allclose(probs, np.repeat(expected, 3, axis=0))


def test_objects_are_composited_in_order():
    params = make_params()
    positions = np.random.default_rng(2).normal(size=(5, 3, 2))
    canvas = initial_canvas(params, 5)
    for n in range(3):
        canvas = composite_step(params, canvas, positions[:, n])
    np.testing.assert_allclose(value_of(render_canvas(params, positions)), value_of(canvas))
    swapped = value_of(render(params, positions[:, ::-1]))
    assert not np.allclose(swapped, value_of(render(params, positions)))


def test_saturated_gate_keeps_only_the_last_object():
    params = make_params()
    params.b_alpha = np.full(6, 50.0)
    params.w_alpha = np.zeros((6, 2))
    positions = np.random.default_rng(3).normal(size=(2, 2, 2))
    np.testing.assert_allclose(value_of(render(params, positions)), value_of(render(params, positions[:, 1:])))


def test_render_rejects_bad_positions():
    with pytest.raises(ContractError):
        render(make_params(), np.zeros((3, 3)))


def test_log_likelihood_image():
    probs = np.array([[0.2, 0.9, 0.5]])
    image = np.array([[0, 1, 1]])
    expected = np.log(0.8) + np.log(0.9) + np.log(0.5)
    assert value_of(log_likelihood_image(probs, image))[0] == pytest.approx(expected)
    with pytest.raises(ContractError):
        log_likelihood_image(probs, np.array([[0, 0.5, 1]]))


def test_extreme_probabilities_stay_finite():
    ll = value_of(log_likelihood_image(np.array([0.0, 1.0]), np.array([1, 0])))
    assert np.isfinite(ll)


def test_sample_image_is_binary_and_seeded():
    probs = np.full((4, 9), 0.5)
    first = sample_image(probs, np.random.default_rng(7))
    second = sample_image(probs, np.random.default_rng(7))
    assert first.dtype == np.uint8
    assert set(np.unique(first)) <= {0, 1}
    np.testing.assert_array_equal(first, second)


def test_render_gradient(numeric_grad):
    params = make_params(canvas=4, pixels=5)
    positions = np.random.default_rng(4).normal(size=(3, 2, 2))
    image = (np.random.default_rng(5).random((3, 5)) < 0.5).astype(float)

    def loss(p):
        return tensor_sum(log_likelihood_image(render(p, positions), image))

    leaves = params.leaves()
    grads = dict(zip(leaves.named(), backward(loss(leaves), list(leaves.named().values()))))
    for name, array in params.named().items():
        expected = numeric_grad(lambda: loss(params).item(), array)
        for index, value in expected.items():
            assert grads[name][index] == pytest.approx(value, rel=1e-5, abs=1e-7), name


def test_positions_receive_gradient():
    params = make_params()
    positions = Tensor(np.zeros((1, 1, 2)), requires_grad=True)
    (grad,) = backward(tensor_sum(render(params, positions)), [positions])
    assert np.any(grad != 0)
