"""
Renderer: draws N objects onto a latent canvas and emits Bernoulli pixels.

Starting from x^0 = tanh(theta_x0) every object is composited in turn,

    alpha^n = sigm(W^alpha a^n + b^alpha)
    xhat^n  = tanh(W^x a^n + b^x)
    x^n     = (1 - alpha^n) * x^{n-1} + alpha^n * xhat^n

and the image is Bernoulli(sigm(W^v x^N + b^v)). Pixels are row-major with
the origin at the top-left corner.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from errors import ContractError
from numerics import (
    ParameterGroup,
    Tensor,
    as_tensor,
    clip,
    getitem,
    log,
    reshape,
    sigmoid,
    tanh,
    tensor_sum,
    value_of,
)

PROB_EPS = 1e-7


@dataclass
class RendererParams(ParameterGroup):
    """W^alpha, W^x are (D, 2); W^v is (P, D); theta_x0 is (D,)"""

    prefix = "renderer"

    w_alpha: Tensor
    b_alpha: Tensor
    w_x: Tensor
    b_x: Tensor
    w_v: Tensor
    b_v: Tensor
    theta_x0: Tensor

    @property
    def canvas_size(self):
        return value_of(self.w_alpha).shape[0]

    @property
    def pixels(self):
        return value_of(self.w_v).shape[0]


def initial_canvas(params: RendererParams, batch):
    return tanh(params.theta_x0) + np.zeros((batch, params.canvas_size))


def composite_step(params: RendererParams, canvas, position):
    """Blend one object at position (M, 2) into the canvas (M, D)"""
    position = as_tensor(position)
    alpha = sigmoid(position @ as_tensor(params.w_alpha).mT + params.b_alpha)
    contribution = tanh(position @ as_tensor(params.w_x).mT + params.b_x)
    return (1.0 - alpha) * canvas + alpha * contribution


def emit(params: RendererParams, canvas):
    """Pixel probabilities sigm(W^v x + b^v)"""
    return sigmoid(as_tensor(canvas) @ as_tensor(params.w_v).mT + params.b_v)


def render_canvas(params: RendererParams, positions):
    """Pre-emission canvas x^N for positions (M, N, 2)"""
    positions = as_tensor(positions)
    canvas = initial_canvas(params, positions.shape[0])
    for n in range(positions.shape[1]):
        canvas = composite_step(params, canvas, getitem(positions, (slice(None), n, slice(None))))
    return canvas


def render(params: RendererParams, positions):
    """
    Pixel probabilities for objects at the given positions.

    Args:
        params: renderer weights (arrays or Tensors)
        positions: (..., N, 2); N may be zero

    Returns:
        Tensor (..., P) of probabilities in (0, 1)
    """
    positions = as_tensor(positions)
    if positions.ndim < 2 or positions.shape[-1] != 2:
        raise ContractError(f"positions must have shape (..., N, 2), got {positions.shape}")
    leading = positions.shape[:-2]
    n_objects = positions.shape[-2]
    flat = reshape(positions, (int(np.prod(leading, dtype=int)), n_objects, 2))
    probs = emit(params, render_canvas(params, flat))
    return reshape(probs, leading + (params.pixels,))


def check_binary(image):
    image = np.asarray(image)
    if not np.all((image == 0) | (image == 1)):
        raise ContractError("image must be binary (0/1 entries)")
    return image.astype(np.float64)


def log_likelihood_image(probs, image):
    """Bernoulli log-likelihood summed over the pixel axis (last axis)"""
    image = check_binary(image)
    probs = clip(as_tensor(probs), PROB_EPS, 1.0 - PROB_EPS)
    return tensor_sum(image * log(probs) + (1.0 - image) * log(1.0 - probs), axis=-1)


def sample_image(probs, rng: np.random.Generator):
    """Independent Bernoulli draw per pixel"""
    probs = value_of(probs)
    return (rng.random(probs.shape) < probs).astype(np.uint8)
