"""
Amortized posterior over object positions.

A state s^n_t is iterated over time steps t and object index n:

    beta^n_t = sigm(W^beta [s^n_{t-1}, s^{n-1}_t, v_t] + b^beta)
    shat^n_t = tanh(W^s [s^n_{t-1}, s^{n-1}_t, v_t] + b^s)
    s^n_t    = (1 - beta^n_t) * s^{n-1}_t + beta^n_t * shat^n_t

with s^0_t = 0 and s^n_0 = tanh(phi_{s0^n}) learned separately for every
supported object count. Positions are Gaussian with mean mu(s) = W^mu s + b^mu
and standard deviation exp(0.5 (W^sigma s + b^sigma)), clamped to [1e-4, 10].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from errors import ContractError
from numerics import (
    ParameterGroup,
    Tensor,
    as_tensor,
    clip,
    exp,
    gaussian_sample,
    getitem,
    log,
    reshape,
    sigmoid,
    stack,
    tanh,
    tensor_sum,
    value_of,
)

STD_MIN = 1e-4
STD_MAX = 10.0
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class InferenceParams(ParameterGroup):
    """
    W^beta and W^s are (S, 2S + P) acting on [s_{t-1}^n, s_t^{n-1}, v_t].
    initial_states maps an object count N to phi_{s0} of shape (N, S).
    """

    prefix = "inference"

    w_beta: Tensor
    b_beta: Tensor
    w_s: Tensor
    b_s: Tensor
    w_mu: Tensor
    b_mu: Tensor
    w_sigma: Tensor
    b_sigma: Tensor
    initial_states: dict

    @property
    def state_size(self):
        return value_of(self.b_beta).shape[0]

    @property
    def object_counts(self):
        return tuple(sorted(self.initial_states))


@dataclass
class PosteriorOutput:
    """states (..., T, N, S); means and stds (..., T, N, 2)"""

    states: Tensor
    means: Tensor
    stds: Tensor


def _split_columns(weight, state_size):
    weight = as_tensor(weight)
    previous = getitem(weight, (slice(None), slice(0, state_size)))
    preceding = getitem(weight, (slice(None), slice(state_size, 2 * state_size)))
    image = getitem(weight, (slice(None), slice(2 * state_size, None)))
    return previous, preceding, image


def infer(params: InferenceParams, images, n_objects, initial_states=None) -> PosteriorOutput:
    """
    Run the recurrence over images (..., T, P).

    Args:
        params: inference weights (arrays or Tensors)
        images: flattened row-major frames, binary or probabilities
        n_objects: N, must have a learned initial state
        initial_states: optional (..., N, S) states replacing tanh(phi_{s0})

    Returns:
        PosteriorOutput for every (t, n)
    """
    if initial_states is None and n_objects not in params.initial_states:
        raise ContractError(f"no learned initial state for N={n_objects}")
    images = as_tensor(images)
    state_size = params.state_size
    if images.shape[-1] != value_of(params.w_beta).shape[1] - 2 * state_size:
        raise ContractError(f"images have {images.shape[-1]} pixels, weights expect "
                            f"{value_of(params.w_beta).shape[1] - 2 * state_size}")
    leading = images.shape[:-2]
    steps, pixels = images.shape[-2:]
    batch = int(np.prod(leading, dtype=int))
    images = reshape(images, (batch, steps, pixels))

    beta_prev, beta_obj, beta_img = _split_columns(params.w_beta, state_size)
    hat_prev, hat_obj, hat_img = _split_columns(params.w_s, state_size)
    # The image term does not depend on the recurrence; compute it for all t.
    beta_drive = images @ beta_img.mT + params.b_beta
    hat_drive = images @ hat_img.mT + params.b_s

    zeros = np.zeros((batch, state_size))
    if initial_states is None:
        initial = tanh(params.initial_states[n_objects])
    else:
        initial = as_tensor(initial_states)
        if initial.shape[-2:] != (n_objects, state_size):
            raise ContractError(f"initial states must end in shape {(n_objects, state_size)}")
        if initial.ndim > 2:
            initial = reshape(initial, (batch, n_objects, state_size))
    previous = [getitem(initial, (Ellipsis, n, slice(None))) + zeros for n in range(n_objects)]

    per_step = []
    for t in range(steps):
        beta_t = getitem(beta_drive, (Ellipsis, t, slice(None)))
        hat_t = getitem(hat_drive, (Ellipsis, t, slice(None)))
        preceding = Tensor(zeros)
        objects = []
        for n in range(n_objects):
            beta = sigmoid(beta_t + previous[n] @ beta_prev.mT + preceding @ beta_obj.mT)
            contribution = tanh(hat_t + previous[n] @ hat_prev.mT + preceding @ hat_obj.mT)
            state = (1.0 - beta) * preceding + beta * contribution
            previous[n] = state
            preceding = state
            objects.append(state)
        per_step.append(stack(objects, axis=-2))

    states = reshape(stack(per_step, axis=-3), leading + (steps, n_objects, state_size))
    means = states @ as_tensor(params.w_mu).mT + params.b_mu
    log_var = states @ as_tensor(params.w_sigma).mT + params.b_sigma
    stds = clip(exp(0.5 * log_var), STD_MIN, STD_MAX)
    return PosteriorOutput(states=states, means=means, stds=stds)


def sample_positions(output: PosteriorOutput, noise):
    """a = mu + sigma * eps, broadcasting extra leading axes of eps (Monte-Carlo draws)"""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-3:] != value_of(output.means).shape[-3:]:
        raise ContractError(f"noise shape {noise.shape} does not match {value_of(output.means).shape}")
    extra = noise.ndim - value_of(output.means).ndim
    means, stds = output.means, output.stds
    if extra > 0:
        pad = np.zeros(noise.shape)
        means, stds = means + pad, stds + pad
    return gaussian_sample(means, stds, noise)


def log_q(output: PosteriorOutput, a):
    """Sum of diagonal Gaussian log-densities log N(a; mu, diag sigma^2)"""
    a = as_tensor(a)
    stds = as_tensor(output.stds)
    z = (a - output.means) / stds
    return tensor_sum(-0.5 * z * z - log(stds) - 0.5 * LOG_2PI)
