"""
Linear Gaussian state-space model of object motion.

Each object carries a latent state h = (x, y, vx, vy) that evolves under
Newtonian dynamics with a constant force,

    h_t = A h_{t-1} + u + eta,   eta ~ N(0, Sigma_H),   A = [[I, delta I], [0, I]]
    a_t = B h_t + xi,            xi  ~ N(0, Sigma_A),   B = [I, 0]

with a K-component Gaussian mixture over the initial state. Exact inference
(Kalman filter, Rauch-Tung-Striebel smoother, mixture posterior) is written
in terms of numerics tensors so every quantity is differentiable with
respect to the parameters and the observed positions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from errors import ContractError, CovarianceError, NumericalError
from numerics import (
    ParameterGroup,
    Tensor,
    as_tensor,
    exp,
    getitem,
    logdet,
    logsumexp,
    matvec,
    reshape,
    solve,
    stack,
    tensor_sum,
    transpose,
    value_of,
    where,
)

logger = logging.getLogger(__name__)

STATE_DIM = 4
OBS_DIM = 2
EMISSION = np.array([[1.0, 0.0, 0.0, 0.0],
                     [0.0, 1.0, 0.0, 0.0]])
# A = I + delta * VELOCITY_COUPLING
VELOCITY_COUPLING = np.array([[0.0, 0.0, 1.0, 0.0],
                              [0.0, 0.0, 0.0, 1.0],
                              [0.0, 0.0, 0.0, 0.0],
                              [0.0, 0.0, 0.0, 0.0]])
LOG_2PI = math.log(2.0 * math.pi)
SYMMETRY_TOL = 1e-12
EIGEN_TOL = 1e-10


def transition_matrix(delta):
    """A as a function of the sampling period, differentiable in delta"""
    return np.eye(STATE_DIM) + as_tensor(delta) * VELOCITY_COUPLING


def check_covariance(name, cov):
    """Raise CovarianceError unless every matrix in cov is symmetric PSD"""
    cov = value_of(cov)
    if cov.ndim < 2 or cov.shape[-1] != cov.shape[-2]:
        raise CovarianceError(f"{name} must be square, got shape {cov.shape}")
    scale = max(1.0, float(np.max(np.abs(cov))) if cov.size else 1.0)
    if np.max(np.abs(cov - np.swapaxes(cov, -1, -2)), initial=0.0) > SYMMETRY_TOL * scale:
        raise CovarianceError(f"{name} is not symmetric")
    if not np.all(np.isfinite(cov)):
        raise CovarianceError(f"{name} has non-finite entries")
    if cov.size and np.min(np.linalg.eigvalsh(cov)) < -EIGEN_TOL * scale:
        raise CovarianceError(f"{name} is not positive semi-definite")


@dataclass
class GaussianBelief:
    """Gaussian over latent states; mean (..., d) and cov (..., d, d)"""

    mean: Tensor
    cov: Tensor

    def at(self, step):
        """Belief at one time index of a stacked (..., T, d) belief"""
        return GaussianBelief(getitem(as_tensor(self.mean), (Ellipsis, step, slice(None))),
                              getitem(as_tensor(self.cov), (Ellipsis, step, slice(None), slice(None))))

    def __len__(self):
        return value_of(self.mean).shape[-2]

    def check(self):
        check_covariance("belief covariance", self.cov)


@dataclass
class FilterResult:
    filtered: GaussianBelief
    predicted: GaussianBelief
    log_likelihood: Tensor
    mask: np.ndarray


@dataclass
class Trajectory:
    h: np.ndarray
    a: np.ndarray
    component: int | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.float64)
        if self.mask is None:
            self.mask = np.ones(len(self.a), dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if not (len(self.h) == len(self.a) == len(self.mask)):
            raise ContractError("trajectory states, positions and mask must have equal length")

    def __len__(self):
        return len(self.a)


@dataclass
class LgssmParams(ParameterGroup):
    """
    Physical LGSSM parameters. Entries are arrays or Tensors.

    log_weights holds log pi_k; prior_means is (K, 4) and prior_covs (K, 4, 4).
    """

    prefix = "lgssm_physical"

    delta: Tensor
    force: Tensor
    transition_cov: Tensor
    emission_cov: Tensor
    log_weights: Tensor
    prior_means: Tensor
    prior_covs: Tensor

    @classmethod
    def create(cls, delta, force, transition_cov, emission_cov, weights, prior_means, prior_covs):
        """Build validated parameters from plain arrays"""
        weights = np.atleast_1d(np.asarray(weights, dtype=np.float64))
        prior_means = np.asarray(prior_means, dtype=np.float64).reshape(len(weights), STATE_DIM)
        prior_covs = np.asarray(prior_covs, dtype=np.float64).reshape(len(weights), STATE_DIM, STATE_DIM)
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ContractError("mixture weights must lie on the simplex")
        with np.errstate(divide="ignore"):
            log_weights = np.log(weights)
        params = cls(
            delta=np.asarray(delta, dtype=np.float64).reshape(()),
            force=np.asarray(force, dtype=np.float64).reshape(STATE_DIM),
            transition_cov=np.asarray(transition_cov, dtype=np.float64).reshape(STATE_DIM, STATE_DIM),
            emission_cov=np.asarray(emission_cov, dtype=np.float64).reshape(OBS_DIM, OBS_DIM),
            log_weights=log_weights,
            prior_means=prior_means,
            prior_covs=prior_covs,
        )
        params.validate()
        return params

    def validate(self):
        check_covariance("transition noise covariance", self.transition_cov)
        check_covariance("emission noise covariance", self.emission_cov)
        check_covariance("mixture prior covariance", self.prior_covs)

    @property
    def n_components(self):
        return value_of(self.log_weights).shape[-1]

    @property
    def weights(self):
        return np.exp(value_of(self.log_weights))

    @property
    def transition(self):
        return transition_matrix(self.delta)

    @property
    def emission(self):
        return EMISSION


def _covariance_from_factor(raw):
    """L L^T with L lower triangular and a log-parameterized diagonal"""
    raw = as_tensor(raw)
    dim = raw.shape[-1]
    strict = np.tril(np.ones((dim, dim), dtype=bool), -1)
    diagonal = np.eye(dim, dtype=bool)
    factor = where(strict, raw, 0.0) + where(diagonal, exp(where(diagonal, raw, 0.0)), 0.0)
    return factor @ transpose(factor)


def _factor_from_covariance(name, cov):
    cov = np.asarray(cov, dtype=np.float64)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise CovarianceError(f"{name} must be positive definite to be learned") from exc
    diag = np.diagonal(chol, axis1=-2, axis2=-1)
    return np.tril(chol, -1) + np.log(diag)[..., :, None] * np.eye(cov.shape[-1])


@dataclass
class LgssmFactors(ParameterGroup):
    """
    Unconstrained parameterization used during learning.

    Covariances are Cholesky factors with log-diagonal, mixture weights are
    softmax logits; delta and force are free.
    """

    prefix = "lgssm"

    delta: Tensor
    force: Tensor
    transition_chol: Tensor
    emission_chol: Tensor
    mixture_logits: Tensor
    prior_means: Tensor
    prior_chol: Tensor

    @classmethod
    def from_params(cls, params: LgssmParams):
        values = params.values()
        logits = np.asarray(values.log_weights, dtype=np.float64)
        return cls(
            delta=values.delta,
            force=values.force,
            transition_chol=_factor_from_covariance("transition noise covariance", values.transition_cov),
            emission_chol=_factor_from_covariance("emission noise covariance", values.emission_cov),
            mixture_logits=logits - special.logsumexp(logits),
            prior_means=values.prior_means,
            prior_chol=_factor_from_covariance("mixture prior covariance", values.prior_covs),
        )

    def resolve(self) -> LgssmParams:
        logits = as_tensor(self.mixture_logits)
        return LgssmParams(
            delta=as_tensor(self.delta),
            force=as_tensor(self.force),
            transition_cov=_covariance_from_factor(self.transition_chol),
            emission_cov=_covariance_from_factor(self.emission_chol),
            log_weights=logits - logsumexp(logits, axis=-1),
            prior_means=as_tensor(self.prior_means),
            prior_covs=_covariance_from_factor(self.prior_chol),
        )


def _check_innovation(innovation_cov, observed, step):
    eigen = np.linalg.eigvalsh(innovation_cov)
    scale = np.maximum(1.0, np.abs(eigen).max(axis=-1))
    singular = (eigen.min(axis=-1) <= 1e-12 * scale) & observed
    if np.any(singular):
        raise NumericalError(f"singular innovation covariance at time-step {step}", step=step)


def filter_linear_gaussian(transition, offset, transition_cov, emission, emission_cov,
                           init_mean, init_cov, observations, mask=None) -> FilterResult:
    """
    Kalman filter for any state and observation dimension.

    Args:
        transition: (d, d) matrix, offset: (d,) constant input
        transition_cov: (d, d), emission: (m, d), emission_cov: (m, m)
        init_mean: (..., d), init_cov: (..., d, d) belief over the first state
        observations: (..., T, m)
        mask: booleans broadcastable to (..., T); False marks a missing step

    Returns:
        FilterResult with beliefs stacked over time (axis -2 for means) and
        the log-likelihood of the observed steps per batch entry.
    """
    obs = as_tensor(observations)
    steps = obs.shape[-2]
    transition, offset = as_tensor(transition), as_tensor(offset)
    transition_cov, emission = as_tensor(transition_cov), as_tensor(emission)
    emission_cov = as_tensor(emission_cov)
    init_mean, init_cov = as_tensor(init_mean), as_tensor(init_cov)

    check_covariance("transition noise covariance", transition_cov)
    check_covariance("emission noise covariance", emission_cov)
    check_covariance("initial state covariance", init_cov)

    state_dim = transition.shape[-1]
    obs_dim = emission.shape[-2]
    if mask is None:
        mask = np.ones(obs.shape[:-1], dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), obs.shape[:-1])
    if not mask.all():
        obs = where(mask[..., None], obs, 0.0)

    batch_shape = np.broadcast_shapes(obs.shape[:-2], init_mean.shape[:-1], init_cov.shape[:-2])
    eye = np.eye(state_dim)
    obs_eye = np.eye(obs_dim)

    mean = init_mean + np.zeros(batch_shape + (state_dim,))
    cov = init_cov + np.zeros(batch_shape + (state_dim, state_dim))
    total = Tensor(np.zeros(batch_shape))
    filtered_means, filtered_covs, predicted_means, predicted_covs = [], [], [], []

    for t in range(steps):
        if t > 0:
            mean = matvec(transition, mean) + offset
            cov = transition @ cov @ transition.mT + transition_cov
        predicted_means.append(mean)
        predicted_covs.append(cov)

        observed = np.broadcast_to(mask[..., t], batch_shape)
        if observed.any():
            innovation = obs[..., t, :] - matvec(emission, mean)
            innovation_cov = emission @ cov @ emission.mT + emission_cov
            innovation_cov = where(observed[..., None, None], innovation_cov, obs_eye)
            _check_innovation(innovation_cov.value, observed, t + 1)

            gain = transpose(solve(innovation_cov, emission @ cov))
            updated_mean = mean + matvec(gain, innovation)
            joseph = eye - gain @ emission
            updated_cov = joseph @ cov @ joseph.mT + gain @ emission_cov @ gain.mT

            whitened = solve(innovation_cov, reshape(innovation, innovation.shape + (1,)))
            mahalanobis = tensor_sum(innovation * reshape(whitened, innovation.shape), axis=-1)
            step_ll = -0.5 * (mahalanobis + logdet(innovation_cov) + obs_dim * LOG_2PI)
            total = total + where(observed, step_ll, 0.0)

            mean = where(observed[..., None], updated_mean, mean)
            cov = where(observed[..., None, None], updated_cov, cov)
        filtered_means.append(mean)
        filtered_covs.append(cov)

    return FilterResult(
        filtered=GaussianBelief(stack(filtered_means, axis=-2), stack(filtered_covs, axis=-3)),
        predicted=GaussianBelief(stack(predicted_means, axis=-2), stack(predicted_covs, axis=-3)),
        log_likelihood=total,
        mask=mask,
    )


def smooth_linear_gaussian(transition, result: FilterResult) -> GaussianBelief:
    """Rauch-Tung-Striebel backward pass over a filter result"""
    transition = as_tensor(transition)
    steps = len(result.filtered)
    if len(result.predicted) != steps:
        raise ContractError("filtered and predicted beliefs differ in length")

    filtered = [result.filtered.at(t) for t in range(steps)]
    predicted = [result.predicted.at(t) for t in range(steps)]
    means = [None] * steps
    covs = [None] * steps
    means[-1] = filtered[-1].mean
    covs[-1] = filtered[-1].cov
    for t in range(steps - 2, -1, -1):
        next_cov = predicted[t + 1].cov
        gain = transpose(solve(next_cov, transition @ filtered[t].cov))
        means[t] = filtered[t].mean + matvec(gain, means[t + 1] - predicted[t + 1].mean)
        covs[t] = filtered[t].cov + gain @ (covs[t + 1] - next_cov) @ gain.mT
    return GaussianBelief(stack(means, axis=-2), stack(covs, axis=-3))


def kalman_filter(params: LgssmParams, a, mask=None, k=0) -> FilterResult:
    """Filter positions a (..., T, 2) under mixture component k"""
    if not 0 <= k < params.n_components:
        raise ContractError(f"component {k} out of range for K={params.n_components}")
    return filter_linear_gaussian(
        params.transition, params.force, params.transition_cov, EMISSION, params.emission_cov,
        getitem(as_tensor(params.prior_means), k), getitem(as_tensor(params.prior_covs), k), a, mask)


def filter_components(params: LgssmParams, a, mask=None) -> FilterResult:
    """Filter positions a (..., T, 2) under all K components at once; batch (..., K)"""
    a = as_tensor(a)
    obs = reshape(a, a.shape[:-2] + (1,) + a.shape[-2:])
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape[:-1])
        mask = mask[..., None, :]
    return filter_linear_gaussian(
        params.transition, params.force, params.transition_cov, EMISSION, params.emission_cov,
        params.prior_means, params.prior_covs, obs, mask)


def rts_smooth(params: LgssmParams, result: FilterResult) -> GaussianBelief:
    return smooth_linear_gaussian(params.transition, result)


def mixture_log_joint(params: LgssmParams, a, mask=None):
    """log pi_k + log p(a | z=k) for every component, shape (..., K)"""
    return as_tensor(params.log_weights) + filter_components(params, a, mask).log_likelihood


def mixture_posterior(params: LgssmParams, a, mask=None):
    """p(z=k | a) computed in log space; numpy array (..., K)"""
    log_joint = value_of(mixture_log_joint(params, a, mask))
    return special.softmax(log_joint, axis=-1)


def log_marginal(params: LgssmParams, positions, mask=None):
    """
    Sum over objects of log sum_k pi_k p(a^n | z=k).

    positions has shape (..., N, T, 2); every leading axis is summed.
    """
    return tensor_sum(logsumexp(mixture_log_joint(params, positions, mask), axis=-1))


def sample_trajectory(params: LgssmParams, steps, rng: np.random.Generator, component=None) -> Trajectory:
    """Draw z, h_{1:T} and a_{1:T} from the generative model"""
    if steps < 1:
        raise ContractError("a trajectory needs at least one time-step")
    values = params.values()
    weights = np.exp(values.log_weights)
    if component is None:
        component = int(rng.choice(len(weights), p=weights / weights.sum()))
    transition = value_of(transition_matrix(values.delta))

    states = np.empty((steps, STATE_DIM))
    states[0] = rng.multivariate_normal(values.prior_means[component], values.prior_covs[component])
    for t in range(1, steps):
        noise = rng.multivariate_normal(np.zeros(STATE_DIM), values.transition_cov)
        states[t] = transition @ states[t - 1] + values.force + noise
    emission_noise = rng.multivariate_normal(np.zeros(OBS_DIM), values.emission_cov, size=steps)
    positions = states @ EMISSION.T + emission_noise
    return Trajectory(h=states, a=positions, component=component)


def forward_generate(params: LgssmParams, belief: GaussianBelief, steps):
    """Noise-free rollout of a belief mean; positions (..., steps, 2)"""
    if steps < 1:
        raise ContractError("forward generation needs at least one step")
    transition = value_of(params.transition)
    force = value_of(params.force)
    mean = value_of(belief.mean)
    positions = []
    for _ in range(steps):
        mean = mean @ transition.T + force
        positions.append(mean[..., :OBS_DIM])
    return np.stack(positions, axis=-2)


def interpolate_missing(params: LgssmParams, a, mask, k=0):
    """Smoothed positions B E[h_t | observed a] for every step, missing ones included"""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ContractError("interpolation needs at least one observed time-step")
    result = kalman_filter(params, a, mask, k)
    smoothed = rts_smooth(params, result)
    return value_of(smoothed.mean)[..., :OBS_DIM]
