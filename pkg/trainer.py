"""
Variational training of the renderer, inference network and LGSSM.

The bound for one sequence is

    E_q[ log p(v | a) ] - beta * ( log q(a | v) - log p(a) )

estimated with reparametrized samples a = mu + sigma * eps, where log p(a)
is the exact mixture marginal from the Kalman filter. Training follows a
staged schedule: LGSSM parameters frozen at first, the KL weight annealed
from beta_start down to beta_end, then joint optimization with Adam.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

import checkpoint
from errors import ConfigError, ContractError, NumericalError
from inference_net import InferenceParams, infer, log_q, sample_positions
from lgssm import STATE_DIM, LgssmFactors, LgssmParams, log_marginal
from numerics import AdamState, adam_step, backward, clip_global_norm, tensor_sum, transpose
from renderer import RendererParams, log_likelihood_image, render

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ["iteration", "elbo", "recon", "kl", "beta"]


@dataclass
class TrainConfig:
    batch_size: int = 20
    iterations: int = 200_000
    freeze_iterations: int = 10_000
    anneal_start: int = 10_000
    anneal_end: int = 50_000
    beta_start: float = 100.0
    beta_end: float = 1.0
    samples: int = 1
    learning_rate: float = 1e-3
    seed: int = 0
    checkpoint_interval: int = 10_000
    clip_norm: float | None = 100.0
    state_size: int = 1024
    canvas_size: int = 1024
    components: int = 2
    log_interval: int = 100

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.samples < 1:
            raise ConfigError("samples must be at least 1")
        if self.iterations < 0 or self.freeze_iterations < 0:
            raise ConfigError("iteration counts must be non-negative")
        if not 0 < self.beta_end <= self.beta_start:
            raise ConfigError("need 0 < beta_end <= beta_start")
        if self.anneal_end < self.anneal_start:
            raise ConfigError("anneal_end must not precede anneal_start")
        if self.state_size < 1 or self.canvas_size < 1 or self.components < 1:
            raise ConfigError("state_size, canvas_size and components must be positive")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive or unset")
        return self


@dataclass
class ModelShapes:
    pixels: int
    canvas_size: int = 1024
    state_size: int = 1024
    components: int = 2
    object_counts: tuple = (1, 2, 3)


@dataclass
class ModelParams:
    """theta (lgssm, renderer) and phi (inference) together"""

    lgssm: LgssmFactors
    renderer: RendererParams
    inference: InferenceParams

    def named(self):
        return {**self.lgssm.named(), **self.renderer.named(), **self.inference.named()}

    @classmethod
    def from_named(cls, arrays):
        return cls(lgssm=LgssmFactors.from_named(arrays),
                   renderer=RendererParams.from_named(arrays),
                   inference=InferenceParams.from_named(arrays))

    def leaves(self, train_lgssm=True):
        return ModelParams(lgssm=self.lgssm.leaves(requires_grad=train_lgssm),
                           renderer=self.renderer.leaves(),
                           inference=self.inference.leaves())

    def values(self):
        return ModelParams(lgssm=self.lgssm.values(), renderer=self.renderer.values(),
                           inference=self.inference.values())


@dataclass
class ModelCheckpoint:
    params: ModelParams
    iteration: int = 0
    history: list = field(default_factory=list)

    def to_blocks(self):
        blocks = dict(self.params.values().named())
        blocks["history/trace"] = np.asarray(self.history, dtype=np.float64).reshape(-1, len(LOSS_COLUMNS))
        return blocks

    @classmethod
    def from_blocks(cls, blocks, iteration):
        trace = blocks.get("history/trace", np.zeros((0, len(LOSS_COLUMNS))))
        history = [tuple(float(x) for x in row) for row in trace]
        return cls(params=ModelParams.from_named(blocks), iteration=iteration, history=history)

    def save(self, path):
        checkpoint.write_blocks(path, self.to_blocks(), self.iteration)

    @classmethod
    def load(cls, path):
        blocks, iteration = checkpoint.read_blocks(path)
        return cls.from_blocks(blocks, iteration)

    def loss_frame(self):
        return loss_frame(self.history)


def loss_frame(history):
    frame = pd.DataFrame(list(history), columns=LOSS_COLUMNS)
    frame["iteration"] = frame["iteration"].astype(int)
    return frame


def write_loss_log(history, path):
    """CSV with fixed column order; floats at full precision"""
    loss_frame(history).to_csv(path, index=False, float_format="%.17g")


@dataclass
class ElboTerms:
    """Bound and its two parts, summed over the sequences of a batch"""

    elbo: object
    recon: object
    kl: object


def init_weight(rng, shape):
    # N(0, 1/sqrt(d)) with d the number of matrix elements, read as a standard deviation
    return rng.normal(0.0, 1.0 / math.sqrt(int(np.prod(shape))), size=shape)


def initialize(seed, shapes: ModelShapes) -> ModelParams:
    """
    Random weights, zero biases and the smooth-prior LGSSM initialization:
    delta=0.1, u=0, Sigma_H=0.001 I, Sigma_A=I, mu_k positions ~ N(0, I) with
    zero velocities, Sigma_k=I and uniform mixture weights.
    """
    rng = np.random.default_rng(seed)
    canvas, state, pixels = shapes.canvas_size, shapes.state_size, shapes.pixels

    renderer = RendererParams(
        w_alpha=init_weight(rng, (canvas, 2)), b_alpha=np.zeros(canvas),
        w_x=init_weight(rng, (canvas, 2)), b_x=np.zeros(canvas),
        w_v=init_weight(rng, (pixels, canvas)), b_v=np.zeros(pixels),
        theta_x0=np.zeros(canvas),
    )
    inference = InferenceParams(
        w_beta=init_weight(rng, (state, 2 * state + pixels)), b_beta=np.zeros(state),
        w_s=init_weight(rng, (state, 2 * state + pixels)), b_s=np.zeros(state),
        w_mu=init_weight(rng, (2, state)), b_mu=np.zeros(2),
        w_sigma=init_weight(rng, (2, state)), b_sigma=np.zeros(2),
        initial_states={n: init_weight(rng, (n, state)) for n in sorted(shapes.object_counts)},
    )

    k = shapes.components
    prior_means = np.zeros((k, STATE_DIM))
    prior_means[:, :2] = rng.standard_normal((k, 2))
    physical = LgssmParams.create(
        delta=0.1,
        force=np.zeros(STATE_DIM),
        transition_cov=0.001 * np.eye(STATE_DIM),
        emission_cov=np.eye(2),
        weights=np.full(k, 1.0 / k),
        prior_means=prior_means,
        prior_covs=np.tile(np.eye(STATE_DIM), (k, 1, 1)),
    )
    return ModelParams(lgssm=LgssmFactors.from_params(physical), renderer=renderer, inference=inference)


def anneal(iteration, config: TrainConfig):
    """KL weight: beta_start, then log-linear down to beta_end, then beta_end"""
    if iteration < 0:
        raise ContractError("iteration must be non-negative")
    if iteration < config.anneal_start:
        return float(config.beta_start)
    if iteration >= config.anneal_end:
        return float(config.beta_end)
    fraction = (iteration - config.anneal_start) / (config.anneal_end - config.anneal_start)
    log_beta = math.log(config.beta_start) + fraction * (math.log(config.beta_end) - math.log(config.beta_start))
    return math.exp(log_beta)


def elbo(model: ModelParams, images, n_objects, noise, beta=1.0) -> ElboTerms:
    """
    Monte-Carlo estimate of the bound, averaged over noise draws.

    Args:
        model: parameters (arrays or leaf Tensors)
        images: binary frames (..., T, P)
        n_objects: N
        noise: standard normal draws (M, ..., T, N, 2) or (..., T, N, 2)
        beta: weight on the KL term

    Returns:
        ElboTerms summed over the leading sequence axes
    """
    if beta <= 0:
        raise ContractError("beta must be positive")
    images = np.asarray(images, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.ndim == images.ndim + 1:
        noise = noise[None]
    draws = noise.shape[0]

    posterior = infer(model.inference, images, n_objects)
    positions = sample_positions(posterior, noise)
    recon = tensor_sum(log_likelihood_image(render(model.renderer, positions), images)) / draws

    axes = list(range(positions.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    per_object = transpose(positions, axes)
    kl = (log_q(posterior, positions) - log_marginal(model.lgssm.resolve(), per_object)) / draws
    return ElboTerms(elbo=recon - beta * kl, recon=recon, kl=kl)


class TrainingMonitor:
    """Keeps recent loss records and logs a status line every few iterations"""

    def __init__(self, log_interval=100, maxlen=50):
        self.log_interval = max(1, int(log_interval))
        self.history = deque(maxlen=maxlen)
        self.latest = None

    def update(self, record):
        self.latest = record
        self.history.append(record)
        if record[0] % self.log_interval == 0:
            logger.info(self.format_summary(record))

    @staticmethod
    def format_summary(record):
        iteration, bound, recon, kl, beta = record
        return f"iter {int(iteration):>7d} | elbo {bound:12.3f} | recon {recon:12.3f} | kl {kl:10.3f} | beta {beta:8.3f}"

    def recent_mean(self, column):
        index = LOSS_COLUMNS.index(column)
        values = [record[index] for record in self.history]
        return float(np.mean(values)) if values else float("nan")


def bucket_by_count(sequences):
    """Flattened float frames grouped by object count, keys sorted"""
    buckets = {}
    for sequence in sequences:
        frames = np.asarray(sequence.frames, dtype=np.float64)
        buckets.setdefault(sequence.n_objects, []).append(frames.reshape(frames.shape[0], -1))
    return {n: np.stack(buckets[n]) for n in sorted(buckets)}


def model_shapes(config: TrainConfig, pixels, object_counts):
    return ModelShapes(pixels=pixels, canvas_size=config.canvas_size, state_size=config.state_size,
                       components=config.components, object_counts=tuple(object_counts))


def train(config: TrainConfig, corpus, initial: ModelCheckpoint | None = None, callback=None) -> ModelCheckpoint:
    """
    Mini-batch stochastic optimization of the bound.

    Each mini-batch holds sequences with a single object count. Parameters of
    the LGSSM receive no gradient for the first freeze_iterations steps.

    Args:
        config: TrainConfig
        corpus: dataset.Corpus (anything with a ``sequences`` list)
        initial: checkpoint to continue from; fresh initialization otherwise
        callback: called with the current ModelCheckpoint every
            checkpoint_interval iterations

    Returns:
        ModelCheckpoint with the final parameters and the full loss history
    """
    config.validate()
    if not corpus.sequences:
        raise ContractError("cannot train on an empty dataset")
    buckets = bucket_by_count(corpus.sequences)
    counts = list(buckets)
    sizes = np.array([len(buckets[n]) for n in counts], dtype=np.float64)
    pixels = next(iter(buckets.values())).shape[-1]

    if initial is None:
        initial = ModelCheckpoint(params=initialize(config.seed, model_shapes(config, pixels, counts)))
    arrays = initial.params.values().named()
    history = list(initial.history)
    start = initial.iteration
    rng = np.random.default_rng([config.seed, 1])
    state = AdamState(learning_rate=config.learning_rate)
    monitor = TrainingMonitor(config.log_interval)
    logger.info("training %d iterations on %d sequences, object counts %s",
                config.iterations, int(sizes.sum()), counts)

    for iteration in range(start, start + config.iterations):
        n_objects = counts[int(rng.choice(len(counts), p=sizes / sizes.sum()))]
        pool = buckets[n_objects]
        batch = min(config.batch_size, len(pool))
        images = pool[rng.choice(len(pool), size=batch, replace=False)]
        noise = rng.standard_normal((config.samples, batch, images.shape[1], n_objects, 2))
        beta = anneal(iteration, config)

        model = ModelParams.from_named(arrays).leaves(train_lgssm=iteration >= config.freeze_iterations)
        terms = elbo(model, images, n_objects, noise, beta)
        loss = -terms.elbo / batch
        if not np.isfinite(loss.item()):
            raise NumericalError(f"non-finite loss at iteration {iteration}", iteration=iteration)

        trainable = {name: leaf for name, leaf in model.named().items() if leaf.requires_grad}
        grads = dict(zip(trainable, backward(loss, list(trainable.values()))))
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise NumericalError(f"non-finite gradient at iteration {iteration}", iteration=iteration)
        grads, _ = clip_global_norm(grads, config.clip_norm)
        arrays, state = adam_step(arrays, grads, state)

        record = (iteration, terms.elbo.item() / batch, terms.recon.item() / batch, terms.kl.item() / batch, beta)
        history.append(record)
        monitor.update(record)

        done = iteration + 1
        if callback is not None and config.checkpoint_interval > 0 and done % config.checkpoint_interval == 0:
            callback(ModelCheckpoint(params=ModelParams.from_named(arrays), iteration=done, history=list(history)))

    return ModelCheckpoint(params=ModelParams.from_named(arrays), iteration=start + config.iterations,
                           history=history)
