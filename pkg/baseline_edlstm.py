"""
Encoder-decoder LSTM baseline for frame generation.

Each step encodes the previous frame with fully connected ReLU layers,
updates an LSTM cell and decodes the hidden state into Bernoulli pixel
probabilities for the next frame. During training the previous frame is
always the ground truth; during generation the decoder output is fed back
once the observed prefix is used up.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

import checkpoint
from errors import ConfigError, ContractError, NumericalError
from numerics import (
    AdamState,
    ParameterGroup,
    Tensor,
    adam_step,
    as_tensor,
    backward,
    clip_global_norm,
    concat,
    getitem,
    relu,
    sigmoid,
    stack,
    tanh,
    tensor_sum,
    value_of,
)
from renderer import log_likelihood_image
from trainer import TrainingMonitor, bucket_by_count, init_weight

logger = logging.getLogger(__name__)

HISTORY_BLOCK = "history/edlstm"


@dataclass
class EdLstmConfig:
    state_size: int = 2048
    encoder_sizes: tuple = (1024,)
    decoder_sizes: tuple = ()
    batch_size: int = 20
    iterations: int = 20_000
    learning_rate: float = 1e-3
    seed: int = 0
    clip_norm: float | None = 100.0
    checkpoint_interval: int = 10_000
    log_interval: int = 100
    observed: int = 5
    horizon: int = 25

    def validate(self):
        if self.state_size < 1:
            raise ConfigError("state_size must be positive")
        if not self.encoder_sizes:
            raise ConfigError("the encoder needs at least one layer")
        if any(size < 1 for size in tuple(self.encoder_sizes) + tuple(self.decoder_sizes)):
            raise ConfigError("layer sizes must be positive")
        if self.batch_size < 1 or self.iterations < 0:
            raise ConfigError("batch_size must be positive and iterations non-negative")
        if self.observed < 1 or self.horizon < 1:
            raise ConfigError("observed and horizon must be at least 1")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive or unset")
        self.encoder_sizes = tuple(int(s) for s in self.encoder_sizes)
        self.decoder_sizes = tuple(int(s) for s in self.decoder_sizes)
        return self


@dataclass
class EdLstmParams(ParameterGroup):
    """
    Layer i of the encoder maps the previous width to encoder_weights[i].shape[0];
    the gate matrix is (4H, E + H) in input, forget, candidate, output order;
    the last decoder layer outputs P probabilities.
    """

    prefix = "edlstm"

    encoder_weights: dict
    encoder_biases: dict
    w_gates: Tensor
    b_gates: Tensor
    decoder_weights: dict
    decoder_biases: dict

    @property
    def state_size(self):
        return value_of(self.b_gates).shape[0] // 4

    @property
    def pixels(self):
        return value_of(self.decoder_biases[max(self.decoder_biases)]).shape[0]


@dataclass
class LstmState:
    hidden: Tensor
    cell: Tensor


def initialize(seed, pixels, config: EdLstmConfig) -> EdLstmParams:
    rng = np.random.default_rng(seed)
    encoder = (pixels,) + tuple(config.encoder_sizes)
    decoder = (config.state_size,) + tuple(config.decoder_sizes) + (pixels,)
    hidden = config.state_size
    return EdLstmParams(
        encoder_weights={i: init_weight(rng, (encoder[i + 1], encoder[i])) for i in range(len(encoder) - 1)},
        encoder_biases={i: np.zeros(encoder[i + 1]) for i in range(len(encoder) - 1)},
        w_gates=init_weight(rng, (4 * hidden, encoder[-1] + hidden)),
        b_gates=np.zeros(4 * hidden),
        decoder_weights={i: init_weight(rng, (decoder[i + 1], decoder[i])) for i in range(len(decoder) - 1)},
        decoder_biases={i: np.zeros(decoder[i + 1]) for i in range(len(decoder) - 1)},
    )


def zero_state(params: EdLstmParams, batch):
    zeros = np.zeros((batch, params.state_size))
    return LstmState(hidden=Tensor(zeros), cell=Tensor(zeros.copy()))


def encode(params: EdLstmParams, image):
    x = as_tensor(image)
    for i in sorted(params.encoder_weights):
        x = relu(x @ as_tensor(params.encoder_weights[i]).mT + params.encoder_biases[i])
    return x


def decode(params: EdLstmParams, hidden):
    layers = sorted(params.decoder_weights)
    x = as_tensor(hidden)
    for i in layers:
        x = x @ as_tensor(params.decoder_weights[i]).mT + params.decoder_biases[i]
        x = sigmoid(x) if i == layers[-1] else relu(x)
    return x


def step(params: EdLstmParams, state: LstmState, image):
    """
    One LSTM step on a (batch, P) frame.

    Returns:
        (new LstmState, probabilities (batch, P) for the next frame)
    """
    hidden_size = params.state_size
    gates = concat([encode(params, image), state.hidden], axis=-1) @ as_tensor(params.w_gates).mT + params.b_gates

    def gate(i):
        return getitem(gates, (Ellipsis, slice(i * hidden_size, (i + 1) * hidden_size)))

    cell = sigmoid(gate(1)) * state.cell + sigmoid(gate(0)) * tanh(gate(2))
    hidden = sigmoid(gate(3)) * tanh(cell)
    new_state = LstmState(hidden=hidden, cell=cell)
    return new_state, decode(params, hidden)


def rollout(params: EdLstmParams, frames, steps, feedback_from):
    """
    Run ``steps`` LSTM steps from a zero state over frames (batch, T, P).

    Inputs before index ``feedback_from`` are ground-truth frames; later
    inputs are the previous output. Output t predicts frame t + 1.

    Returns:
        Tensor (batch, steps, P)
    """
    frames = as_tensor(frames)
    if feedback_from < 1 or feedback_from > frames.shape[1]:
        raise ContractError(f"feedback_from must lie in [1, {frames.shape[1]}]")
    state = zero_state(params, frames.shape[0])
    outputs = []
    for t in range(steps):
        image = getitem(frames, (slice(None), t)) if t < feedback_from else outputs[-1]
        state, probs = step(params, state, image)
        outputs.append(probs)
    return stack(outputs, axis=1)


def teacher_forced_nll(params: EdLstmParams, frames):
    """Bernoulli NLL of frames 2..T given ground-truth predecessors, summed over the batch"""
    frames = np.asarray(frames, dtype=np.float64)
    steps = frames.shape[1] - 1
    probs = rollout(params, frames, steps, feedback_from=steps)
    return -tensor_sum(log_likelihood_image(probs, frames[:, 1:]))


def generate(params: EdLstmParams, observed, horizon):
    """
    Closed-loop generation after an observed prefix.

    Args:
        observed: frames (K, P) or (batch, K, P)
        horizon: number of frames to generate, at least 1

    Returns:
        probabilities (horizon, P) or (batch, horizon, P)
    """
    if horizon < 1:
        raise ContractError("generation horizon must be at least 1")
    observed = np.asarray(observed, dtype=np.float64)
    single = observed.ndim == 2
    if single:
        observed = observed[None]
    prefix = observed.shape[1]
    probs = value_of(rollout(params, observed, prefix + horizon - 1, feedback_from=prefix))[:, prefix - 1:]
    return probs[0] if single else probs


@dataclass
class EdLstmCheckpoint:
    params: EdLstmParams
    iteration: int = 0
    history: list = field(default_factory=list)

    def to_blocks(self):
        blocks = dict(self.params.values().named())
        blocks[HISTORY_BLOCK] = np.asarray(self.history, dtype=np.float64).reshape(-1, 2)
        return blocks

    @classmethod
    def from_blocks(cls, blocks, iteration):
        trace = blocks.get(HISTORY_BLOCK, np.zeros((0, 2)))
        history = [(int(row[0]), float(row[1])) for row in trace]
        return cls(params=EdLstmParams.from_named(blocks), iteration=iteration, history=history)

    def save(self, path):
        checkpoint.write_blocks(path, self.to_blocks(), self.iteration)

    @classmethod
    def load(cls, path):
        blocks, iteration = checkpoint.read_blocks(path)
        return cls.from_blocks(blocks, iteration)

    def loss_frame(self):
        return pd.DataFrame(self.history, columns=["iteration", "nll"])


class _LossMonitor(TrainingMonitor):
    @staticmethod
    def format_summary(record):
        iteration, nll = record
        return f"iter {int(iteration):>7d} | nll {nll:12.3f}"


def train_edlstm(config: EdLstmConfig, corpus, initial: EdLstmCheckpoint | None = None,
                 callback=None) -> EdLstmCheckpoint:
    """
    Teacher-forced Bernoulli NLL minimization with Adam.

    Mini-batches hold sequences of one object count, chosen with probability
    proportional to the bucket size.
    """
    config.validate()
    if not corpus.sequences:
        raise ContractError("cannot train on an empty dataset")
    buckets = bucket_by_count(corpus.sequences)
    counts = list(buckets)
    sizes = np.array([len(buckets[n]) for n in counts], dtype=np.float64)
    pixels = next(iter(buckets.values())).shape[-1]

    if initial is None:
        initial = EdLstmCheckpoint(params=initialize(config.seed, pixels, config))
    arrays = initial.params.values().named()
    history = list(initial.history)
    start = initial.iteration
    rng = np.random.default_rng([config.seed, 2])
    state = AdamState(learning_rate=config.learning_rate)
    monitor = _LossMonitor(config.log_interval)
    logger.info("training the ED-LSTM for %d iterations", config.iterations)

    for iteration in range(start, start + config.iterations):
        n_objects = counts[int(rng.choice(len(counts), p=sizes / sizes.sum()))]
        pool = buckets[n_objects]
        batch = min(config.batch_size, len(pool))
        frames = pool[rng.choice(len(pool), size=batch, replace=False)]

        params = EdLstmParams.from_named(arrays).leaves()
        loss = teacher_forced_nll(params, frames) / batch
        if not np.isfinite(loss.item()):
            raise NumericalError(f"non-finite baseline loss at iteration {iteration}", iteration=iteration)
        leaves = params.named()
        grads = dict(zip(leaves, backward(loss, list(leaves.values()))))
        grads, _ = clip_global_norm(grads, config.clip_norm)
        arrays, state = adam_step(arrays, grads, state)

        record = (iteration, loss.item())
        history.append(record)
        monitor.update(record)
        done = iteration + 1
        if callback is not None and config.checkpoint_interval > 0 and done % config.checkpoint_interval == 0:
            callback(EdLstmCheckpoint(params=EdLstmParams.from_named(arrays), iteration=done, history=list(history)))

    return EdLstmCheckpoint(params=EdLstmParams.from_named(arrays), iteration=start + config.iterations,
                            history=history)


def generation_report(params: EdLstmParams, corpus, config: EdLstmConfig):
    """Per-pixel generation NLL of the frames after the observed prefix, one record per sequence"""
    records = []
    for index, sequence in enumerate(corpus.sequences):
        frames = np.asarray(sequence.frames, dtype=np.float64).reshape(sequence.steps, -1)
        if len(frames) < config.observed + config.horizon:
            raise ContractError(f"sequence {index} is shorter than {config.observed + config.horizon} steps")
        probs = generate(params, frames[:config.observed], config.horizon)
        truth = frames[config.observed:config.observed + config.horizon]
        nll = -value_of(log_likelihood_image(probs, truth)) / frames.shape[-1]
        records.append({"task": "edlstm_generate", "sequence": index, "n_objects": sequence.n_objects,
                        "generation_nll": float(np.mean(nll))})
    return records
