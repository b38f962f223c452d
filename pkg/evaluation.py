"""
Evaluation of a trained model on held-out sequences.

Three tasks, each producing one record per sequence:

    infer        inference-network means against ground truth
    generate     25 frames forward-generated from the first five
    interpolate  the middle of a sequence filled in from both ends

Latent positions are identifiable only up to a similarity transform, so
every sequence is first aligned (rotation, uniform scale, translation and
object order) from its full-sequence inference means onto the ground-truth
pixel positions. Generated and interpolated trajectories are scored in that
same frame.
"""

from __future__ import annotations

import itertools
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import matplotlib
import numpy as np
import pandas as pd
import plotly.graph_objects as go
from matplotlib.figure import Figure
from scipy import linalg, stats

from errors import ConfigError, ContractError
from inference_net import infer
from lgssm import GaussianBelief, filter_components, forward_generate, interpolate_missing, mixture_posterior
from numerics import value_of
from renderer import check_binary, log_likelihood_image, render

logger = logging.getLogger(__name__)

matplotlib.use("Agg")
matplotlib.rcParams.update({"svg.hashsalt": "pixeldyn", "svg.fonttype": "none", "font.family": "DejaVu Sans"})

TASKS = ("infer", "generate", "interpolate")
TRUTH_COLOR = "black"
INFERRED_COLOR = "blue"
GENERATED_COLOR = "red"
INTERPOLATED_COLOR = "green"

# Font objects are shared between figures; drawing is serialized.
_RENDER_LOCK = threading.Lock()


@dataclass
class EvalConfig:
    observed: int = 5
    horizon: int = 25
    max_sequences: int | None = None
    plot_sequences: int = 5
    threads: int = 1

    def validate(self):
        if self.observed < 1:
            raise ConfigError("observed must be at least 1")
        if self.horizon < 1:
            raise ConfigError("horizon must be at least 1")
        if self.plot_sequences < 0:
            raise ConfigError("plot_sequences must be non-negative")
        return self


@dataclass
class AlignmentResult:
    """Maps inferred positions onto truth: scale * rotation @ p[perm] + translation"""

    rotation: np.ndarray
    scale: float
    translation: np.ndarray
    permutation: tuple
    error: float

    def apply(self, positions):
        positions = np.asarray(positions, dtype=np.float64)[..., list(self.permutation), :]
        return self.scale * positions @ self.rotation.T + self.translation

    def rms(self, positions, truth):
        diff = self.apply(positions) - np.asarray(truth, dtype=np.float64)
        return float(np.sqrt(np.mean(np.sum(diff ** 2, axis=-1))))


def _similarity(source, target):
    """Least-squares uniform-scale rotation (no reflection) taking source points onto target"""
    source_mean, target_mean = source.mean(axis=0), target.mean(axis=0)
    centred_source, centred_target = source - source_mean, target - target_mean
    variance = np.mean(np.sum(centred_source ** 2, axis=1))
    if variance <= 1e-24:
        raise ContractError("cannot align: all inferred positions coincide")
    covariance = centred_target.T @ centred_source / len(source)
    u, singular, vt = linalg.svd(covariance)
    signs = np.ones(len(singular))
    signs[-1] = np.sign(linalg.det(u) * linalg.det(vt)) or 1.0
    rotation = u @ np.diag(signs) @ vt
    scale = float(np.sum(singular * signs) / variance)
    translation = target_mean - scale * rotation @ source_mean
    return rotation, scale, translation


def align(inferred, truth) -> AlignmentResult:
    """
    Best similarity transform and object order taking inferred onto truth.

    Args:
        inferred: (T, N, 2) positions in latent units
        truth: (T, N, 2) ground-truth positions in pixel units

    Returns:
        AlignmentResult with the minimal RMS error over all object orders
    """
    inferred = np.asarray(inferred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if inferred.shape != truth.shape or inferred.ndim != 3 or inferred.shape[-1] != 2:
        raise ContractError(f"cannot align {inferred.shape} with {truth.shape}")
    target = truth.reshape(-1, 2)
    best = None
    for permutation in itertools.permutations(range(inferred.shape[1])):
        source = inferred[:, list(permutation)].reshape(-1, 2)
        rotation, scale, translation = _similarity(source, target)
        candidate = AlignmentResult(rotation=rotation, scale=scale, translation=translation,
                                    permutation=permutation, error=0.0)
        candidate.error = candidate.rms(inferred, truth)
        if best is None or candidate.error < best.error:
            best = candidate
    return best


@dataclass
class GenerationResult:
    positions: np.ndarray
    probs: np.ndarray
    components: np.ndarray
    step_nll: np.ndarray | None = None

    @property
    def nll(self):
        return None if self.step_nll is None else float(np.mean(self.step_nll))


@dataclass
class InterpolationResult:
    positions: np.ndarray
    probs: np.ndarray
    generated: np.ndarray
    mask: np.ndarray
    components: np.ndarray


def _flatten(frames):
    frames = np.asarray(frames, dtype=np.float64)
    return frames.reshape(frames.shape[0], -1)


def _means(model, frames, n_objects, initial_states=None):
    return value_of(infer(model.inference, _flatten(frames), n_objects, initial_states).means)


def _dynamics(model):
    return model.lgssm.resolve().values()


def pixel_nll(probs, frames):
    """Mean per-pixel Bernoulli negative log-likelihood (nats) for each frame"""
    frames = _flatten(frames)
    return -value_of(log_likelihood_image(probs, frames)) / frames.shape[-1]


def generation_task(model, frames, n_objects, horizon=25, observed=5, truth=None) -> GenerationResult:
    """
    Forward-generate frames after an observed prefix.

    Positions of the prefix are the inference means; every object picks its
    most probable mixture component and its filtered belief at the last
    observed step is rolled forward without noise.

    Args:
        model: trainer.ModelParams
        frames: at least ``observed`` frames (T, H, W) or (T, P)
        n_objects: N
        horizon: steps to generate after the prefix
        observed: length of the prefix
        truth: optional frames scored against, aligned with the generated steps

    Returns:
        GenerationResult; positions (horizon, N, 2), probs (horizon, P)
    """
    if horizon < 1:
        raise ContractError("generation horizon must be at least 1")
    frames = _flatten(frames)
    if len(frames) < observed:
        raise ContractError(f"need {observed} observed frames, got {len(frames)}")
    dynamics = _dynamics(model)
    per_object = _means(model, frames[:observed], n_objects).transpose(1, 0, 2)
    components = np.argmax(mixture_posterior(dynamics, per_object), axis=-1)

    filtered = filter_components(dynamics, per_object).filtered
    objects = np.arange(n_objects)
    mean = value_of(filtered.mean)[objects, components, -1]
    cov = value_of(filtered.cov)[objects, components, -1]
    positions = forward_generate(dynamics, GaussianBelief(mean, cov), horizon).transpose(1, 0, 2)
    probs = value_of(render(model.renderer, positions))

    step_nll = None
    if truth is not None:
        truth = _flatten(truth)
        if len(truth) != horizon:
            raise ContractError(f"truth has {len(truth)} frames for a horizon of {horizon}")
        step_nll = pixel_nll(probs, truth)
    return GenerationResult(positions=positions, probs=probs, components=components, step_nll=step_nll)


def interpolation_task(model, frames, n_objects, observed=5) -> InterpolationResult:
    """
    Fill in the middle of a sequence from its first and last ``observed`` frames.

    The inference state for the tail window is warmed in on the observed
    head followed by the forward-generated middle frames. Inference means of
    both windows are then smoothed with the middle steps treated as missing.
    Each object keeps the mixture component chosen from the observed head,
    the one its generated middle frames were rolled out under.
    """
    frames = _flatten(frames)
    steps = len(frames)
    gap = steps - 2 * observed
    if gap < 1:
        raise ContractError(f"a sequence of {steps} steps leaves no gap between two windows of {observed}")
    dynamics = _dynamics(model)

    head = _means(model, frames[:observed], n_objects)
    generated = generation_task(model, frames, n_objects, horizon=gap, observed=observed)
    warm = infer(model.inference, np.concatenate([frames[:observed], generated.probs]), n_objects)
    warm_state = value_of(warm.states)[-1]
    tail = _means(model, frames[steps - observed:], n_objects, initial_states=warm_state)

    observations = np.concatenate([head, np.zeros((gap, n_objects, 2)), tail])
    mask = np.zeros(steps, dtype=bool)
    mask[:observed] = True
    mask[steps - observed:] = True
    per_object = observations.transpose(1, 0, 2)
    components = generated.components
    smoothed = np.stack([interpolate_missing(dynamics, per_object[n], mask, k=int(components[n]))
                         for n in range(n_objects)], axis=1)
    probs = value_of(render(model.renderer, smoothed))
    return InterpolationResult(positions=smoothed, probs=probs, generated=generated.positions,
                               mask=mask, components=components)


def position_inference_task(model, sequence, transform):
    """Inference means over the whole sequence and their alignment to the ground truth"""
    means = _means(model, sequence.frames, sequence.n_objects)
    return means, align(means, transform.apply(sequence.positions))


def overlay(frames):
    """Grayscale time overlay in [0, 1]: max over t of (t / T) * frame_t"""
    frames = check_binary(frames)
    steps = len(frames)
    shades = np.arange(1, steps + 1, dtype=np.float64) / steps
    return np.max(frames * shades[:, None, None], axis=0)


def write_pgm(path, image):
    """Binary (P5) grayscale PGM; image values in [0, 1]"""
    image = np.asarray(image, dtype=np.float64)
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    height, width = pixels.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes())
    return path


def read_pgm(path):
    data = Path(path).read_bytes()
    magic, size, depth, pixels = data.split(b"\n", 3)
    if magic != b"P5" or depth != b"255":
        raise ContractError(f"{path} is not an 8-bit binary PGM")
    width, height = (int(v) for v in size.split())
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width)


def emit_overlay(frames, path, mode="time", reference=None):
    """
    Write a time overlay of binary frames (T, H, W).

    mode="panels" puts the overlay of ``reference`` (e.g. the ground truth)
    to the right of it, separated by a one-pixel column at mid-gray.
    """
    image = overlay(frames)
    if mode == "panels":
        if reference is None:
            raise ContractError("panel overlays need reference frames")
        other = overlay(reference)
        separator = np.full((image.shape[0], 1), 0.5)
        image = np.hstack([image, separator, other])
    elif mode != "time":
        raise ContractError(f"unknown overlay mode {mode!r}")
    return write_pgm(path, image)


def threshold(probs, shape):
    """Probability frames (T, P) to binary frames (T, H, W)"""
    return (np.asarray(probs).reshape((-1,) + tuple(shape)) >= 0.5).astype(np.uint8)


def trajectory_figure(truth, title, **estimates):
    """
    Line plot of pixel-space trajectories (T, N, 2) as (row, col).

    Truth is black; estimates named inferred, generated or interpolated use
    blue, red and green. The first position of every line is a circle.
    """
    colors = {"truth": TRUTH_COLOR, "inferred": INFERRED_COLOR,
              "generated": GENERATED_COLOR, "interpolated": INTERPOLATED_COLOR}
    fig = Figure(figsize=(4, 4), layout="constrained")
    ax = fig.add_subplot()
    for label, positions in {"truth": truth, **estimates}.items():
        if positions is None:
            continue
        positions = np.asarray(positions)
        color = colors.get(label, "gray")
        for n in range(positions.shape[1]):
            rows, cols = positions[:, n, 0], positions[:, n, 1]
            ax.plot(cols, rows, color=color, linewidth=2, label=f"{label} {n + 1}")
            ax.plot(cols[:1], rows[:1], "o", color=color, markersize=6)
    ax.set_title(title)
    ax.set_xlabel("col")
    ax.set_ylabel("row")
    ax.invert_yaxis()
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="best", fontsize=7)
    return fig


def write_trajectory_svg(fig, path):
    """SVG without a timestamp; ids come from a fixed hash salt, so equal figures give equal bytes"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with _RENDER_LOCK:
        fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def loss_figure(frame: pd.DataFrame):
    """Bound, reconstruction and KL against iteration"""
    fig = go.Figure()
    for column, color in (("elbo", "blue"), ("recon", "green"), ("kl", "orange")):
        fig.add_trace(go.Scatter(x=frame["iteration"], y=frame[column], mode="lines",
                                 name=column, line=dict(color=color, width=2)))
    fig.update_layout(title="Training loss", height=400, xaxis_title="iteration")
    return fig


def write_figure(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.write_html(str(path), include_plotlyjs="cdn")
    return path


def evaluate_sequence(task, model, sequence, transform, config: EvalConfig, index=0, out_dir=None):
    """
    One report record; figures for this sequence when out_dir is given.

    Generated and interpolated positions are scored over the gap between the
    two observed windows (steps observed+1 .. T-observed).
    """
    means, alignment = position_inference_task(model, sequence, transform)
    truth = transform.apply(sequence.positions)
    record = {"task": task, "sequence": index, "n_objects": sequence.n_objects,
              "aligned_rmse": alignment.error, "scale": alignment.scale}
    gap = slice(config.observed, sequence.steps - config.observed)
    figures = {}
    panels = reference = None

    if task == "infer":
        figures["inferred"] = alignment.apply(means)
    elif task == "generate":
        if sequence.steps < config.observed + config.horizon:
            raise ContractError(f"sequence {index} has {sequence.steps} steps, generation needs "
                                f"{config.observed + config.horizon}")
        reference = sequence.frames[config.observed:config.observed + config.horizon]
        generated = generation_task(model, sequence.frames, sequence.n_objects, horizon=config.horizon,
                                    observed=config.observed, truth=reference)
        scored = min(config.horizon, gap.stop - gap.start)
        record["generation_nll"] = generated.nll
        record["generation_error"] = alignment.rms(generated.positions[:scored],
                                                   truth[config.observed:config.observed + scored])
        figures["generated"] = alignment.apply(np.concatenate([means[:config.observed], generated.positions]))
        panels = threshold(generated.probs, sequence.frames.shape[1:])
    elif task == "interpolate":
        interpolated = interpolation_task(model, sequence.frames, sequence.n_objects, observed=config.observed)
        record["generation_error"] = alignment.rms(interpolated.generated, truth[gap])
        record["interpolation_error"] = alignment.rms(interpolated.positions[gap], truth[gap])
        record["interpolation_nll"] = float(np.mean(pixel_nll(interpolated.probs, sequence.frames)[gap]))
        figures["generated"] = alignment.apply(np.concatenate([means[:config.observed], interpolated.generated]))
        figures["interpolated"] = alignment.apply(interpolated.positions)
        panels, reference = threshold(interpolated.probs, sequence.frames.shape[1:]), sequence.frames
    else:
        raise ContractError(f"unknown task {task!r}, expected one of {TASKS}")

    if out_dir is not None:
        out_dir = Path(out_dir)
        stem = f"{task}_{index:04d}"
        write_trajectory_svg(trajectory_figure(truth, f"{task} sequence {index}", **figures), out_dir / f"{stem}.svg")
        if panels is None:
            emit_overlay(sequence.frames, out_dir / f"{stem}.pgm")
        else:
            emit_overlay(panels, out_dir / f"{stem}.pgm", mode="panels", reference=reference)
    return record


def run_task(task, model, corpus, config: EvalConfig, out_dir=None):
    """
    Evaluate every test sequence (up to max_sequences) and return the records
    in sequence order. Figures are written for the first plot_sequences.
    """
    config.validate()
    if task not in TASKS:
        raise ContractError(f"unknown task {task!r}, expected one of {TASKS}")
    missing = set(corpus.object_counts) - set(model.inference.object_counts)
    if missing:
        raise ContractError(f"model has no initial state for object counts {sorted(missing)}")
    sequences = corpus.sequences[:config.max_sequences]

    def work(index):
        plots = out_dir if index < config.plot_sequences else None
        return evaluate_sequence(task, model, sequences[index], corpus.transform, config, index, plots)

    with ThreadPoolExecutor(max_workers=max(1, int(config.threads))) as pool:
        records = list(pool.map(work, range(len(sequences))))
    logger.info("evaluated %d sequences on task %s", len(records), task)
    return records


def write_report(records, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(records).to_json(path, orient="records", lines=True)
    return path


def read_report(path):
    return pd.read_json(path, orient="records", lines=True)


def calculate_stats(values):
    """count, mean, median, std, min and max of the finite values, or None"""
    values = pd.Series(values, dtype=np.float64).dropna()
    values = values[np.isfinite(values)]
    if values.empty:
        return None
    return {
        "count": int(values.count()),
        "mean": float(values.mean()),
        "median": float(values.median()),
        "std": float(values.std(ddof=1)) if len(values) > 1 else 0.0,
        "min": float(values.min()),
        "max": float(values.max()),
    }


def sign_test(better, worse):
    """
    One-sided paired sign test that ``better`` is smaller than ``worse``;
    ties are dropped.
    """
    better, worse = np.asarray(better, dtype=np.float64), np.asarray(worse, dtype=np.float64)
    wins = int(np.sum(better < worse))
    losses = int(np.sum(better > worse))
    trials = wins + losses
    p_value = stats.binomtest(wins, trials, 0.5, alternative="greater").pvalue if trials else 1.0
    return {"wins": wins, "losses": losses, "ties": int(len(better) - trials), "p_value": float(p_value)}


def summarize_report(frame: pd.DataFrame):
    """Per task, statistics of every metric column; the sign test where both errors exist"""
    summary = {}
    metrics = [c for c in frame.columns if c not in ("task", "sequence", "n_objects")]
    for task, group in frame.groupby("task", sort=True):
        entry = {column: calculate_stats(group[column]) for column in metrics if group[column].notna().any()}
        if {"interpolation_error", "generation_error"} <= set(entry):
            entry["interpolation_vs_generation"] = sign_test(group["interpolation_error"],
                                                             group["generation_error"])
        summary[task] = entry
    return summary


def format_summary(summary):
    lines = []
    for task, entry in summary.items():
        lines.append(f"[{task}]")
        for name, values in entry.items():
            if name == "interpolation_vs_generation":
                lines.append(f"  interpolation beats generation: {values['wins']} wins, "
                             f"{values['losses']} losses, {values['ties']} ties, p={values['p_value']:.3g}")
            elif values is not None:
                lines.append(f"  {name:<20} mean {values['mean']:.4f}  median {values['median']:.4f}  "
                             f"std {values['std']:.4f}  n={values['count']}")
    return "\n".join(lines)
