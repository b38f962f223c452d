"""
Bouncing-cannonball corpus: balls shot from the left or right edge under
gravity, rescaled into pixel space and drawn as white discs.

Ground truth is kept next to the frames: latent states h (T, N, 4) and the
noisy positions a (T, N, 2), both in simulation units. The single affine map
from simulation units to pixel coordinates (row, col) is stored with the
corpus.

File layout (little-endian):
    magic "PDY1", u32 version, u32 sequence count, u16 T, H, W, R,
    f64 row_scale, row_offset, col_scale, col_offset
    per sequence: u8 N, h as f64, a as f64, frames as one byte per pixel
    trailing u32 CRC32 of everything before it
"""

from __future__ import annotations

import logging
import math
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from checkpoint import ByteReader
from errors import ConfigError, ContractError, FormatError
from lgssm import OBS_DIM, STATE_DIM, LgssmParams, Trajectory, sample_trajectory

logger = logging.getLogger(__name__)

MAGIC = b"PDY1"
VERSION = 1
SIDES = ("left", "right")
BOUNDS_TOL = 1e-9


@dataclass
class DatasetConfig:
    steps: int = 30
    height: int = 48
    width: int = 48
    radius: int = 2
    object_counts: tuple = (1, 2, 3)
    train_per_count: int = 5000
    test_per_count: int = 500
    seed: int = 0
    delta: float = 0.015
    gravity: float = 9.81
    emission_var: float = 0.001
    angle_range: tuple = (40.0, 60.0)
    speed_range: tuple = (2.0, 3.0)
    left_x_range: tuple = (-0.5, -0.1)
    y_range: tuple = (-0.5, 0.5)

    def validate(self):
        if self.radius < 1:
            raise ConfigError("radius must be at least 1")
        if 2 * self.radius + 1 >= min(self.height, self.width):
            raise ConfigError(f"a disc of radius {self.radius} does not fit a {self.height}x{self.width} image")
        if self.delta <= 0:
            raise ConfigError("delta must be positive")
        if self.steps < 1:
            raise ConfigError("steps must be at least 1")
        if not self.object_counts or min(self.object_counts) < 1 or max(self.object_counts) > 255:
            raise ConfigError("object counts must lie in [1, 255]")
        if self.train_per_count < 0 or self.test_per_count < 0:
            raise ConfigError("sequence counts must be non-negative")
        self.object_counts = tuple(sorted(set(int(n) for n in self.object_counts)))
        for name in ("angle_range", "speed_range", "left_x_range", "y_range"):
            low, high = getattr(self, name)
            if high < low:
                raise ConfigError(f"{name} is empty")
            setattr(self, name, (float(low), float(high)))
        return self

    @property
    def force(self):
        """u = -g (0, 0.5 delta^2, 0, delta)"""
        return -self.gravity * np.array([0.0, 0.5 * self.delta ** 2, 0.0, self.delta])

    @property
    def max_x(self):
        """Largest x-displacement over the sequence for a left-side launch"""
        return (self.steps - 1) * self.delta * self.speed_range[1] * math.cos(math.radians(self.angle_range[0]))


@dataclass
class AffineTransform:
    """Per-axis map from simulation (x, y) to pixel (row, col)"""

    row_scale: float
    row_offset: float
    col_scale: float
    col_offset: float

    def apply(self, positions):
        positions = np.asarray(positions, dtype=np.float64)
        rows = self.row_scale * positions[..., 1] + self.row_offset
        cols = self.col_scale * positions[..., 0] + self.col_offset
        return np.stack([rows, cols], axis=-1)

    def inverse(self, pixels):
        pixels = np.asarray(pixels, dtype=np.float64)
        x = (pixels[..., 1] - self.col_offset) / self.col_scale
        y = (pixels[..., 0] - self.row_offset) / self.row_scale
        return np.stack([x, y], axis=-1)

    def to_array(self):
        return np.array([self.row_scale, self.row_offset, self.col_scale, self.col_offset])

    @classmethod
    def from_array(cls, values):
        return cls(*(float(v) for v in values))


@dataclass
class ImageSequence:
    frames: np.ndarray
    n_objects: int
    states: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.uint8)
        self.states = np.asarray(self.states, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        steps = self.frames.shape[0]
        if self.states.shape != (steps, self.n_objects, STATE_DIM):
            raise ContractError(f"states must have shape {(steps, self.n_objects, STATE_DIM)}")
        if self.positions.shape != (steps, self.n_objects, OBS_DIM):
            raise ContractError(f"positions must have shape {(steps, self.n_objects, OBS_DIM)}")

    @property
    def steps(self):
        return self.frames.shape[0]

    def pixel_positions(self, transform: AffineTransform):
        return transform.apply(self.positions)


@dataclass
class Corpus:
    steps: int
    height: int
    width: int
    radius: int
    transform: AffineTransform
    sequences: list = field(default_factory=list)

    def __len__(self):
        return len(self.sequences)

    @property
    def object_counts(self):
        return tuple(sorted({s.n_objects for s in self.sequences}))

    def subset(self, n_objects):
        return [s for s in self.sequences if s.n_objects == n_objects]


def physics_params(config: DatasetConfig, initial_state) -> LgssmParams:
    """Ground-truth LGSSM: noise-free dynamics started from a known state"""
    return LgssmParams.create(
        delta=config.delta,
        force=config.force,
        transition_cov=np.zeros((STATE_DIM, STATE_DIM)),
        emission_cov=config.emission_var * np.eye(OBS_DIM),
        weights=[1.0],
        prior_means=np.asarray(initial_state, dtype=np.float64),
        prior_covs=np.zeros((STATE_DIM, STATE_DIM)),
    )


def generate_trajectory(config: DatasetConfig, rng: np.random.Generator, side) -> Trajectory:
    """One ball launched from the given side"""
    if side not in SIDES:
        raise ContractError(f"side must be one of {SIDES}, got {side!r}")
    angle = math.radians(rng.uniform(*config.angle_range))
    speed = rng.uniform(*config.speed_range)
    x0 = rng.uniform(*config.left_x_range)
    y0 = rng.uniform(*config.y_range)
    vx, vy = speed * math.cos(angle), speed * math.sin(angle)
    if side == "right":
        x0 += 0.9 * config.max_x
        vx = -vx
    params = physics_params(config, [x0, y0, vx, vy])
    return sample_trajectory(params, config.steps, rng, component=0)


class CannonballSimulator:
    """Draws every sequence from its own stream seeded by (seed, split, N, index)"""

    SPLITS = {"train": 0, "test": 1}

    def __init__(self, config: DatasetConfig):
        self.config = config.validate()

    def rng(self, split, n_objects, index):
        return np.random.default_rng([self.config.seed, self.SPLITS[split], n_objects, index])

    def simulate(self, split, n_objects, index):
        """(states (T, N, 4), positions (T, N, 2)) for one sequence"""
        rng = self.rng(split, n_objects, index)
        trajectories = [generate_trajectory(self.config, rng, SIDES[int(rng.integers(2))])
                        for _ in range(n_objects)]
        states = np.stack([traj.h for traj in trajectories], axis=1)
        positions = np.stack([traj.a for traj in trajectories], axis=1)
        return states, positions

    def jobs(self, split):
        count = self.config.train_per_count if split == "train" else self.config.test_per_count
        return [(split, n, i) for n in self.config.object_counts for i in range(count)]


def fit_rescale(config: DatasetConfig, positions) -> AffineTransform:
    """Affine map sending the extent of all positions onto [R, H-1-R] x [R, W-1-R]"""
    arrays = [np.asarray(p, dtype=np.float64).reshape(-1, OBS_DIM) for p in positions]
    if sum(len(a) for a in arrays) == 0:
        raise ContractError("cannot rescale an empty corpus")
    points = np.concatenate(arrays)
    (x_min, y_min), (x_max, y_max) = points.min(axis=0), points.max(axis=0)
    if x_max <= x_min or y_max <= y_min:
        raise ContractError("degenerate position extent, cannot rescale")
    r = config.radius
    col_scale = (config.width - 1 - 2 * r) / (x_max - x_min)
    # Flipped: the largest y lands on the top row R.
    row_scale = -(config.height - 1 - 2 * r) / (y_max - y_min)
    return AffineTransform(row_scale=row_scale, row_offset=r - row_scale * y_max,
                           col_scale=col_scale, col_offset=r - col_scale * x_min)


def rescale(config: DatasetConfig, positions):
    """
    Corpus-global rescale.

    Returns:
        (list of pixel-space arrays matching positions, AffineTransform)
    """
    transform = fit_rescale(config, positions)
    return [transform.apply(p) for p in positions], transform


def rasterize(position, radius, height, width):
    """
    Binary (H, W) image with a disc of the given radius around each rounded
    centre (row, col); discs are combined with a logical OR.
    """
    centres = np.atleast_2d(np.asarray(position, dtype=np.float64))
    rows, cols = np.mgrid[0:height, 0:width]
    image = np.zeros((height, width), dtype=bool)
    for row, col in centres:
        if not (radius - BOUNDS_TOL <= row <= height - 1 - radius + BOUNDS_TOL
                and radius - BOUNDS_TOL <= col <= width - 1 - radius + BOUNDS_TOL):
            raise ContractError(f"disc centre ({row:.3f}, {col:.3f}) leaves the {height}x{width} image")
        image |= (rows - np.round(row)) ** 2 + (cols - np.round(col)) ** 2 <= radius ** 2
    return image.astype(np.uint8)


def generate_corpus(config: DatasetConfig, threads=1):
    """
    Simulate the training and test splits and rescale them with one shared map.

    Returns:
        dict split -> Corpus
    """
    simulator = CannonballSimulator(config)
    jobs = {split: simulator.jobs(split) for split in CannonballSimulator.SPLITS}
    with ThreadPoolExecutor(max_workers=max(1, int(threads))) as pool:
        simulated = {split: list(pool.map(lambda job: simulator.simulate(*job), jobs[split]))
                     for split in jobs}
    logger.info("simulated %s sequences", {split: len(v) for split, v in simulated.items()})

    all_positions = [positions for split in simulated for _, positions in simulated[split]]
    transform = fit_rescale(config, all_positions)
    corpora = {}
    for split, results in simulated.items():
        sequences = []
        for (_, n_objects, _), (states, positions) in zip(jobs[split], results):
            pixels = transform.apply(positions)
            frames = np.stack([rasterize(pixels[t], config.radius, config.height, config.width)
                               for t in range(config.steps)])
            sequences.append(ImageSequence(frames=frames, n_objects=n_objects, states=states, positions=positions))
        corpora[split] = Corpus(steps=config.steps, height=config.height, width=config.width,
                                radius=config.radius, transform=transform, sequences=sequences)
    return corpora


def encode_corpus(corpus: Corpus) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(corpus.sequences)),
             struct.pack("<4H", corpus.steps, corpus.height, corpus.width, corpus.radius),
             corpus.transform.to_array().astype("<f8").tobytes()]
    for sequence in corpus.sequences:
        parts.append(struct.pack("<B", sequence.n_objects))
        parts.append(sequence.states.astype("<f8").tobytes())
        parts.append(sequence.positions.astype("<f8").tobytes())
        parts.append(np.ascontiguousarray(sequence.frames, dtype=np.uint8).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_corpus(data: bytes) -> Corpus:
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError(f"bad dataset magic {data[:4]!r}")
    reader = ByteReader(data[:-4], label="dataset file")
    reader.take(4)
    version, count = reader.unpack("<II")
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    steps, height, width, radius = reader.unpack("<4H")
    transform = AffineTransform.from_array(np.frombuffer(reader.take(32), dtype="<f8"))

    raw = []
    for _ in range(count):
        (n_objects,) = reader.unpack("<B")
        states = np.frombuffer(reader.take(8 * steps * n_objects * STATE_DIM), dtype="<f8")
        positions = np.frombuffer(reader.take(8 * steps * n_objects * OBS_DIM), dtype="<f8")
        frames = np.frombuffer(reader.take(steps * height * width), dtype=np.uint8)
        raw.append((n_objects, states, positions, frames))
    if reader.offset != len(reader.data):
        raise FormatError("trailing bytes after the last sequence")
    if zlib.crc32(reader.data) != struct.unpack("<I", data[-4:])[0]:
        raise FormatError("dataset checksum mismatch")

    sequences = []
    for n_objects, states, positions, frames in raw:
        frames = frames.reshape(steps, height, width).copy()
        if frames.max(initial=0) > 1:
            raise FormatError("dataset frames are not binary")
        sequences.append(ImageSequence(
            frames=frames, n_objects=n_objects,
            states=states.astype(np.float64).reshape(steps, n_objects, STATE_DIM),
            positions=positions.astype(np.float64).reshape(steps, n_objects, OBS_DIM)))
    return Corpus(steps=steps, height=height, width=width, radius=radius, transform=transform,
                  sequences=sequences)


def write_dataset(path, corpus: Corpus):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_corpus(corpus))
    logger.info("wrote %d sequences to %s", len(corpus.sequences), path)


def read_dataset(path) -> Corpus:
    return decode_corpus(Path(path).read_bytes())
