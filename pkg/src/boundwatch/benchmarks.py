"""Synthetic environment families with bounded costs.

Two families are provided:

PrimitiveNav
    A planar obstacle field of cylinders in front of a vehicle at the origin.
    The vehicle observes a depth profile over a 120 degree arc and picks one of
    K straight-line motion primitives that ramp to a lateral offset. The cost is
    ``max(0, 1 - d_min / d_thresh)`` with ``d_min`` the closest approach to any
    obstacle surface along the chosen path.

SmoothQuadratic
    Environments are target vectors ``e ~ N(center, spread^2 I)`` and the cost of
    weights ``w`` is ``min(1, ||w - e||^2 / beta)``. Differentiable almost
    everywhere, which makes it the reference problem for gradient checks.

Environments are plain value records. Everything an environment contributes to a
rollout (observation, per-primitive clearance) depends on the environment alone,
so datasets cache those arrays and batch rollouts reduce to a matrix product.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import NamedTuple, Union

import numpy as np

from boundwatch._validation import as_rng, check_positive_int
from boundwatch.distributions import WeightSample

PRIMITIVE_NAV = "PrimitiveNav"
SMOOTH_QUADRATIC = "SmoothQuadratic"
FAMILIES = (PRIMITIVE_NAV, SMOOTH_QUADRATIC)

_CHUNK = 20_000


# --------------------------------------------------------------------------
# Benchmark descriptions


@dataclass(frozen=True)
class NavGeometry:
    """Fixed geometry and sensing model of the PrimitiveNav family."""

    n_primitives: int = 7
    n_bins: int = 24
    max_offset: float = 1.0
    obstacle_radius: float = 0.1
    d_thresh: float = 0.5
    sensor_max: float = 3.0
    fov_degrees: float = 120.0
    ramp_length: float = 1.0
    path_length: float = 2.5

    def __post_init__(self):
        check_positive_int(self.n_primitives, "n_primitives", minimum=2)
        check_positive_int(self.n_bins, "n_bins")
        for name in ("obstacle_radius", "d_thresh", "sensor_max", "ramp_length"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.sensor_max < self.d_thresh:
            raise ValueError("sensor_max must be at least d_thresh")
        if self.path_length <= self.ramp_length:
            raise ValueError("path_length must exceed ramp_length")

    @property
    def lateral_offsets(self) -> np.ndarray:
        return np.linspace(-self.max_offset, self.max_offset, self.n_primitives)

    @property
    def bin_angles(self) -> np.ndarray:
        half = math.radians(self.fov_degrees) / 2.0
        edges = np.linspace(-half, half, self.n_bins + 1)
        return 0.5 * (edges[:-1] + edges[1:])


@dataclass(frozen=True)
class QuadraticShape:
    """Dimension and saturation scale of the SmoothQuadratic family."""

    dim: int = 4
    beta: float = 4.0

    def __post_init__(self):
        check_positive_int(self.dim, "dim")
        if self.beta <= 0:
            raise ValueError("beta must be positive")


@dataclass(frozen=True)
class BenchmarkSpec:
    """Environment family plus its policy parameterization."""

    family: str
    family_params: Union[NavGeometry, QuadraticShape]
    horizon: int = 1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        expected = NavGeometry if self.family == PRIMITIVE_NAV else QuadraticShape
        if not isinstance(self.family_params, expected):
            raise TypeError(f"{self.family} needs {expected.__name__} parameters")
        check_positive_int(self.horizon, "horizon")

    @classmethod
    def primitive_nav(cls, **geometry) -> "BenchmarkSpec":
        return cls(PRIMITIVE_NAV, NavGeometry(**geometry))

    @classmethod
    def smooth_quadratic(cls, dim: int = 4, beta: float = 4.0) -> "BenchmarkSpec":
        return cls(SMOOTH_QUADRATIC, QuadraticShape(dim, beta))

    @property
    def policy_dim(self) -> int:
        p = self.family_params
        if self.family == PRIMITIVE_NAV:
            return p.n_primitives * (p.n_bins + 1)
        return p.dim

    def to_dict(self) -> dict:
        return {"family": self.family, **self.family_params.__dict__, "horizon": self.horizon}

    @classmethod
    def from_dict(cls, data: dict) -> "BenchmarkSpec":
        data = dict(data)
        family = data.pop("family")
        horizon = data.pop("horizon", 1)
        if family == PRIMITIVE_NAV:
            return cls(family, NavGeometry(**data), horizon)
        if family == SMOOTH_QUADRATIC:
            return cls(family, QuadraticShape(**data), horizon)
        raise ValueError(f"unknown family {family!r}")


@dataclass(frozen=True)
class NavParams:
    """Distribution over PrimitiveNav environments.

    ``min_gap`` guarantees a free corridor: one primitive (chosen uniformly) has
    every obstacle at least ``min_gap / 2`` of lateral clearance from its path.
    ``sensor_gain`` is a nuisance range; the gain scales the rendered observation
    including its constant channel, which rescales every score by a positive
    factor and so never changes the chosen primitive.
    """

    obstacle_count: int = 7
    min_gap: float = 0.3
    position_box: tuple = (1.3, 2.0, -1.0, 1.0)
    sensor_gain: tuple = (1.0, 1.0)

    def __post_init__(self):
        if isinstance(self.obstacle_count, bool) or int(self.obstacle_count) != self.obstacle_count:
            raise TypeError("obstacle_count must be an integer")
        if self.obstacle_count < 0:
            raise ValueError("obstacle_count must be non-negative")
        if self.min_gap < 0:
            raise ValueError("min_gap must be non-negative")
        box = tuple(float(v) for v in self.position_box)
        if len(box) != 4 or box[0] > box[1] or box[2] > box[3]:
            raise ValueError("position_box must be (x_lo, x_hi, y_lo, y_hi)")
        gain = tuple(float(v) for v in self.sensor_gain)
        if len(gain) != 2 or not 0.0 < gain[0] <= gain[1]:
            raise ValueError("sensor_gain must be (lo, hi) with 0 < lo <= hi")
        object.__setattr__(self, "obstacle_count", int(self.obstacle_count))
        object.__setattr__(self, "position_box", box)
        object.__setattr__(self, "sensor_gain", gain)


@dataclass(frozen=True)
class QuadraticParams:
    """Distribution over SmoothQuadratic targets; ``obs_noise`` is a nuisance."""

    center: tuple = (0.0, 0.0, 0.0, 0.0)
    spread: float = 0.5
    obs_noise: float = 0.0

    def __post_init__(self):
        center = tuple(float(v) for v in np.atleast_1d(self.center))
        object.__setattr__(self, "center", center)
        if self.spread < 0 or self.obs_noise < 0:
            raise ValueError("spread and obs_noise must be non-negative")


EnvDistributionParams = Union[NavParams, QuadraticParams]


def params_to_dict(params: EnvDistributionParams) -> dict:
    out = dict(params.__dict__)
    for key, value in out.items():
        if isinstance(value, tuple):
            out[key] = list(value)
    return out


def params_from_dict(spec: BenchmarkSpec, data: dict) -> EnvDistributionParams:
    cls = NavParams if spec.family == PRIMITIVE_NAV else QuadraticParams
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    return cls(**kwargs)


def _check_params(spec: BenchmarkSpec, params: EnvDistributionParams):
    if spec.family == PRIMITIVE_NAV and not isinstance(params, NavParams):
        raise TypeError("PrimitiveNav needs NavParams")
    if spec.family == SMOOTH_QUADRATIC:
        if not isinstance(params, QuadraticParams):
            raise TypeError("SmoothQuadratic needs QuadraticParams")
        if len(params.center) != spec.family_params.dim:
            raise ValueError(
                f"center has length {len(params.center)}, expected {spec.family_params.dim}"
            )


# --------------------------------------------------------------------------
# Environment records and datasets


class NavEnvironment(NamedTuple):
    obstacles: np.ndarray  # (count, 2) obstacle centers
    gain: float


class QuadraticEnvironment(NamedTuple):
    target: np.ndarray
    observation: np.ndarray


class EpisodeResult(NamedTuple):
    cost: float
    min_distance: float
    chosen_primitive: int
    score_vector: np.ndarray


@dataclass(frozen=True, eq=False)
class EnvironmentDataset:
    """i.i.d. environments drawn from one parameterized distribution.

    Stored column-wise: ``arrays`` holds ``obstacles``/``gain`` (PrimitiveNav) or
    ``targets``/``observations`` (SmoothQuadratic), each with leading axis = size.
    """

    params: EnvDistributionParams
    seed: int
    arrays: dict = field(repr=False)

    @property
    def size(self) -> int:
        return len(next(iter(self.arrays.values())))

    def __len__(self) -> int:
        return self.size

    @property
    def environments(self) -> list:
        if "obstacles" in self.arrays:
            return [NavEnvironment(o, float(g)) for o, g in zip(self.arrays["obstacles"], self.arrays["gain"])]
        return [
            QuadraticEnvironment(t, o)
            for t, o in zip(self.arrays["targets"], self.arrays["observations"])
        ]

    def __eq__(self, other):
        if not isinstance(other, EnvironmentDataset):
            return NotImplemented
        return (
            self.params == other.params
            and self.seed == other.seed
            and self.arrays.keys() == other.arrays.keys()
            and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays)
        )

    def subset(self, index) -> "EnvironmentDataset":
        return EnvironmentDataset(self.params, self.seed, {k: v[index] for k, v in self.arrays.items()})

    @cached_property
    def _nav_cache(self) -> dict:
        return {}


def _draw_nav(geom: NavGeometry, params: NavParams, size: int, rng: np.random.Generator) -> dict:
    x_lo, x_hi, y_lo, y_hi = params.position_box
    count = params.obstacle_count
    xs = rng.uniform(x_lo, x_hi, size=(size, count))
    ys = rng.uniform(y_lo, y_hi, size=(size, count))
    corridor = rng.integers(geom.n_primitives, size=size)
    g_lo, g_hi = params.sensor_gain
    gain = rng.uniform(g_lo, g_hi, size=size) if g_hi > g_lo else np.full(size, g_lo)
    if params.min_gap > 0 and count > 0:
        lane = geom.lateral_offsets[corridor][:, None]
        offset = ys - lane
        needed = params.min_gap / 2.0 + geom.obstacle_radius
        blocked = np.abs(offset) < needed
        direction = np.where(offset >= 0.0, 1.0, -1.0)
        ys = np.where(blocked, lane + direction * needed, ys)
    return {"obstacles": np.stack([xs, ys], axis=-1), "gain": gain}


def _draw_quadratic(params: QuadraticParams, size: int, rng: np.random.Generator) -> dict:
    center = np.asarray(params.center)
    targets = center + params.spread * rng.standard_normal((size, center.size))
    noise = params.obs_noise * rng.standard_normal((size, center.size))
    return {"targets": targets, "observations": targets + noise}


def sample_dataset(
    spec: BenchmarkSpec, params: EnvDistributionParams, size: int, seed: int
) -> EnvironmentDataset:
    """Draw `size` i.i.d. environments; bit-exact for a fixed seed."""
    size = check_positive_int(size, "size")
    _check_params(spec, params)
    rng = as_rng(int(seed))
    if spec.family == PRIMITIVE_NAV:
        arrays = _draw_nav(spec.family_params, params, size, rng)
    else:
        arrays = _draw_quadratic(params, size, rng)
    return EnvironmentDataset(params, int(seed), arrays)


# --------------------------------------------------------------------------
# PrimitiveNav geometry


def _segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from points (..., 2) to the segment a-b."""
    ab = b - a
    t = np.clip(((points - a) @ ab) / (ab @ ab), 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.linalg.norm(points - closest, axis=-1)


def primitive_min_distances(geom: NavGeometry, obstacles: np.ndarray) -> np.ndarray:
    """Closest approach to any obstacle surface along each primitive path.

    `obstacles` has shape (N, count, 2); returns (N, K), capped at sensor_max.
    """
    obstacles = np.asarray(obstacles, dtype=float)
    n, count = obstacles.shape[:2]
    out = np.full((n, geom.n_primitives), geom.sensor_max)
    if count == 0:
        return out
    origin = np.zeros(2)
    for j, lateral in enumerate(geom.lateral_offsets):
        knee = np.array([geom.ramp_length, lateral])
        end = np.array([geom.path_length, lateral])
        dist = np.minimum(
            _segment_distance(obstacles, origin, knee), _segment_distance(obstacles, knee, end)
        )
        clearance = np.maximum(dist - geom.obstacle_radius, 0.0).min(axis=1)
        out[:, j] = np.minimum(clearance, geom.sensor_max)
    return out


def depth_profile(geom: NavGeometry, obstacles: np.ndarray) -> np.ndarray:
    """Ray-cast depth over the sensor arc; (N, count, 2) -> (N, n_bins)."""
    obstacles = np.asarray(obstacles, dtype=float)
    n, count = obstacles.shape[:2]
    depth = np.full((n, geom.n_bins), geom.sensor_max)
    if count == 0:
        return depth
    angles = geom.bin_angles
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=-1)  # (B, 2)
    along = obstacles @ dirs.T  # (N, count, B)
    sq_norm = np.sum(obstacles**2, axis=-1)[..., None]
    perp_sq = sq_norm - along**2
    r2 = geom.obstacle_radius**2
    hit = (perp_sq <= r2) & (along > 0.0)
    entry = along - np.sqrt(np.maximum(r2 - perp_sq, 0.0))
    entry = np.where(hit, np.maximum(entry, 0.0), np.inf)
    return np.minimum(entry.min(axis=1), geom.sensor_max)


def render_observation(geom: NavGeometry, obstacles: np.ndarray, gain) -> np.ndarray:
    """Observation fed to the linear policy: ``gain * [proximity; 1]``."""
    proximity = 1.0 - depth_profile(geom, obstacles) / geom.sensor_max
    augmented = np.concatenate([proximity, np.ones((proximity.shape[0], 1))], axis=1)
    return augmented * np.asarray(gain, dtype=float).reshape(-1, 1)


def nav_features(spec: BenchmarkSpec, dataset: EnvironmentDataset) -> tuple[np.ndarray, np.ndarray]:
    """Cached ``(observations (N, B+1), primitive min distances (N, K))``."""
    cache = dataset._nav_cache
    key = spec.family_params
    if key not in cache:
        geom = spec.family_params
        obstacles, gain = dataset.arrays["obstacles"], dataset.arrays["gain"]
        obs = np.empty((len(gain), geom.n_bins + 1))
        dmin = np.empty((len(gain), geom.n_primitives))
        for start in range(0, len(gain), _CHUNK):
            sl = slice(start, start + _CHUNK)
            obs[sl] = render_observation(geom, obstacles[sl], gain[sl])
            dmin[sl] = primitive_min_distances(geom, obstacles[sl])
        cache[key] = (obs, dmin)
    return cache[key]


def distance_cost(geom: NavGeometry, min_distance) -> np.ndarray:
    return np.maximum(0.0, 1.0 - np.asarray(min_distance) / geom.d_thresh)


# --------------------------------------------------------------------------
# Rollouts


def _weights_matrix(spec: BenchmarkSpec, weights) -> np.ndarray:
    w = weights.weights if isinstance(weights, WeightSample) else np.asarray(weights, dtype=float)
    w = np.atleast_2d(w)
    if w.shape[-1] != spec.policy_dim:
        raise ValueError(f"weights have dimension {w.shape[-1]}, expected {spec.policy_dim}")
    return w


def policy_scores(spec: BenchmarkSpec, dataset: EnvironmentDataset, weights) -> np.ndarray:
    """Per-environment score vectors (softmax inputs) for a single weight vector."""
    w = _weights_matrix(spec, weights)[0]
    if spec.family == PRIMITIVE_NAV:
        geom = spec.family_params
        obs, _ = nav_features(spec, dataset)
        return obs @ w.reshape(geom.n_primitives, geom.n_bins + 1).T
    return -((w - dataset.arrays["observations"]) ** 2)


def batch_costs(spec: BenchmarkSpec, dataset: EnvironmentDataset, weights) -> np.ndarray:
    """Costs of each of k weight vectors on every environment; shape (k, N)."""
    w = _weights_matrix(spec, weights)
    if spec.family == PRIMITIVE_NAV:
        geom = spec.family_params
        obs, dmin = nav_features(spec, dataset)
        costs = distance_cost(geom, dmin)  # (N, K)
        mats = w.reshape(len(w), geom.n_primitives, geom.n_bins + 1)
        scores = np.einsum("nb,kpb->knp", obs, mats)
        chosen = np.argmax(scores, axis=-1)  # lowest index wins ties
        return np.take_along_axis(costs[None], chosen[..., None], axis=-1)[..., 0]
    beta = spec.family_params.beta
    targets = dataset.arrays["targets"]
    sq = np.sum((w[:, None, :] - targets[None]) ** 2, axis=-1)
    return np.minimum(sq / beta, 1.0)


def cost_gradient(spec: BenchmarkSpec, dataset: EnvironmentDataset, weights) -> np.ndarray:
    """d cost / d w for SmoothQuadratic; shape (k, N, d). Zero where clamped."""
    if spec.family != SMOOTH_QUADRATIC:
        raise ValueError("analytic cost gradients exist only for SmoothQuadratic")
    w = _weights_matrix(spec, weights)
    beta = spec.family_params.beta
    diff = w[:, None, :] - dataset.arrays["targets"][None]
    active = np.sum(diff**2, axis=-1) < beta
    return np.where(active[..., None], 2.0 * diff / beta, 0.0)


def rollout(spec: BenchmarkSpec, env, policy_weights) -> EpisodeResult:
    """Run one policy on one environment record."""
    w = _weights_matrix(spec, policy_weights)[0]
    if spec.family == PRIMITIVE_NAV:
        geom = spec.family_params
        obstacles = np.asarray(env.obstacles, dtype=float).reshape(1, -1, 2)
        obs = render_observation(geom, obstacles, [env.gain])[0]
        scores = w.reshape(geom.n_primitives, geom.n_bins + 1) @ obs
        chosen = int(np.argmax(scores))
        dmin = float(primitive_min_distances(geom, obstacles)[0, chosen])
        return EpisodeResult(float(distance_cost(geom, dmin)), dmin, chosen, scores)
    beta = spec.family_params.beta
    target = np.asarray(env.target, dtype=float)
    sq = float(np.sum((w - target) ** 2))
    scores = -((w - np.asarray(env.observation)) ** 2)
    return EpisodeResult(min(sq / beta, 1.0), math.sqrt(sq), -1, scores)


def dataset_cost(spec: BenchmarkSpec, dataset: EnvironmentDataset, policy_weights) -> float:
    """Mean rollout cost over the dataset."""
    if dataset.size == 0:
        raise ValueError("dataset is empty")
    return float(batch_costs(spec, dataset, policy_weights)[0].mean())


def expected_cost_oracle(
    spec: BenchmarkSpec,
    params: EnvDistributionParams,
    policy_weights,
    samples: int = 100_000,
    seed: int = 0,
) -> tuple[float, float]:
    """Monte-Carlo estimate and standard error of the expected cost."""
    samples = check_positive_int(samples, "samples", minimum=1000)
    rng = as_rng(int(seed))
    total = 0.0
    total_sq = 0.0
    for start in range(0, samples, _CHUNK):
        size = min(_CHUNK, samples - start)
        chunk_seed = int(rng.integers(2**63))
        costs = batch_costs(spec, sample_dataset(spec, params, size, chunk_seed), policy_weights)[0]
        total += costs.sum()
        total_sq += np.sum(costs**2)
    mean = total / samples
    var = max(total_sq / samples - mean**2, 0.0) * samples / (samples - 1)
    return float(mean), float(math.sqrt(var / samples))


def nuisance_shift(params: EnvDistributionParams, strength: float = 1.0) -> EnvDistributionParams:
    """Alter only cost-irrelevant rendering parameters.

    PrimitiveNav: the sensor gain range becomes ``(0.25, 0.5)`` scaled toward 1
    by ``1 - strength``. SmoothQuadratic: observation noise of scale `strength`
    is added to the channel the cost never reads.
    """
    if isinstance(params, NavParams):
        lo = 1.0 - strength * 0.75
        hi = 1.0 - strength * 0.5
        return replace(params, sensor_gain=(lo, hi))
    return replace(params, obs_noise=params.obs_noise + strength)


def export_dataset_csv(
    spec: BenchmarkSpec, dataset: EnvironmentDataset, path, policy_weights=None, policy_name="policy"
) -> Path:
    """One row per environment: id, parameters, and optionally the policy's cost."""
    path = Path(path)
    costs = None if policy_weights is None else batch_costs(spec, dataset, policy_weights)[0]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        if spec.family == PRIMITIVE_NAV:
            count = dataset.params.obstacle_count
            header = ["env_id", "gain"] + [f"obs{i}_{ax}" for i in range(count) for ax in "xy"]
            rows = (
                [float(g)] + obs.reshape(-1).tolist()
                for obs, g in zip(dataset.arrays["obstacles"], dataset.arrays["gain"])
            )
        else:
            dim = dataset.arrays["targets"].shape[1]
            header = ["env_id"] + [f"target{i}" for i in range(dim)] + [f"observation{i}" for i in range(dim)]
            rows = (
                t.tolist() + o.tolist()
                for t, o in zip(dataset.arrays["targets"], dataset.arrays["observations"])
            )
        if costs is not None:
            header.append(f"cost_{policy_name}")
        writer.writerow(header)
        for i, row in enumerate(rows):
            env_id = f"{dataset.seed}-{i}"
            writer.writerow([env_id] + row + ([repr(float(costs[i]))] if costs is not None else []))
    return path
