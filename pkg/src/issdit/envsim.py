"""Planar manipulation environments with synthetic point-cloud sensing.

Two tasks on the workspace [-1, 1]^2: PlanarReach (drive the pusher disc
to the goal) and PlanarPush (push a block disc onto the goal). Dynamics
are quasi-static and friction-free: the block moves only when the pusher
disc would overlap it, and then only far enough to restore exact contact
distance. This keeps every step checkable by hand while still requiring
real geometric reasoning from a learned policy.

Also here: scripted experts, demonstration generation, and the binary
episode format used for datasets on disk.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TASKS = ("PlanarReach", "PlanarPush")

STATE_DIM = 2
ACTION_DIM = 2

# Points per object in a rendered cloud, and each object's z lift index.
BLOCK_POINTS, PUSHER_POINTS, GOAL_POINTS = 64, 32, 32
Z_LIFT = 0.02

MIN_SEPARATION = 0.25
PUSH_MIN_BLOCK_GOAL = 0.3
RESET_MAX_TRIES = 10_000

# Objects spawn inside this half-extent. Small enough that the pushing
# expert can stage behind the block and shove it to the goal within the
# step budget even for corner-to-corner layouts, with the staging point
# always inside the workspace.
SPAWN_HALF_EXTENT = 0.55

STAGING_TOL = 0.02
CLEARANCE = 0.02


@dataclass(frozen=True)
class EnvConfig:
    task: str = "PlanarPush"
    pusher_radius: float = 0.05
    block_radius: float = 0.10
    goal_radius: float = 0.10
    max_action_step: float = 0.05
    point_count: int = 128
    sensor_noise_std: float = 0.002
    max_steps: int = 60

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; choose from {TASKS}")
        if min(self.pusher_radius, self.block_radius, self.goal_radius) <= 0:
            raise ValueError("radii must be positive")
        if self.max_action_step <= 0:
            raise ValueError("max_action_step must be positive")

    @property
    def contact_distance(self) -> float:
        return self.pusher_radius + self.block_radius


@dataclass(frozen=True)
class EnvState:
    pusher_pos: np.ndarray
    block_pos: np.ndarray
    goal_pos: np.ndarray
    step_index: int = 0


@dataclass
class Episode:
    observations: list
    actions: list
    success: bool
    init_state: EnvState = None
    seed: int = None


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n < 1e-12:
        raise ValueError("cannot normalize a zero vector")
    return v / n


def _clamp_workspace(p: np.ndarray) -> np.ndarray:
    return np.clip(p, -1.0, 1.0)


def _segment_point_distance(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> float:
    """Distance from point c to segment [a, b]."""
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-24:
        return float(np.linalg.norm(c - a))
    t = float(np.clip((c - a) @ ab / denom, 0.0, 1.0))
    return float(np.linalg.norm(c - (a + t * ab)))


# ---------------------------------------------------------------------------
# Core dynamics


def reset(config: EnvConfig, seed: int) -> EnvState:
    """Place pusher, block, and goal by rejection sampling.

    All pairs at least MIN_SEPARATION apart; for PlanarPush the block and
    goal start at least PUSH_MIN_BLOCK_GOAL apart so success is never
    handed out at step zero.
    """
    rng = np.random.default_rng([seed, 0])
    h = SPAWN_HALF_EXTENT
    for _ in range(RESET_MAX_TRIES):
        pusher, block, goal = rng.uniform(-h, h, size=(3, 2))
        d_pb = np.linalg.norm(pusher - block)
        d_pg = np.linalg.norm(pusher - goal)
        d_bg = np.linalg.norm(block - goal)
        if min(d_pb, d_pg, d_bg) < MIN_SEPARATION:
            continue
        if config.task == "PlanarPush" and d_bg < PUSH_MIN_BLOCK_GOAL:
            continue
        return EnvState(pusher, block, goal, 0)
    raise RuntimeError(f"reset failed to satisfy constraints in {RESET_MAX_TRIES} tries")


def _is_success(pusher: np.ndarray, block: np.ndarray, goal: np.ndarray,
                config: EnvConfig) -> bool:
    if config.task == "PlanarReach":
        return float(np.linalg.norm(pusher - goal)) < config.goal_radius
    return float(np.linalg.norm(block - goal)) < config.goal_radius


def step(state: EnvState, action, config: EnvConfig):
    """Advance one step: clip the action, move the pusher, resolve contact.

    Returns (next_state, done, success). Contact resolution translates the
    block along the pusher->block direction until the centers sit exactly
    contact_distance apart; if clamping at the walls re-introduces overlap
    the pusher is retracted instead, so no step ever ends in penetration.
    """
    action = np.asarray(action, dtype=np.float64).reshape(2)
    norm = float(np.linalg.norm(action))
    if norm > config.max_action_step:
        action = action * (config.max_action_step / norm)

    pusher = _clamp_workspace(state.pusher_pos + action)
    block = state.block_pos.copy()
    r = config.contact_distance
    if float(np.linalg.norm(block - pusher)) < r:
        block = _clamp_workspace(pusher + r * _unit(block - pusher))
        if float(np.linalg.norm(block - pusher)) < r:
            pusher = block + r * _unit(pusher - block)

    nxt = EnvState(pusher, block, state.goal_pos, state.step_index + 1)
    success = _is_success(pusher, block, state.goal_pos, config)
    done = success or nxt.step_index >= config.max_steps
    return nxt, done, success


# ---------------------------------------------------------------------------
# Sensing


def render_pointcloud(state: EnvState, config: EnvConfig,
                      rng: np.random.Generator) -> np.ndarray:
    """Sample the three object outlines as one noisy, shuffled 3-D cloud.

    Block, pusher, and goal circles get 64/32/32 evenly spaced points,
    lifted to z = 0.02 * object id (block 0, pusher 1, goal 2) so the
    planar objects stay separable after pooling.
    """
    groups = (
        (state.block_pos, config.block_radius, BLOCK_POINTS, 0),
        (state.pusher_pos, config.pusher_radius, PUSHER_POINTS, 1),
        (state.goal_pos, config.goal_radius, GOAL_POINTS, 2),
    )
    pts = np.empty((sum(g[2] for g in groups), 3))
    row = 0
    for center, radius, count, obj_id in groups:
        ang = 2.0 * math.pi * np.arange(count) / count
        pts[row:row + count, 0] = center[0] + radius * np.cos(ang)
        pts[row:row + count, 1] = center[1] + radius * np.sin(ang)
        pts[row:row + count, 2] = Z_LIFT * obj_id
        row += count
    if config.sensor_noise_std > 0:
        pts = pts + rng.normal(0.0, config.sensor_noise_std, size=pts.shape)
    return pts[rng.permutation(len(pts))].astype(np.float32)


def observe(state: EnvState, config: EnvConfig, rng: np.random.Generator):
    """One observation frame: (point cloud, proprioceptive state)."""
    return render_pointcloud(state, config, rng), state.pusher_pos.astype(np.float32)


# ---------------------------------------------------------------------------
# Scripted experts


def scripted_expert(state: EnvState, config: EnvConfig) -> np.ndarray:
    """Privileged-state expert for either task.

    PlanarReach walks straight to the goal. PlanarPush first navigates to
    a staging point behind the block (detouring around a safety circle so
    the block is never disturbed en route), then pushes straight toward
    the goal.
    """
    if config.task == "PlanarReach":
        return _capped_step(state.goal_pos - state.pusher_pos, config.max_action_step)

    r = config.contact_distance
    away = _unit(state.block_pos - state.goal_pos)
    staging = state.block_pos + r * away
    if float(np.linalg.norm(state.pusher_pos - staging)) <= STAGING_TOL:
        return config.max_action_step * _unit(state.goal_pos - state.block_pos)
    return _navigate_to_staging(state, staging, away, config)


def _capped_step(v: np.ndarray, max_step: float) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n <= max_step:
        return np.asarray(v, dtype=np.float64)
    return max_step * (v / n)


def _navigate_to_staging(state: EnvState, staging: np.ndarray, away: np.ndarray,
                         config: EnvConfig) -> np.ndarray:
    pusher, block = state.pusher_pos, state.block_pos
    r = config.contact_distance
    safe = r + CLEARANCE
    # Walking radius slightly above `safe` so straight chords between
    # consecutive arc positions never dip inside the safety circle.
    walk_r = 1.02 * safe
    max_step = config.max_action_step

    # Final approach: land exactly on the staging point when the short hop
    # is contact-free.
    to_staging = staging - pusher
    if (float(np.linalg.norm(to_staging)) <= max_step
            and _segment_point_distance(pusher, staging, block) >= r - 1e-9):
        return to_staging

    outer = block + walk_r * away
    to_outer = outer - pusher
    if float(np.linalg.norm(to_outer)) > 1e-12:
        hop = _capped_step(to_outer, max_step)
        if _segment_point_distance(pusher, pusher + hop, block) >= safe - 1e-9:
            return hop

    # The straight segment would cut the safety circle: back out radially
    # if inside the walking radius, walk the arc while off the staging
    # bearing, and descend radially once aligned. The epsilons keep float
    # residue from re-selecting a branch with a ~1e-17 step forever.
    rvec = pusher - block
    rho = float(np.linalg.norm(rvec))
    if rho < walk_r - 1e-9:
        return min(max_step, walk_r - rho) * _unit(rvec)
    theta = math.atan2(rvec[1], rvec[0])
    theta_target = math.atan2(away[1], away[0])
    delta = (theta_target - theta + math.pi) % (2.0 * math.pi) - math.pi
    if abs(delta) > 1e-9:
        dtheta = math.copysign(min(max_step / rho, abs(delta)), delta)
        nxt = block + rho * np.array(
            [math.cos(theta + dtheta), math.sin(theta + dtheta)]
        )
        return nxt - pusher
    return -min(max_step, rho - walk_r) * _unit(rvec)


# ---------------------------------------------------------------------------
# Demonstration generation


def run_episode(config: EnvConfig, seed: int, policy=scripted_expert) -> Episode:
    """Roll `policy` (a (state, config) -> action callable) to termination,
    recording observations before every action and after the last."""
    state = reset(config, seed)
    init = state
    rng_render = np.random.default_rng([seed, 1])
    observations = [observe(state, config, rng_render)]
    actions = []
    success = False
    while True:
        a = policy(state, config)
        state, done, success = step(state, a, config)
        actions.append(np.asarray(a, dtype=np.float32))
        observations.append(observe(state, config, rng_render))
        if done:
            break
    return Episode(observations, actions, success, init_state=init, seed=seed)


def generate_demos(config: EnvConfig, count: int, seed_base: int) -> list:
    """Collect `count` successful expert episodes.

    Failed episodes are discarded. A budget of 10x count attempts plus a
    50% failure-rate ceiling guard against a silently broken expert.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    episodes = []
    attempts = 0
    budget = 10 * count
    while len(episodes) < count and attempts < budget:
        ep = run_episode(config, seed_base + attempts)
        attempts += 1
        if ep.success:
            episodes.append(ep)
    failures = attempts - len(episodes)
    if len(episodes) < count or failures > attempts / 2:
        raise RuntimeError(
            f"expert succeeded only {len(episodes)}/{attempts} times; "
            "demonstration source looks broken"
        )
    return episodes


# ---------------------------------------------------------------------------
# Dataset serialization

EPISODE_MAGIC = b"ISSD"
EPISODE_VERSION = 1


def save_episode(path, episode: Episode):
    """Write one episode in the little-endian binary layout."""
    steps = len(episode.observations)
    if steps != len(episode.actions) + 1:
        raise ValueError("episode must have exactly one more observation than actions")
    points0 = np.asarray(episode.observations[0][0])
    state0 = np.asarray(episode.observations[0][1])
    with open(path, "wb") as f:
        f.write(EPISODE_MAGIC)
        f.write(struct.pack("<IIIIIB", EPISODE_VERSION, steps, points0.shape[0],
                            state0.shape[0], ACTION_DIM, int(episode.success)))
        for i, (points, state) in enumerate(episode.observations):
            f.write(np.asarray(points, dtype="<f4").tobytes())
            f.write(np.asarray(state, dtype="<f4").tobytes())
            if i < steps - 1:
                f.write(np.asarray(episode.actions[i], dtype="<f4").tobytes())


def load_episode(path) -> Episode:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != EPISODE_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version, steps, n_points, state_dim, action_dim, success = struct.unpack(
            "<IIIIIB", f.read(21)
        )
        if version != EPISODE_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        observations = []
        actions = []
        for i in range(steps):
            pts = np.frombuffer(f.read(4 * n_points * 3), dtype="<f4").reshape(n_points, 3)
            st = np.frombuffer(f.read(4 * state_dim), dtype="<f4")
            observations.append((pts.copy(), st.copy()))
            if i < steps - 1:
                actions.append(np.frombuffer(f.read(4 * action_dim), dtype="<f4").copy())
    return Episode(observations, actions, bool(success))


def save_dataset(out_dir, episodes: list, config: EnvConfig,
                 normalization: dict | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "task": config.task,
        "config": {
            "pusher_radius": config.pusher_radius,
            "block_radius": config.block_radius,
            "goal_radius": config.goal_radius,
            "max_action_step": config.max_action_step,
            "point_count": config.point_count,
            "sensor_noise_std": config.sensor_noise_std,
            "max_steps": config.max_steps,
        },
        "episode_count": len(episodes),
        "point_count": int(np.asarray(episodes[0].observations[0][0]).shape[0]),
        "state_dim": STATE_DIM,
        "action_dim": ACTION_DIM,
    }
    if normalization is not None:
        manifest["normalization"] = normalization
    for i, ep in enumerate(episodes):
        save_episode(out / f"episode_{i:05d}.bin", ep)
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_dataset(in_dir):
    """Returns (episodes, manifest)."""
    root = Path(in_dir)
    with open(root / "manifest.json") as f:
        manifest = json.load(f)
    episodes = [
        load_episode(p) for p in sorted(root.glob("episode_*.bin"))
    ]
    if len(episodes) != manifest["episode_count"]:
        raise ValueError(
            f"{in_dir}: manifest lists {manifest['episode_count']} episodes, "
            f"found {len(episodes)}"
        )
    return episodes, manifest


def update_manifest(in_dir, **fields):
    root = Path(in_dir)
    with open(root / "manifest.json") as f:
        manifest = json.load(f)
    manifest.update(fields)
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest
