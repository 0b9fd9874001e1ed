"""Small input checks shared by the estimator and the evaluation loop."""

import numpy as np


def check_episodes(episodes):
    """Demonstrations must be successful and shape-consistent."""
    if not episodes:
        raise ValueError("need at least one episode")
    for i, ep in enumerate(episodes):
        if len(ep.observations) != len(ep.actions) + 1:
            raise ValueError(
                f"episode {i}: {len(ep.observations)} observations do not match "
                f"{len(ep.actions)} actions + 1"
            )
        if not ep.success:
            raise ValueError(f"episode {i}: training data must be successful episodes")
    return episodes


def check_observation_window(frames, n_frames: int):
    """Pad or trim raw (points, state) frames to exactly n_frames.

    Fewer frames than requested repeat the oldest one, matching how
    training windows treat episode starts.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("observation window is empty")
    for pts, state in frames:
        pts = np.asarray(pts)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"point cloud must be (N, 3), got {pts.shape}")
        if np.asarray(state).ndim != 1:
            raise ValueError("state must be a flat vector")
    if len(frames) < n_frames:
        frames = [frames[0]] * (n_frames - len(frames)) + frames
    return frames[-n_frames:]


def check_dims_match(meta: dict, state_dim: int, action_dim: int):
    """Checkpoint metadata must agree with the environment's dimensions."""
    got_state = meta.get("state_dim")
    got_action = meta.get("model", {}).get("action_dim")
    if got_state != state_dim or got_action != action_dim:
        raise ValueError(
            f"checkpoint dims (state {got_state}, action {got_action}) do not "
            f"match environment (state {state_dim}, action {action_dim})"
        )
