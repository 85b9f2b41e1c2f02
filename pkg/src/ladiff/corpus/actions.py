"""Procedural kinematics for the synthetic action set.

Every synthesizer draws its spatial parameters (path length, stride, arc,
cycle counts) from the per-sample rng and then executes the SAME spatial
curve over the requested number of frames.  Because the geometry is fixed
while the duration varies, shorter renditions of an action come out
proportionally faster, which is the length/speed coupling the corpus must
exhibit.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from .motion import NUM_JOINTS, REST_OFFSETS, ROOT_HEIGHT

ROOT, HEAD, L_SHOULDER, R_SHOULDER, L_HAND, R_HAND, L_FOOT, R_FOOT = range(8)


def _base_pose(F: int) -> np.ndarray:
    """(F, J, 3) rest pose: root at standing height, joints at rest offsets."""
    pos = np.tile(REST_OFFSETS[None, :, :], (F, 1, 1))
    pos[:, ROOT, 2] = ROOT_HEIGHT
    return pos


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _eased_keyframes(tau: np.ndarray, knots: list[float], values: list[float]) -> np.ndarray:
    """Piecewise cosine-eased interpolation through (knot, value) pairs."""
    out = np.empty_like(tau)
    for i in range(len(knots) - 1):
        lo, hi = knots[i], knots[i + 1]
        mask = (tau >= lo) & (tau <= hi) if i == len(knots) - 2 else (tau >= lo) & (tau < hi)
        local = (tau[mask] - lo) / (hi - lo)
        ease = 0.5 - 0.5 * np.cos(np.pi * local)
        out[mask] = values[i] + (values[i + 1] - values[i]) * ease
    out[tau < knots[0]] = values[0]
    out[tau > knots[-1]] = values[-1]
    return out


def _texture(pos: np.ndarray, tau: np.ndarray, rng) -> None:
    """Small smooth per-joint wobble for diversity.

    Cycle counts are fixed per clip (not per second) so the wobble slows
    down with duration like everything else.
    """
    for joint in range(1, NUM_JOINTS):
        amp = rng.uniform(0.002, 0.006, size=3)
        cycles = rng.uniform(1.0, 3.0, size=3)
        phase = rng.uniform(0.0, 2 * np.pi, size=3)
        pos[:, joint, :] += amp * np.sin(2 * np.pi * cycles * tau[:, None] + phase)


def _param(rng_draw, overrides, name):
    """Draw a parameter, then apply any override.

    The draw always happens so the rng stream stays aligned whether or not
    overrides are supplied.
    """
    value = rng_draw()
    if overrides and name in overrides:
        return type(value)(overrides[name])
    return value


def _gait(pos, tau, n_steps, step_length, arm_swing=0.16):
    """Leg/arm oscillation for locomotion: n_steps foot falls over the clip."""
    theta = np.pi * n_steps * tau  # half-cycle per step
    swing = 0.5 * step_length * np.sin(theta)
    lift = 0.05 * np.maximum(0.0, np.sin(theta))
    pos[:, L_FOOT, 0] += swing
    pos[:, R_FOOT, 0] -= swing
    pos[:, L_FOOT, 2] += lift
    pos[:, R_FOOT, 2] += 0.05 * np.maximum(0.0, -np.sin(theta))
    pos[:, L_HAND, 0] -= arm_swing * np.sin(theta)
    pos[:, R_HAND, 0] += arm_swing * np.sin(theta)


def synth_walk(F, fps, rng, overrides=None):
    tau = np.linspace(0.0, 1.0, F)
    n_steps = _param(lambda: int(rng.integers(3, 8)), overrides, "n_steps")
    step_length = _param(lambda: float(rng.uniform(0.45, 0.75)), overrides, "step_length")
    path = n_steps * step_length

    pos = _base_pose(F)
    pos[:, ROOT, 0] = path * tau
    pos[:, ROOT, 1] = 0.015 * np.sin(np.pi * n_steps * tau)
    pos[:, ROOT, 2] += 0.02 * np.abs(np.sin(np.pi * n_steps * tau))
    _gait(pos, tau, n_steps, step_length)
    yaw = np.zeros(F)
    params = {"n_steps": n_steps, "step_length": step_length}
    return pos, yaw, params


def synth_circle(F, fps, rng, overrides=None):
    tau = np.linspace(0.0, 1.0, F)
    radius = _param(lambda: float(rng.uniform(0.7, 1.3)), overrides, "radius")
    direction = _param(lambda: float(rng.choice([-1.0, 1.0])), overrides, "direction")
    psi = 2 * np.pi * tau

    pos = _base_pose(F)
    pos[:, ROOT, 0] = radius * np.sin(psi)
    pos[:, ROOT, 1] = direction * radius * (1.0 - np.cos(psi))
    step_length = _param(lambda: float(rng.uniform(0.45, 0.7)), overrides, "step_length")
    n_steps = max(3, int(round(2 * np.pi * radius / step_length)))
    pos[:, ROOT, 2] += 0.02 * np.abs(np.sin(np.pi * n_steps * tau))
    _gait(pos, tau, n_steps, step_length)
    yaw = direction * psi
    params = {"radius": radius, "direction": direction, "n_steps": n_steps}
    return pos, yaw, params


def synth_sit(F, fps, rng, overrides=None):
    tau = np.linspace(0.0, 1.0, F)
    drop = _param(lambda: float(rng.uniform(0.35, 0.5)), overrides, "drop")
    lean = _param(lambda: float(rng.uniform(0.06, 0.12)), overrides, "lean")
    s = _smoothstep(tau)

    pos = _base_pose(F)
    pos[:, ROOT, 0] = -lean * s
    pos[:, ROOT, 1] = 0.02 * np.sin(2 * np.pi * tau)
    pos[:, ROOT, 2] = ROOT_HEIGHT - drop * s
    # Feet stay planted in the world, so their root-relative coordinates
    # mirror the root displacement.
    for foot in (L_FOOT, R_FOOT):
        pos[:, foot, 0] += lean * s
        pos[:, foot, 2] += drop * s
    # Hands come forward onto the thighs.
    for hand in (L_HAND, R_HAND):
        pos[:, hand, 0] += 0.18 * s
        pos[:, hand, 2] += 0.08 * s
    yaw = np.zeros(F)
    params = {"drop": drop, "lean": lean}
    return pos, yaw, params


def synth_throw(F, fps, rng, overrides=None):
    tau = np.linspace(0.0, 1.0, F)
    arc = _param(lambda: float(rng.uniform(0.8, 1.2)), overrides, "arc")

    pos = _base_pose(F)
    knots = [0.0, 0.35, 0.6, 1.0]
    pos[:, R_HAND, 0] += arc * _eased_keyframes(tau, knots, [0.0, -0.33, 0.45, 0.25])
    pos[:, R_HAND, 2] += arc * _eased_keyframes(tau, knots, [0.0, 0.10, 0.35, 0.15])
    pos[:, R_SHOULDER, 0] += 0.3 * arc * _eased_keyframes(tau, knots, [0.0, -0.1, 0.12, 0.06])
    pos[:, ROOT, 0] = 0.08 * arc * _eased_keyframes(tau, knots, [0.0, -0.4, 1.0, 0.7])
    pos[:, ROOT, 1] = 0.03 * np.sin(2 * np.pi * tau)
    yaw = np.zeros(F)
    params = {"arc": arc}
    return pos, yaw, params


def synth_jump(F, fps, rng, overrides=None):
    tau = np.linspace(0.0, 1.0, F)
    n_hops = _param(lambda: int(rng.integers(1, 4)), overrides, "n_hops")
    hop_length = _param(lambda: float(rng.uniform(0.25, 0.5)), overrides, "hop_length")
    height = _param(lambda: float(rng.uniform(0.15, 0.3)), overrides, "height")

    pos = _base_pose(F)
    hop_phase = (tau * n_hops) % 1.0
    hop_index = np.minimum(np.floor(tau * n_hops), n_hops - 1)
    hop_phase = np.where(tau >= 1.0, 1.0, hop_phase)
    p = hop_phase
    pos[:, ROOT, 0] = hop_length * (hop_index + _smoothstep(p))
    pos[:, ROOT, 2] += height * 4.0 * p * (1.0 - p)
    tuck = 0.12 * 4.0 * p * (1.0 - p)
    pos[:, L_FOOT, 2] += tuck
    pos[:, R_FOOT, 2] += tuck
    pos[:, L_HAND, 2] += 0.2 * 4.0 * p * (1.0 - p)
    pos[:, R_HAND, 2] += 0.2 * 4.0 * p * (1.0 - p)
    yaw = np.zeros(F)
    params = {"n_hops": n_hops, "hop_length": hop_length, "height": height}
    return pos, yaw, params


def synth_wave(F, fps, rng, overrides=None):
    tau = np.linspace(0.0, 1.0, F)
    n_waves = _param(lambda: int(rng.integers(2, 7)), overrides, "n_waves")
    amplitude = _param(lambda: float(rng.uniform(0.15, 0.25)), overrides, "amplitude")
    raise_hand = _smoothstep(tau / 0.15)

    pos = _base_pose(F)
    pos[:, R_HAND, 2] += 0.55 * raise_hand
    pos[:, R_HAND, 0] += 0.10 * raise_hand
    pos[:, R_HAND, 1] += amplitude * np.sin(2 * np.pi * n_waves * tau) * raise_hand
    pos[:, R_SHOULDER, 2] += 0.06 * raise_hand
    pos[:, ROOT, 1] = 0.02 * np.sin(2 * np.pi * n_waves * tau)
    pos[:, ROOT, 0] = 0.01 * np.sin(2 * np.pi * tau)
    yaw = np.zeros(F)
    params = {"n_waves": n_waves, "amplitude": amplitude}
    return pos, yaw, params


SYNTHESIZERS = {
    "walk": synth_walk,
    "circle": synth_circle,
    "sit": synth_sit,
    "throw": synth_throw,
    "jump": synth_jump,
    "wave": synth_wave,
}


def synthesize(action, F, fps, rng, overrides=None):
    """Run one action synthesizer and apply the shared wobble texture."""
    if action not in SYNTHESIZERS:
        raise ConfigError(f"no synthesizer for action {action!r}")
    tau = np.linspace(0.0, 1.0, F)
    pos, yaw, params = SYNTHESIZERS[action](F, fps, rng, overrides)
    _texture(pos, tau, rng)
    return pos, yaw, params
