"""Motion data model: skeleton layout and pose/sequence containers.

A pose vector concatenates, per joint, 3 position and 3 velocity channels
plus one root-yaw channel: V = 6*J + 1.  Positions are root-relative except
for the root itself, which is absolute.  Velocity channels are the forward
finite difference of the stored position channels scaled by fps, so the two
blocks stay mutually consistent by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DomainError, ShapeError

JOINT_NAMES = (
    "root",
    "head",
    "l_shoulder",
    "r_shoulder",
    "l_hand",
    "r_hand",
    "l_foot",
    "r_foot",
)

NUM_JOINTS = len(JOINT_NAMES)
POSE_DIM = 6 * NUM_JOINTS + 1

DEFAULT_FPS = 20
F_MIN = 30
F_MAX = 200

# Rest offsets relative to the root (x forward, y left, z up), meters.
REST_OFFSETS = np.array(
    [
        [0.00, 0.00, 0.00],   # root (absolute channel holds the real position)
        [0.00, 0.00, 0.75],   # head
        [0.00, 0.22, 0.50],   # l_shoulder
        [0.00, -0.22, 0.50],  # r_shoulder
        [0.05, 0.28, 0.10],   # l_hand
        [0.05, -0.28, 0.10],  # r_hand
        [0.00, 0.12, -0.90],  # l_foot
        [0.00, -0.12, -0.90], # r_foot
    ],
    dtype=np.float64,
)

ROOT_HEIGHT = 0.90


def joints_for_dim(pose_dim: int) -> int:
    """Invert V = 6*J + 1 for any skeleton size."""
    if pose_dim < 7 or (pose_dim - 1) % 6 != 0:
        raise ShapeError(f"pose dim {pose_dim} is not of the form 6*J + 1")
    return (pose_dim - 1) // 6


@dataclass
class MotionSequence:
    """F x V pose trajectory with frame-rate metadata.

    ``data`` is float64 in memory; serialization quantizes to float32.
    """

    data: np.ndarray
    fps: int = DEFAULT_FPS

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ShapeError(f"motion data must be 2-D (F, V), got {self.data.shape}")
        if self.fps <= 0:
            raise DomainError(f"fps must be positive, got {self.fps}")
        if not np.all(np.isfinite(self.data)):
            raise DomainError("motion data contains non-finite entries")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def pose_dim(self) -> int:
        return self.data.shape[1]

    @property
    def num_joints(self) -> int:
        return joints_for_dim(self.pose_dim)

    @property
    def positions(self) -> np.ndarray:
        """(F, J, 3) view of the position channels."""
        J = self.num_joints
        return self.data[:, : 3 * J].reshape(self.num_frames, J, 3)

    @property
    def velocities(self) -> np.ndarray:
        """(F, J, 3) view of the velocity channels."""
        J = self.num_joints
        return self.data[:, 3 * J : 6 * J].reshape(self.num_frames, J, 3)

    @property
    def yaw(self) -> np.ndarray:
        return self.data[:, 6 * self.num_joints]

    def absolute_positions(self) -> np.ndarray:
        """(F, J, 3) joint positions in world coordinates."""
        pos = self.positions.copy()
        pos[:, 1:, :] += pos[:, :1, :]
        return pos

    def copy(self) -> "MotionSequence":
        return MotionSequence(self.data.copy(), self.fps)


def assemble_motion(positions: np.ndarray, yaw: np.ndarray, fps: int) -> MotionSequence:
    """Build a MotionSequence from (F, J, 3) positions and (F,) yaw.

    Positions are snapped to the float32 grid before velocities are taken, so
    the velocity/position consistency survives a float32 round trip on disk.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 3 or positions.shape[2] != 3:
        raise ShapeError(f"positions must be (F, J, 3), got {positions.shape}")
    F, J = positions.shape[:2]
    if F < 2:
        raise DomainError("need at least 2 frames to define velocities")

    positions = positions.astype(np.float32).astype(np.float64)
    velocities = np.empty_like(positions)
    velocities[1:] = (positions[1:] - positions[:-1]) * fps
    velocities[0] = velocities[1]

    data = np.concatenate(
        [
            positions.reshape(F, J * 3),
            velocities.reshape(F, J * 3),
            np.asarray(yaw, dtype=np.float64).reshape(F, 1),
        ],
        axis=1,
    )
    return MotionSequence(data, fps)


def velocity_consistency_error(motion: MotionSequence) -> float:
    """Max |velocity - fps * delta(position)| over frames 1..F-1 and channels."""
    pos = motion.positions
    vel = motion.velocities
    fd = (pos[1:] - pos[:-1]) * motion.fps
    return float(np.abs(vel[1:] - fd).max())
