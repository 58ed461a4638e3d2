"""Causal constant-velocity Kalman filtering of trajectory centres."""

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .errors import InvalidArgument, NumericError
from .tracking import BoundingBox

F = np.array([[1.0, 0.0, 1.0, 0.0],
              [0.0, 1.0, 0.0, 1.0],
              [0.0, 0.0, 1.0, 0.0],
              [0.0, 0.0, 0.0, 1.0]])
H = np.array([[1.0, 0.0, 0.0, 0.0],
              [0.0, 1.0, 0.0, 0.0]])
# discrete white-acceleration noise for a unit time step, per axis [[1/4, 1/2], [1/2, 1]]
_q1 = np.array([[0.25, 0.5], [0.5, 1.0]])
Q0 = np.zeros((4, 4))
Q0[np.ix_([0, 2], [0, 2])] = _q1
Q0[np.ix_([1, 3], [1, 3])] = _q1


@dataclass
class KalmanState:
    state: np.ndarray  # (cx, cy, vx, vy)
    covariance: np.ndarray

    def __post_init__(self):
        self.state = np.asarray(self.state, dtype=np.float64).reshape(4)
        self.covariance = np.asarray(self.covariance, dtype=np.float64).reshape(4, 4)


@dataclass(frozen=True)
class NoiseConfig:
    q: float = 1.0
    r: float = 4.0
    init_pos_var: float = 4.0
    init_vel_var: float = 100.0

    def __post_init__(self):
        if self.q < 0 or self.r < 0:
            raise InvalidArgument("noise variances must be nonnegative")


def _symmetrize(p):
    return 0.5 * (p + p.T)


def kf_predict(ks: KalmanState, q: float) -> KalmanState:
    return KalmanState(F @ ks.state, _symmetrize(F @ ks.covariance @ F.T + q * Q0))


def kf_update(ks: KalmanState, meas: Tuple[float, float], r: float) -> KalmanState:
    """Measurement update with the Joseph-form covariance."""
    z = np.asarray(meas, dtype=np.float64).reshape(2)
    P = ks.covariance
    R = r * np.eye(2)
    S = H @ P @ H.T + R
    if np.linalg.cond(S) > 1e14 or abs(np.linalg.det(S)) < 1e-300:
        raise NumericError("innovation covariance is singular")
    K = np.linalg.solve(S, H @ P).T
    x = ks.state + K @ (z - H @ ks.state)
    A = np.eye(4) - K @ H
    P_new = A @ P @ A.T + K @ R @ K.T
    return KalmanState(x, _symmetrize(P_new))


def initial_state(center, noise: NoiseConfig) -> KalmanState:
    cov = np.diag([noise.init_pos_var, noise.init_pos_var, noise.init_vel_var, noise.init_vel_var])
    return KalmanState(np.array([center[0], center[1], 0.0, 0.0]), cov)


def filter_centres(centres, noise: NoiseConfig = NoiseConfig()) -> np.ndarray:
    """Filtered (cx, cy) per frame; the first frame is taken as measured."""
    centres = np.asarray(centres, dtype=np.float64)
    ks = initial_state(centres[0], noise)
    out = [centres[0].copy()]
    for z in centres[1:]:
        ks = kf_update(kf_predict(ks, noise.q), z, noise.r)
        out.append(ks.state[:2].copy())
    return np.array(out)


def smooth_trajectory(traj: Sequence[BoundingBox], noise: NoiseConfig = NoiseConfig()):
    if len(traj) == 0:
        raise InvalidArgument("cannot smooth an empty trajectory")
    filt = filter_centres([b.center for b in traj], noise)
    return [BoundingBox.from_center(cx, cy, b.w, b.h) for (cx, cy), b in zip(filt, traj)]
