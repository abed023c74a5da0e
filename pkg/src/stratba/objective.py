"""Residuals, Jacobians, and the closed-form landmark solve for both stages.

Stage 1 blends an object-space term with an affine term, weighted by eta:
for camera P (3x4), homogeneous landmark x (last coordinate 1) and
measurement m,

    rows 1-2:  sqrt(1-eta) * (P[0:2] x - (P[2] x) m)
    rows 3-4:  sqrt(eta)   * (P[0:2] x - m)

The residual is affine in the landmark's three free coordinates, which gives
each landmark a closed-form least-squares optimum once cameras are fixed.

Stage 2 is the plain projective reprojection error pi(P x) - m with
pi([x, y, z]) = [x/z, y/z], evaluated on unit-norm homogeneous parameters.

Cameras are vectorized row-major (12 entries) everywhere.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .bal_io import BaProblem, Observation, ProjectiveState

logger = logging.getLogger(__name__)

# Below this |z| the perspective division is treated as degenerate and the
# enclosing trial step becomes invalid (cost +inf).
Z_EPSILON = 1e-12

STAGE1 = 1
STAGE2 = 2


@dataclass(frozen=True)
class PoseConfig:
    """Trade-off between the object-space rows and the affine rows of stage 1."""

    eta: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")


@dataclass(frozen=True)
class ResidualBlock:
    """One observation's residual rows and Jacobians for the active stage."""

    observation: Observation
    residual: np.ndarray  # (4,) stage 1, (2,) stage 2
    pose_jacobian: np.ndarray  # (4, 12) or (2, 12)
    landmark_jacobian: np.ndarray  # (4, 3) or (2, 4)


class ProjectionDegenerateError(ValueError):
    """Perspective division with |z| at or below Z_EPSILON."""


# ---------------------------------------------------------------------------
# batched stage-1 kernels


def stage1_residuals(cameras: np.ndarray, landmarks: np.ndarray, measurements: np.ndarray,
                     eta: float) -> np.ndarray:
    """Residual rows for a batch of observations.

    cameras (n,3,4), landmarks (n,4) with last coordinate 1, measurements (n,2)
    -> (n,4).
    """
    s1 = math.sqrt(1.0 - eta)
    s2 = math.sqrt(eta)
    top = np.einsum("nij,nj->ni", cameras[:, :2, :], landmarks)
    z = np.einsum("nj,nj->n", cameras[:, 2, :], landmarks)
    out = np.empty((len(cameras), 4))
    out[:, :2] = s1 * (top - z[:, None] * measurements)
    out[:, 2:] = s2 * (top - measurements)
    return out


def stage1_jacobians(cameras: np.ndarray, landmarks: np.ndarray, measurements: np.ndarray,
                     eta: float) -> tuple[np.ndarray, np.ndarray]:
    """Pose (n,4,12) and landmark (n,4,3) Jacobians for a batch of observations.

    The landmark Jacobian is with respect to the three free coordinates; the
    fixed trailing 1 contributes only to the residual offset.
    """
    n = len(cameras)
    s1 = math.sqrt(1.0 - eta)
    s2 = math.sqrt(eta)
    jp = np.zeros((n, 4, 12))
    x = landmarks  # (n, 4)
    jp[:, 0, 0:4] = s1 * x
    jp[:, 0, 8:12] = -s1 * measurements[:, 0:1] * x
    jp[:, 1, 4:8] = s1 * x
    jp[:, 1, 8:12] = -s1 * measurements[:, 1:2] * x
    jp[:, 2, 0:4] = s2 * x
    jp[:, 3, 4:8] = s2 * x

    p3 = cameras[:, :, :3]  # (n, 3, 3)
    jl = np.empty((n, 4, 3))
    jl[:, 0, :] = s1 * (p3[:, 0, :] - measurements[:, 0:1] * p3[:, 2, :])
    jl[:, 1, :] = s1 * (p3[:, 1, :] - measurements[:, 1:2] * p3[:, 2, :])
    jl[:, 2, :] = s2 * p3[:, 0, :]
    jl[:, 3, :] = s2 * p3[:, 1, :]
    return jp, jl


# ---------------------------------------------------------------------------
# batched stage-2 kernels


def stage2_residuals(cameras: np.ndarray, landmarks: np.ndarray, measurements: np.ndarray
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Reprojection residuals (n,2) plus a validity mask (|z| above guard)."""
    u = np.einsum("nij,nj->ni", cameras, landmarks)
    z = u[:, 2]
    valid = np.abs(z) > Z_EPSILON
    zsafe = np.where(valid, z, 1.0)
    out = u[:, :2] / zsafe[:, None] - measurements
    return out, valid


def stage2_jacobians(cameras: np.ndarray, landmarks: np.ndarray, measurements: np.ndarray
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pose (n,2,12) and landmark (n,2,4) Jacobians plus validity mask."""
    n = len(cameras)
    u = np.einsum("nij,nj->ni", cameras, landmarks)
    z = u[:, 2]
    valid = np.abs(z) > Z_EPSILON
    zsafe = np.where(valid, z, 1.0)
    inv_z = 1.0 / zsafe
    # d pi / d u, rows for x and y
    dpi = np.zeros((n, 2, 3))
    dpi[:, 0, 0] = inv_z
    dpi[:, 1, 1] = inv_z
    dpi[:, 0, 2] = -u[:, 0] * inv_z**2
    dpi[:, 1, 2] = -u[:, 1] * inv_z**2
    jl = np.einsum("nrc,ncj->nrj", dpi, cameras)
    # d u_c / d vec(P) is the landmark repeated in column band c
    jp = np.einsum("nrc,nj->nrcj", dpi, landmarks).reshape(n, 2, 12)
    return jp, jl, valid


# ---------------------------------------------------------------------------
# single-observation operations


def pose_residual(camera: np.ndarray, landmark: np.ndarray, measurement: np.ndarray,
                  config: PoseConfig) -> np.ndarray:
    """Stage-1 residual 4-vector for one observation."""
    return stage1_residuals(camera[None], np.asarray(landmark, dtype=float)[None],
                            np.asarray(measurement, dtype=float)[None], config.eta)[0]


def pose_jacobians(camera: np.ndarray, landmark: np.ndarray, measurement: np.ndarray,
                   config: PoseConfig) -> tuple[np.ndarray, np.ndarray]:
    """Stage-1 Jacobians (4x12 pose, 4x3 landmark) for one observation."""
    jp, jl = stage1_jacobians(camera[None], np.asarray(landmark, dtype=float)[None],
                              np.asarray(measurement, dtype=float)[None], config.eta)
    return jp[0], jl[0]


def projective_residual(camera: np.ndarray, landmark: np.ndarray, measurement: np.ndarray
                        ) -> np.ndarray:
    """Stage-2 reprojection residual; raises ProjectionDegenerateError near z=0."""
    r, valid = stage2_residuals(camera[None], np.asarray(landmark, dtype=float)[None],
                                np.asarray(measurement, dtype=float)[None])
    if not valid[0]:
        raise ProjectionDegenerateError("projected depth within epsilon of zero")
    return r[0]


def projective_jacobians(camera: np.ndarray, landmark: np.ndarray, measurement: np.ndarray
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Stage-2 Jacobians (2x12 pose, 2x4 landmark) for one observation."""
    jp, jl, valid = stage2_jacobians(camera[None], np.asarray(landmark, dtype=float)[None],
                                     np.asarray(measurement, dtype=float)[None])
    if not valid[0]:
        raise ProjectionDegenerateError("projected depth within epsilon of zero")
    return jp[0], jl[0]


def _gather(state: ProjectiveState, problem: BaProblem):
    cams = state.cameras[problem.camera_indices]
    lms = state.landmarks[problem.landmark_indices]
    return cams, lms


def total_cost(state: ProjectiveState, problem: BaProblem, stage: int,
               config: PoseConfig | None = None) -> float:
    """Sum of squared residual norms over all observations.

    Stage-2 cost is +inf when any observation is degenerate. Summation is
    numpy pairwise in observation order, so repeated evaluations are
    bit-identical.
    """
    cams, lms = _gather(state, problem)
    if stage == STAGE1:
        r = stage1_residuals(cams, lms, problem.measurements, (config or PoseConfig()).eta)
    elif stage == STAGE2:
        r, valid = stage2_residuals(cams, lms, problem.measurements)
        if not valid.all():
            return math.inf
    else:
        raise ValueError(f"unknown stage {stage!r}")
    return float(np.sum(r * r))


def residual_block(state: ProjectiveState, problem: BaProblem, obs_index: int, stage: int,
                   config: PoseConfig | None = None) -> ResidualBlock:
    """Residual and Jacobian rows of one observation, for inspection and tests."""
    c = int(problem.camera_indices[obs_index])
    l = int(problem.landmark_indices[obs_index])
    m = problem.measurements[obs_index]
    cam = state.cameras[c]
    lm = state.landmarks[l]
    if stage == STAGE1:
        eta = (config or PoseConfig()).eta
        r = stage1_residuals(cam[None], lm[None], m[None], eta)[0]
        jp, jl = stage1_jacobians(cam[None], lm[None], m[None], eta)
        jp, jl = jp[0], jl[0]
    else:
        r = projective_residual(cam, lm, m)
        jp, jl = projective_jacobians(cam, lm, m)
    return ResidualBlock(Observation(c, l, m), r, jp, jl)


# ---------------------------------------------------------------------------
# closed-form landmark elimination


def landmark_order(problem: BaProblem) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Observation permutation grouping landmarks, camera-sorted within a group.

    Returns (order, landmark_ids, counts): applying ``order`` to the
    observation arrays makes each landmark's observations contiguous with
    strictly increasing camera indices inside the group (BAL problems have at
    most one observation per camera/landmark pair).
    """
    order = np.lexsort((problem.camera_indices, problem.landmark_indices))
    lm_sorted = problem.landmark_indices[order]
    ids, counts = np.unique(lm_sorted, return_counts=True)
    return order, ids, counts


def solve_landmarks(state: ProjectiveState, problem: BaProblem,
                    config: PoseConfig | None = None) -> np.ndarray:
    """Closed-form per-landmark optimum of the stage-1 cost with cameras fixed.

    Each landmark's stacked residual is affine in its three free coordinates;
    the minimum-norm least-squares solution is taken via SVD with singular
    values below 1e-10 times the largest treated as zero. Landmarks whose
    stacked system is rank-deficient at that tolerance are left unchanged and
    counted in a single warning. Unobserved landmarks are also left unchanged.
    Returns a new (n_l, 4) array with last coordinate exactly 1.
    """
    eta = (config or PoseConfig()).eta
    out = np.array(state.landmarks, copy=True)
    if problem.num_observations == 0:
        return out

    order, ids, counts = landmark_order(problem)
    cams_obs = state.cameras[problem.camera_indices[order]]
    meas_obs = problem.measurements[order]
    # Affine model r = A v + c on the free coordinates: A is the landmark
    # Jacobian, c the residual at the origin landmark (0, 0, 0, 1).
    zero_lm = np.zeros((len(order), 4))
    zero_lm[:, 3] = 1.0
    a_rows = stage1_jacobians(cams_obs, zero_lm, meas_obs, eta)[1]  # (n,4,3)
    c_rows = stage1_residuals(cams_obs, zero_lm, meas_obs, eta)  # (n,4)

    n_degenerate = 0
    offsets = np.concatenate([[0], np.cumsum(counts)])
    for k in np.unique(counts):
        sel = np.nonzero(counts == k)[0]
        row_idx = offsets[sel][:, None] + np.arange(k)[None, :]  # (g, k)
        a = a_rows[row_idx].reshape(len(sel), 4 * k, 3)
        c = c_rows[row_idx].reshape(len(sel), 4 * k)
        u, s, vt = np.linalg.svd(a, full_matrices=False)
        tol = 1e-10 * s[:, :1]
        ok = s > tol
        inv_s = np.where(ok, 1.0 / np.where(ok, s, 1.0), 0.0)
        v = -np.einsum("gji,gj,gkj,gk->gi", vt, inv_s, u, c)
        full_rank = ok.all(axis=1) & (s[:, 0] > 0)
        n_degenerate += int((~full_rank).sum())
        lm_sel = ids[sel[full_rank]]
        out[lm_sel, :3] = v[full_rank]
        out[lm_sel, 3] = 1.0

    if n_degenerate:
        logger.warning("left %d landmarks unchanged: rank-deficient closed-form systems",
                       n_degenerate)
    return out
