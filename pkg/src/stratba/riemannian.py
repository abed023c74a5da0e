"""Tangent-space machinery for the unit-sphere stage-2 parametrization.

Homogeneous cameras (12-vectors) and landmarks (4-vectors) carry a per-vector
scale freedom, so the stage-2 normal equations are solved in the orthogonal
complement of each parameter vector: Jacobians are right-multiplied by
orthonormal complement bases (12->11 and 4->3 columns), updates are solved in
those coordinates, back-projected, and the state is retracted to the sphere
by plain normalization.
"""

from __future__ import annotations

import numpy as np

from .bal_io import ProjectiveState
from .normal_eq import (
    BOTH,
    BlockGroup,
    LandmarkBlockStore,
    assemble,
    build_stage2_blocks,
)

from dataclasses import dataclass

_UNIT_TOL = 1e-9


@dataclass
class TangentBasis:
    """Orthonormal complement bases for every camera and landmark vector."""

    camera_bases: np.ndarray  # (n_p, 12, 11)
    landmark_bases: np.ndarray  # (n_l, 4, 3)


def tangent_basis(v: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the orthogonal complement of a unit vector.

    Deterministic Householder construction: the trailing n-1 columns of the
    reflector sending v to a signed first axis vector. Accepts a batch
    (..., n) and returns (..., n, n-1).
    """
    v = np.asarray(v, dtype=float)
    norms = np.linalg.norm(v, axis=-1)
    if np.abs(norms - 1.0).max() > _UNIT_TOL:
        raise ValueError("tangent basis requires unit vectors; retract first")
    n = v.shape[-1]
    sigma = np.where(v[..., 0] >= 0, 1.0, -1.0)
    u = v.copy()
    u[..., 0] += sigma
    u /= np.linalg.norm(u, axis=-1, keepdims=True)
    basis = -2.0 * u[..., :, None] * u[..., None, 1:]
    idx = np.arange(n - 1)
    basis[..., idx + 1, idx] += 1.0
    return basis


def state_tangent_bases(state: ProjectiveState) -> TangentBasis:
    """Bases for the current point; recompute after every accepted step."""
    return TangentBasis(
        camera_bases=tangent_basis(state.cameras.reshape(-1, 12)),
        landmark_bases=tangent_basis(state.landmarks),
    )


def project_blocks(blocks: LandmarkBlockStore, bases: TangentBasis) -> LandmarkBlockStore:
    """Right-multiply each Jacobian row band by its parameter's tangent basis.

    Pose bands shrink 12 -> 11 and landmark bands 4 -> 3; residual columns are
    untouched.
    """
    groups = []
    for g in blocks.groups:
        cam_b = bases.camera_bases[g.cams]  # (g, k, 12, 11)
        groups.append(BlockGroup(
            lm_ids=g.lm_ids,
            cams=g.cams,
            pose_jac=np.einsum("gkri,gkij->gkrj", g.pose_jac, cam_b),
            lm_jac=np.einsum("gkri,gij->gkrj", g.lm_jac, bases.landmark_bases[g.lm_ids]),
            residual=g.residual,
        ))
    return LandmarkBlockStore(groups, blocks.n_cameras, blocks.n_landmarks,
                              blocks.pose_width - 1, blocks.lm_width - 1,
                              blocks.rows_per_obs)


def retract(state: ProjectiveState) -> ProjectiveState:
    """Normalize every camera 12-vector and landmark 4-vector to unit norm."""
    cams = state.cameras.reshape(-1, 12)
    cam_norms = np.linalg.norm(cams, axis=1)
    lm_norms = np.linalg.norm(state.landmarks, axis=1)
    if (cam_norms == 0).any() or (lm_norms == 0).any():
        raise ValueError("cannot retract a zero-norm parameter vector")
    return ProjectiveState(
        (cams / cam_norms[:, None]).reshape(state.cameras.shape),
        state.landmarks / lm_norms[:, None],
    )


def lift_stage1_to_stage2(state: ProjectiveState) -> ProjectiveState:
    """Bridge a stage-1 state (landmark last coordinate 1) to stage-2 form.

    Pure renormalization: the projective cost is scale-invariant, so residuals
    are unchanged.
    """
    return retract(state)


def apply_tangent_step(state: ProjectiveState, bases: TangentBasis, report) -> ProjectiveState | None:
    """Back-project tangent updates, add, and retract; None if a norm collapses."""
    n_p = len(bases.camera_bases)
    dp = report.pose_update.reshape(n_p, 11)
    dl = report.landmark_update.reshape(-1, 3)
    cams = state.cameras.reshape(n_p, 12) + np.einsum("nij,nj->ni", bases.camera_bases, dp)
    lms = state.landmarks + np.einsum("nij,nj->ni", bases.landmark_bases, dl)
    cam_norms = np.linalg.norm(cams, axis=1)
    lm_norms = np.linalg.norm(lms, axis=1)
    if (cam_norms == 0).any() or (lm_norms == 0).any():
        return None
    return ProjectiveState((cams / cam_norms[:, None]).reshape(state.cameras.shape),
                           lms / lm_norms[:, None])


def riemannian_step(problem, state: ProjectiveState, config, lam: float | None = None,
                    bases: TangentBasis | None = None):
    """One tangent-space reduced solve at the given damping (defaults to the
    configured starting value). Returns the inner solver's StepReport with
    tangent-dimension updates (11 per camera, 3 per landmark)."""
    from .solvers import solve_reduced

    if lam is None:
        lam = config.initial_lambda
    if bases is None:
        bases = state_tangent_bases(state)
    raw = build_stage2_blocks(problem, state)
    system = assemble(project_blocks(raw, bases), lam, BOTH)
    return solve_reduced(system, config)
