"""Shared builders and independent oracles for the test suite.

The dense helpers here deliberately assemble full Jacobians and normal
matrices with plain loops over the single-observation operations, so they
share no code with the batched/blocked production paths they check.
"""

from __future__ import annotations

import numpy as np
import pytest

from stratba.bal_io import BaProblem, ProjectiveState
from stratba.normal_eq import BOTH, POSE_ONLY, assemble, build_stage1_blocks, build_stage2_blocks
from stratba.objective import (
    STAGE1,
    STAGE2,
    PoseConfig,
    pose_jacobians,
    pose_residual,
    projective_jacobians,
    projective_residual,
)
from stratba.riemannian import project_blocks, retract, state_tangent_bases


def make_random_problem(n_cameras: int, n_landmarks: int, seed: int,
                        cameras_per_landmark: int | None = None) -> BaProblem:
    """Random observation graph; every landmark sees >= 2 distinct cameras."""
    rng = np.random.default_rng(seed)
    cam_idx, lm_idx = [], []
    for j in range(n_landmarks):
        k = cameras_per_landmark or rng.integers(2, n_cameras + 1)
        k = min(k, n_cameras)
        for c in sorted(rng.choice(n_cameras, size=k, replace=False)):
            cam_idx.append(c)
            lm_idx.append(j)
    n_obs = len(cam_idx)
    return BaProblem(
        num_cameras=n_cameras,
        num_landmarks=n_landmarks,
        num_observations=n_obs,
        camera_indices=np.array(cam_idx),
        landmark_indices=np.array(lm_idx),
        measurements=2.0 * rng.standard_normal((n_obs, 2)),
    )


def make_random_state(problem: BaProblem, seed: int, stage: int) -> ProjectiveState:
    rng = np.random.default_rng(seed)
    cameras = rng.standard_normal((problem.num_cameras, 3, 4))
    landmarks = np.concatenate(
        [rng.standard_normal((problem.num_landmarks, 3)),
         np.ones((problem.num_landmarks, 1))], axis=1)
    state = ProjectiveState(cameras, landmarks)
    if stage == STAGE2:
        state = retract(state)
    return state


def central_difference_jacobian(f, x: np.ndarray) -> np.ndarray:
    """Central differences with the contract step 1e-6 * max(1, |entry|)."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x))
    jac = np.zeros((f0.size, x.size))
    flat = x.ravel()
    for k in range(flat.size):
        h = 1e-6 * max(1.0, abs(flat[k]))
        xp = flat.copy()
        xm = flat.copy()
        xp[k] += h
        xm[k] -= h
        jac[:, k] = (np.asarray(f(xp.reshape(x.shape))) -
                     np.asarray(f(xm.reshape(x.shape)))).ravel() / (2 * h)
    return jac


def dense_jacobian(problem: BaProblem, state: ProjectiveState, stage: int,
                   eta: float = 0.1) -> tuple[np.ndarray, np.ndarray, int, int]:
    """Full Jacobian and residual stacked observation-by-observation.

    Returns (J, r, d_p, d_l) with pose columns first (d_p per camera), then
    landmark columns (d_l per landmark). Built from the scalar per-observation
    operations with explicit python loops.
    """
    cfg = PoseConfig(eta)
    d_p = 12
    d_l = 3 if stage == STAGE1 else 4
    r_rows = 4 if stage == STAGE1 else 2
    n_rows = r_rows * problem.num_observations
    n_cols = d_p * problem.num_cameras + d_l * problem.num_landmarks
    jac = np.zeros((n_rows, n_cols))
    res = np.zeros(n_rows)
    for k in range(problem.num_observations):
        c = int(problem.camera_indices[k])
        l = int(problem.landmark_indices[k])
        cam = state.cameras[c]
        lm = state.landmarks[l]
        m = problem.measurements[k]
        if stage == STAGE1:
            r = pose_residual(cam, lm, m, cfg)
            jp, jl = pose_jacobians(cam, lm, m, cfg)
        else:
            r = projective_residual(cam, lm, m)
            jp, jl = projective_jacobians(cam, lm, m)
        rows = slice(r_rows * k, r_rows * (k + 1))
        res[rows] = r
        jac[rows, d_p * c:d_p * (c + 1)] = jp
        jac[rows, d_p * problem.num_cameras + d_l * l:
            d_p * problem.num_cameras + d_l * (l + 1)] = jl
    return jac, res, d_p, d_l


def dense_damped_hessian(jac: np.ndarray, res: np.ndarray, n_cameras: int, d_p: int,
                         lam: float, mode: str) -> tuple[np.ndarray, np.ndarray]:
    """(J^T J + damping, J^T r) with the production Jacobi clamping convention."""
    h = jac.T @ jac
    g = jac.T @ res
    pose_cols = n_cameras * d_p
    diag = np.diag(h).copy()
    d = np.clip(np.sqrt(diag), 1e-6, 1e6) ** 2
    damp = np.zeros_like(diag)
    damp[:pose_cols] = lam * d[:pose_cols]
    if mode == BOTH:
        damp[pose_cols:] = lam * d[pose_cols:]
    return h + np.diag(damp), g


def make_varpro_system(n_cameras: int, n_landmarks: int, seed: int, lam: float = 1e-4,
                       cameras_per_landmark: int | None = None):
    """Random stage-1 system (pose-only damping) plus its problem and state."""
    problem = make_random_problem(n_cameras, n_landmarks, seed, cameras_per_landmark)
    state = make_random_state(problem, seed + 1000, STAGE1)
    blocks = build_stage1_blocks(problem, state, PoseConfig(0.1))
    return assemble(blocks, lam, POSE_ONLY), problem, state


def make_riemannian_system(n_cameras: int, n_landmarks: int, seed: int, lam: float = 1e-4):
    """Random projected stage-2 system (both-sided damping)."""
    problem = make_random_problem(n_cameras, n_landmarks, seed)
    state = make_random_state(problem, seed + 1000, STAGE2)
    bases = state_tangent_bases(state)
    blocks = project_blocks(build_stage2_blocks(problem, state), bases)
    return assemble(blocks, lam, BOTH), problem, state


def dense_uwv(system):
    """Dense U, W, V straight from the stored blocks (no apply operators)."""
    d, e = system.pose_width, system.lm_width
    n_p, n_l = system.n_cameras, system.n_landmarks
    u = np.zeros((n_p * d, n_p * d))
    for i in range(n_p):
        u[i * d:(i + 1) * d, i * d:(i + 1) * d] = system.u_blocks[i]
    v = np.zeros((n_l * e, n_l * e))
    for j in range(n_l):
        v[j * e:(j + 1) * e, j * e:(j + 1) * e] = system.v_blocks[j]
    w = np.zeros((n_p * d, n_l * e))
    for g, wb in zip(system.groups, system.w_blocks):
        for gi, lm in enumerate(g.lm_ids):
            for ki, cam in enumerate(g.cams[gi]):
                w[cam * d:(cam + 1) * d, lm * e:(lm + 1) * e] += wb[gi, ki]
    return u, w, v


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
