"""Block-sparse damped normal equations and their Schur reduction.

Landmark blocks stack, per landmark and per observation row group,
[pose Jacobian | landmark Jacobian | residual]; groups are keyed by the
number of observing cameras so all per-landmark work is batched. The pose
Hessian blocks are damped with Jacobi scaling; the landmark blocks are damped
only in ``both`` mode (joint / tangent-space optimization), never in
``pose_only`` mode (eliminated-landmark optimization).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .bal_io import BaProblem, ProjectiveState
from .objective import (
    PoseConfig,
    landmark_order,
    stage1_jacobians,
    stage1_residuals,
    stage2_jacobians,
    stage2_residuals,
)

logger = logging.getLogger(__name__)

POSE_ONLY = "pose_only"
BOTH = "both"

# Jacobi damping diagonals are clamped to this range before squaring.
DAMPING_CLAMP = (1e-6, 1e6)
# Relative eigenvalue cutoff for landmark-block pseudo-inverses.
V_PINV_TOL = 1e-10


@dataclass
class BlockGroup:
    """All landmark blocks that share an observation count ``k``."""

    lm_ids: np.ndarray  # (g,)
    cams: np.ndarray  # (g, k) strictly increasing per row
    pose_jac: np.ndarray  # (g, k, r, d_p)
    lm_jac: np.ndarray  # (g, k, r, d_l)
    residual: np.ndarray  # (g, k, r)


@dataclass
class LandmarkBlockStore:
    """Per-landmark dense stacked Jacobian/residual blocks."""

    groups: list[BlockGroup]
    n_cameras: int
    n_landmarks: int
    pose_width: int
    lm_width: int
    rows_per_obs: int


def build_stage1_blocks(problem: BaProblem, state: ProjectiveState,
                        config: PoseConfig | None = None) -> LandmarkBlockStore:
    """Linearize the stage-1 objective into landmark blocks (widths 12/3)."""
    eta = (config or PoseConfig()).eta
    order, ids, counts = landmark_order(problem)
    cams_obs = state.cameras[problem.camera_indices[order]]
    lms_obs = state.landmarks[problem.landmark_indices[order]]
    meas_obs = problem.measurements[order]
    jp, jl = stage1_jacobians(cams_obs, lms_obs, meas_obs, eta)
    res = stage1_residuals(cams_obs, lms_obs, meas_obs, eta)
    return _group_blocks(problem, order, ids, counts, jp, jl, res, 12, 3, 4)


def build_stage2_blocks(problem: BaProblem, state: ProjectiveState) -> LandmarkBlockStore:
    """Linearize the stage-2 objective into unprojected blocks (widths 12/4).

    Degenerate observations (depth within the guard) must be excluded by the
    caller rejecting the state; here they would poison the step, so we raise.
    """
    order, ids, counts = landmark_order(problem)
    cams_obs = state.cameras[problem.camera_indices[order]]
    lms_obs = state.landmarks[problem.landmark_indices[order]]
    meas_obs = problem.measurements[order]
    jp, jl, valid = stage2_jacobians(cams_obs, lms_obs, meas_obs)
    if not valid.all():
        raise FloatingPointError("degenerate projection while linearizing stage 2")
    res, _ = stage2_residuals(cams_obs, lms_obs, meas_obs)
    return _group_blocks(problem, order, ids, counts, jp, jl, res, 12, 4, 2)


def _group_blocks(problem, order, ids, counts, jp, jl, res, d_p, d_l, r) -> LandmarkBlockStore:
    cam_sorted = problem.camera_indices[order]
    offsets = np.concatenate([[0], np.cumsum(counts)])
    groups = []
    for k in np.unique(counts):
        sel = np.nonzero(counts == k)[0]
        row_idx = offsets[sel][:, None] + np.arange(k)[None, :]
        groups.append(BlockGroup(
            lm_ids=ids[sel],
            cams=cam_sorted[row_idx],
            pose_jac=jp[row_idx],
            lm_jac=jl[row_idx],
            residual=res[row_idx],
        ))
    return LandmarkBlockStore(groups, problem.num_cameras, problem.num_landmarks, d_p, d_l, r)


@dataclass
class SchurSystem:
    """Damped block normal equations plus cached landmark-block inverses."""

    u_blocks: np.ndarray  # (n_p, d_p, d_p) damped
    v_blocks: np.ndarray  # (n_l, d_l, d_l) damped only in BOTH mode
    v_inv: np.ndarray  # (n_l, d_l, d_l) pseudo-inverses
    v_degenerate: np.ndarray  # (n_l,) bool
    groups: list[BlockGroup]  # carries the coupling blocks W per (camera, landmark)
    w_blocks: list[np.ndarray]  # per group (g, k, d_p, d_l)
    b_p: np.ndarray  # (n_p, d_p)
    b_l: np.ndarray  # (n_l, d_l)
    lam: float
    damping_mode: str

    @property
    def n_cameras(self) -> int:
        return len(self.u_blocks)

    @property
    def n_landmarks(self) -> int:
        return len(self.v_blocks)

    @property
    def pose_width(self) -> int:
        return self.u_blocks.shape[1]

    @property
    def lm_width(self) -> int:
        return self.v_blocks.shape[1]

    @property
    def pose_dim(self) -> int:
        return self.u_blocks.shape[0] * self.u_blocks.shape[1]


def _pinv_psd(blocks: np.ndarray, rel_tol: float) -> tuple[np.ndarray, np.ndarray]:
    """Pseudo-inverse of symmetric PSD blocks; eigenvalues below rel_tol*trace drop."""
    w, q = np.linalg.eigh(blocks)
    trace = np.trace(blocks, axis1=1, axis2=2)
    tol = rel_tol * np.maximum(trace, 0.0)
    ok = w > tol[:, None]
    inv_w = np.where(ok, 1.0 / np.where(ok, w, 1.0), 0.0)
    pinv = np.einsum("nij,nj,nkj->nik", q, inv_w, q)
    return pinv, ~ok.all(axis=1)


def assemble(blocks: LandmarkBlockStore, lam: float, damping_mode: str = POSE_ONLY
             ) -> SchurSystem:
    """Form damped U/V/W blocks and gradients from landmark blocks.

    U = Jp^T Jp + lam * Dp^T Dp with Jacobi Dp (clamped); V = Jl^T Jl, plus the
    analogous landmark damping in ``both`` mode; W = Jp^T Jl; b = J^T r.
    """
    if lam < 0:
        raise ValueError("damping must be non-negative")
    if damping_mode not in (POSE_ONLY, BOTH):
        raise ValueError(f"unknown damping mode {damping_mode!r}")
    d_p, d_l = blocks.pose_width, blocks.lm_width
    u = np.zeros((blocks.n_cameras, d_p, d_p))
    v = np.zeros((blocks.n_landmarks, d_l, d_l))
    b_p = np.zeros((blocks.n_cameras, d_p))
    b_l = np.zeros((blocks.n_landmarks, d_l))
    w_blocks = []
    for g in blocks.groups:
        u_contrib = np.einsum("gkri,gkrj->gkij", g.pose_jac, g.pose_jac)
        np.add.at(u, g.cams.ravel(), u_contrib.reshape(-1, d_p, d_p))
        v[g.lm_ids] += np.einsum("gkri,gkrj->gij", g.lm_jac, g.lm_jac)
        w_blocks.append(np.einsum("gkri,gkrj->gkij", g.pose_jac, g.lm_jac))
        np.add.at(b_p, g.cams.ravel(),
                  np.einsum("gkri,gkr->gki", g.pose_jac, g.residual).reshape(-1, d_p))
        b_l[g.lm_ids] += np.einsum("gkri,gkr->gi", g.lm_jac, g.residual)

    diag_u = np.einsum("nii->ni", u)
    d_sq = np.clip(np.sqrt(diag_u), *DAMPING_CLAMP) ** 2
    u_damped = u.copy()
    np.einsum("nii->ni", u_damped)[...] += lam * d_sq
    if damping_mode == BOTH:
        diag_v = np.einsum("nii->ni", v)
        dl_sq = np.clip(np.sqrt(diag_v), *DAMPING_CLAMP) ** 2
        v_damped = v.copy()
        np.einsum("nii->ni", v_damped)[...] += lam * dl_sq
    else:
        v_damped = v

    v_inv, degenerate = _pinv_psd(v_damped, V_PINV_TOL)
    if degenerate.any():
        logger.debug("%d landmark blocks are singular at tolerance", int(degenerate.sum()))
    return SchurSystem(u_damped, v_damped, v_inv, degenerate, blocks.groups, w_blocks,
                       b_p, b_l, lam, damping_mode)


# ---------------------------------------------------------------------------
# matrix-free reduced-system operations


def _coupling_apply_vinv_wt(system: SchurSystem, x_blocks: np.ndarray) -> np.ndarray:
    """Per-landmark t = V^{-1} W^T x, gathered over each landmark's cameras."""
    t = np.zeros((system.n_landmarks, system.lm_width))
    for g, w in zip(system.groups, system.w_blocks):
        s = np.einsum("gkij,gki->gj", w, x_blocks[g.cams])
        t[g.lm_ids] += s
    return np.einsum("nij,nj->ni", system.v_inv, t)


def _scatter_w(system: SchurSystem, t: np.ndarray, out: np.ndarray) -> None:
    """out += W t accumulated per camera, for per-landmark vectors t."""
    for g, w in zip(system.groups, system.w_blocks):
        contrib = np.einsum("gkij,gj->gki", w, t[g.lm_ids])
        np.add.at(out, g.cams.ravel(), contrib.reshape(-1, system.pose_width))


def schur_rhs(system: SchurSystem) -> np.ndarray:
    """Reduced right-hand side -(b_p - W V^{-1} b_l), flattened to pose dimension."""
    t = np.einsum("nij,nj->ni", system.v_inv, system.b_l)
    acc = np.zeros_like(system.b_p)
    _scatter_w(system, t, acc)
    return -(system.b_p - acc).ravel()


def apply_schur(system: SchurSystem, x: np.ndarray) -> np.ndarray:
    """Matrix-free product (U - W V^{-1} W^T) x in one pass over landmark blocks."""
    xb = x.reshape(system.n_cameras, system.pose_width)
    y = np.einsum("nij,nj->ni", system.u_blocks, xb)
    t = _coupling_apply_vinv_wt(system, xb)
    acc = np.zeros_like(y)
    _scatter_w(system, t, acc)
    return (y - acc).ravel()


def back_substitute(system: SchurSystem, pose_update: np.ndarray) -> np.ndarray:
    """Landmark updates -V^{-1}(b_l + W^T dx_p); degenerate blocks get zero."""
    xb = pose_update.reshape(system.n_cameras, system.pose_width)
    w_t_x = np.zeros((system.n_landmarks, system.lm_width))
    for g, w in zip(system.groups, system.w_blocks):
        w_t_x[g.lm_ids] += np.einsum("gkij,gki->gj", w, xb[g.cams])
    upd = -np.einsum("nij,nj->ni", system.v_inv, system.b_l + w_t_x)
    if system.v_degenerate.any():
        upd[system.v_degenerate] = 0.0
        logger.debug("zeroed updates of %d degenerate landmark blocks",
                     int(system.v_degenerate.sum()))
    return upd.ravel()


def schur_diag_blocks(system: SchurSystem) -> np.ndarray:
    """Exact block diagonal of the reduced system, one block per camera."""
    out = system.u_blocks.copy()
    for g, w in zip(system.groups, system.w_blocks):
        contrib = np.einsum("gkij,gjl,gkml->gkim", w, system.v_inv[g.lm_ids], w)
        np.subtract.at(out, g.cams.ravel(), contrib.reshape(-1, system.pose_width,
                                                            system.pose_width))
    return out


def dense_schur(system: SchurSystem, max_chunk_elems: int = 2 ** 24) -> np.ndarray:
    """Materialize the reduced matrix densely (direct baseline and small oracles)."""
    d = system.pose_width
    n = system.n_cameras
    if (n * d) ** 2 > 64_000_000:
        raise ValueError(f"dense Schur matrix of dimension {n * d} is too large")
    sb = np.zeros((n, n, d, d))
    ii = np.arange(n)
    sb[ii, ii] = system.u_blocks
    flat = sb.reshape(n * n, d, d)
    for g, w in zip(system.groups, system.w_blocks):
        k = g.cams.shape[1]
        # chunk landmarks so the (g, k, k, d, d) intermediate stays bounded
        step = max(1, max_chunk_elems // max(1, k * k * d * d))
        for lo in range(0, len(g.lm_ids), step):
            sl = slice(lo, min(lo + step, len(g.lm_ids)))
            cross = np.einsum("gaij,gjl,gbml->gabim", w[sl], system.v_inv[g.lm_ids[sl]], w[sl])
            cams = g.cams[sl]
            pos = (cams[:, :, None] * n + cams[:, None, :]).ravel()
            np.subtract.at(flat, pos, cross.reshape(-1, d, d))
    return sb.transpose(0, 2, 1, 3).reshape(n * d, n * d)
