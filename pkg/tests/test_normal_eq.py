import numpy as np
import pytest

from stratba.normal_eq import (
    BOTH,
    POSE_ONLY,
    BlockGroup,
    LandmarkBlockStore,
    apply_schur,
    assemble,
    back_substitute,
    build_stage1_blocks,
    dense_schur,
    schur_diag_blocks,
    schur_rhs,
)
from stratba.objective import STAGE1, PoseConfig
from tests.conftest import (
    dense_damped_hessian,
    dense_jacobian,
    make_random_problem,
    make_random_state,
    make_varpro_system,
)


def single_observation_store(jp, jl, res, n_cameras=1, n_landmarks=1, cam=0, lm=0):
    group = BlockGroup(
        lm_ids=np.array([lm]),
        cams=np.array([[cam]]),
        pose_jac=jp[None, None],
        lm_jac=jl[None, None],
        residual=res[None, None],
    )
    return LandmarkBlockStore([group], n_cameras, n_landmarks, jp.shape[1], jl.shape[1],
                              jp.shape[0])


def test_assemble_single_observation_direct_products():
    jp = np.zeros((4, 12))
    jp[:4, :4] = np.eye(4)  # identity rows into the first pose columns
    jl = np.zeros((4, 3))
    res = np.array([1.0, 0.0, 0.0, 0.0])
    system = assemble(single_observation_store(jp, jl, res), 0.0, POSE_ONLY)
    expected_u = np.zeros((12, 12))
    expected_u[:4, :4] = np.eye(4)
    np.testing.assert_array_equal(system.u_blocks[0], expected_u)
    np.testing.assert_array_equal(system.v_blocks[0], np.zeros((3, 3)))
    np.testing.assert_array_equal(system.w_blocks[0][0, 0], np.zeros((12, 3)))
    expected_bp = np.zeros(12)
    expected_bp[0] = 1.0
    np.testing.assert_array_equal(system.b_p[0], expected_bp)
    np.testing.assert_array_equal(system.b_l[0], np.zeros(3))


def test_damping_doubles_only_diagonal(rng):
    problem = make_random_problem(3, 5, seed=1)
    state = make_random_state(problem, 2, STAGE1)
    blocks = build_stage1_blocks(problem, state, PoseConfig(0.1))
    s1 = assemble(blocks, 0.5, POSE_ONLY)
    s2 = assemble(blocks, 1.0, POSE_ONLY)
    diff = s2.u_blocks - s1.u_blocks
    off_diag = diff - np.eye(12) * np.einsum("nii->ni", diff)[:, :, None] * 0
    for n in range(len(diff)):
        d = np.diag(np.diag(diff[n]))
        np.testing.assert_allclose(diff[n], d, atol=1e-12)
    # diagonal increment equals 0.5 * diag(Jp^T Jp) when inside the clamp range
    s0 = assemble(blocks, 0.0, POSE_ONLY)
    base_diag = np.einsum("nii->ni", s0.u_blocks)
    clamped = np.clip(np.sqrt(base_diag), 1e-6, 1e6) ** 2
    np.testing.assert_allclose(np.einsum("nii->ni", diff), 0.5 * clamped, rtol=1e-12)
    np.testing.assert_array_equal(s1.v_blocks, s2.v_blocks)


@pytest.mark.parametrize("mode", [POSE_ONLY, BOTH])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_assemble_matches_dense_oracle(mode, seed):
    problem = make_random_problem(3, 5, seed=seed)
    state = make_random_state(problem, seed + 50, STAGE1)
    lam = 0.37
    blocks = build_stage1_blocks(problem, state, PoseConfig(0.1))
    system = assemble(blocks, lam, mode)

    jac, res, d_p, d_l = dense_jacobian(problem, state, STAGE1, eta=0.1)
    h, g = dense_damped_hessian(jac, res, problem.num_cameras, d_p, lam, mode)
    pc = problem.num_cameras * d_p
    for i in range(problem.num_cameras):
        np.testing.assert_allclose(system.u_blocks[i],
                                   h[i * d_p:(i + 1) * d_p, i * d_p:(i + 1) * d_p],
                                   atol=1e-12 * max(1, np.abs(h).max()))
        np.testing.assert_allclose(system.b_p[i], g[i * d_p:(i + 1) * d_p],
                                   atol=1e-12 * max(1, np.abs(g).max()))
    for j in range(problem.num_landmarks):
        np.testing.assert_allclose(system.v_blocks[j],
                                   h[pc + j * d_l:pc + (j + 1) * d_l,
                                     pc + j * d_l:pc + (j + 1) * d_l],
                                   atol=1e-12 * max(1, np.abs(h).max()))
        np.testing.assert_allclose(system.b_l[j], g[pc + j * d_l:pc + (j + 1) * d_l],
                                   atol=1e-12 * max(1, np.abs(g).max()))
    # coupling blocks
    for group, w in zip(system.groups, system.w_blocks):
        for g_idx, lm in enumerate(group.lm_ids):
            for k_idx, cam in enumerate(group.cams[g_idx]):
                expected = h[cam * d_p:(cam + 1) * d_p, pc + lm * d_l:pc + (lm + 1) * d_l]
                np.testing.assert_allclose(w[g_idx, k_idx], expected,
                                           atol=1e-12 * max(1, np.abs(h).max()))


def dense_blocks_from_oracle(problem, state, lam, mode, eta=0.1):
    """U, V, W, b as dense matrices straight from the stacked Jacobian."""
    jac, res, d_p, d_l = dense_jacobian(problem, state, STAGE1, eta)
    h, g = dense_damped_hessian(jac, res, problem.num_cameras, d_p, lam, mode)
    pc = problem.num_cameras * d_p
    u = h[:pc, :pc]
    v = h[pc:, pc:]
    w = h[:pc, pc:]
    return u, v, w, g[:pc], g[pc:]


@pytest.mark.parametrize("seed", [3, 4])
def test_schur_rhs_apply_backsub_match_dense(seed):
    system, problem, state = make_varpro_system(4, 8, seed, lam=0.21)
    u, v, w, b_p, b_l = dense_blocks_from_oracle(problem, state, 0.21, POSE_ONLY)
    v_inv = np.linalg.inv(v)
    rhs_expected = -(b_p - w @ v_inv @ b_l)
    np.testing.assert_allclose(schur_rhs(system), rhs_expected,
                               atol=1e-11 * max(1, np.abs(rhs_expected).max()))
    s_dense = u - w @ v_inv @ w.T
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(system.pose_dim)
    np.testing.assert_allclose(apply_schur(system, x), s_dense @ x,
                               atol=1e-11 * max(1, np.abs(s_dense @ x).max()))
    np.testing.assert_allclose(dense_schur(system), s_dense,
                               atol=1e-11 * max(1, np.abs(s_dense).max()))
    # back substitution solves the second block row
    dx_p = rng.standard_normal(system.pose_dim)
    dx_l = back_substitute(system, dx_p)
    residual = w.T @ dx_p + v @ dx_l + b_l
    assert np.linalg.norm(residual) <= 1e-8 * max(1, np.linalg.norm(b_l))


def test_full_normal_equations_satisfied_on_small_instance():
    system, problem, state = make_varpro_system(3, 6, seed=10, lam=0.11)
    u, v, w, b_p, b_l = dense_blocks_from_oracle(problem, state, 0.11, POSE_ONLY)
    h = np.block([[u, w], [w.T, v]])
    g = np.concatenate([b_p, b_l])
    sol = np.linalg.solve(h, -g)
    s_dense = dense_schur(system)
    dx_p = np.linalg.solve(s_dense, schur_rhs(system))
    dx_l = back_substitute(system, dx_p)
    stacked = np.concatenate([dx_p, dx_l])
    assert np.linalg.norm(stacked - sol) <= 1e-8 * max(1, np.linalg.norm(sol))


def test_schur_rhs_trivial_cases():
    jp = np.zeros((4, 12))
    jp[0, 0] = 1.0
    res = np.array([2.0, 0, 0, 0])
    # W = 0 since Jl = 0
    system = assemble(single_observation_store(jp, np.zeros((4, 3)), res), 0.0, POSE_ONLY)
    np.testing.assert_array_equal(schur_rhs(system), -system.b_p.ravel())
    x = np.arange(12.0)
    np.testing.assert_allclose(apply_schur(system, x),
                               np.einsum("ij,j->i", system.u_blocks[0], x), atol=1e-14)
    np.testing.assert_allclose(apply_schur(system, np.zeros(12)), 0.0, atol=0)
    np.testing.assert_array_equal(back_substitute(system, np.zeros(12)), np.zeros(3))


def test_schur_rhs_zero_landmark_gradient():
    # W nonzero but b_l = 0: the reduction leaves -b_p untouched
    system, _, _ = make_varpro_system(3, 6, seed=14, lam=0.2)
    system.b_l[...] = 0.0
    np.testing.assert_allclose(schur_rhs(system), -system.b_p.ravel(), atol=1e-14)


def test_back_substitute_decoupled_nonzero_gradient(rng):
    # J_p = 0 rows: W = 0 and the landmark update is -V^{-1} b_l exactly
    jl = rng.standard_normal((4, 3))
    res = rng.standard_normal(4)
    system = assemble(single_observation_store(np.zeros((4, 12)), jl, res), 0.0, POSE_ONLY)
    upd = back_substitute(system, np.zeros(12))
    expected = -np.linalg.solve(jl.T @ jl, jl.T @ res)
    np.testing.assert_allclose(upd, expected, atol=1e-10)


def test_apply_schur_linearity():
    system, _, _ = make_varpro_system(4, 10, seed=6, lam=1e-3)
    rng = np.random.default_rng(0)
    x = rng.standard_normal(system.pose_dim)
    y = rng.standard_normal(system.pose_dim)
    lhs = apply_schur(system, x + y)
    rhs = apply_schur(system, x) + apply_schur(system, y)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12 * max(1, np.abs(rhs).max()))


def test_v_blocks_positive_semidefinite():
    for seed in range(5):
        system, _, _ = make_varpro_system(5, 12, seed=seed, lam=1e-4)
        eigs = np.linalg.eigvalsh(system.v_blocks)
        assert eigs.min() >= -1e-10
        assert (np.linalg.eigvalsh(system.u_blocks) > 0).all()


def test_v_blocks_positive_definite_in_both_mode():
    problem = make_random_problem(4, 6, seed=2)
    state = make_random_state(problem, 3, STAGE1)
    blocks = build_stage1_blocks(problem, state, PoseConfig(0.1))
    system = assemble(blocks, 0.5, BOTH)
    assert (np.linalg.eigvalsh(system.v_blocks) > 0).all()


def test_blocks_reference_strictly_increasing_cameras():
    problem = make_random_problem(6, 9, seed=4)
    state = make_random_state(problem, 5, STAGE1)
    blocks = build_stage1_blocks(problem, state, PoseConfig(0.1))
    for g in blocks.groups:
        assert (np.diff(g.cams, axis=1) > 0).all()


def test_schur_diag_matches_dense():
    system, _, _ = make_varpro_system(4, 9, seed=12, lam=0.05)
    s_dense = dense_schur(system)
    d = system.pose_width
    diag = schur_diag_blocks(system)
    for i in range(system.n_cameras):
        np.testing.assert_allclose(diag[i], s_dense[i * d:(i + 1) * d, i * d:(i + 1) * d],
                                   atol=1e-11 * max(1, np.abs(s_dense).max()))


def test_degenerate_v_block_zero_update():
    # landmark block with Jl = 0 is singular: pinv contributes nothing and the
    # back-substituted update is exactly zero
    jp = np.zeros((4, 12))
    jp[0, 0] = 3.0
    res = np.ones(4)
    system = assemble(single_observation_store(jp, np.zeros((4, 3)), res), 1e-4, POSE_ONLY)
    assert system.v_degenerate[0]
    upd = back_substitute(system, np.ones(12))
    np.testing.assert_array_equal(upd, np.zeros(3))
