import json

import numpy as np
import pytest

from synfb.backstepping import (
    AffineControlSystem,
    DampingSpec,
    JacobianProvider,
    SmoothingDecomposition,
    as_plant,
    backstep_type1,
    backstep_type2,
    backstep_unready,
    build_lipschitz_rho,
    LipschitzRho,
    choose_gamma_for_logic,
    damping_audit,
    default_damping,
    extend_affine,
    lift_gap,
    lyap_rate,
    provenance_json,
    smooth_intermediate_system,
    smooth_logic_controller,
)
from synfb.hybrid_core import BlockSpec, ManifoldDescriptor, ModeSet, simulate
from synfb.slff import (
    Attractor,
    GapFunction,
    SlffPair,
    candidate_check,
    check_gradient,
    mu_v,
    sample_critical_set,
    synthesize_controller,
)

TARGETS = {1: 1.0, 2: -1.0}


def line_system():
    """Scalar integrator ż = ω over two modes."""
    return AffineControlSystem(
        phi0=lambda q, x: np.zeros(1),
        psi0=lambda q, x: np.eye(1),
        domain_X0=lambda q, x: True,
        manifold=ManifoldDescriptor([BlockSpec("z", 1)]),
        input_dim=1)


def line_pair(kappa=None, pure=True, weak=False):
    """V0(q,z) = (z - r_q)^2 with feedback kappa (default -2 (z - r_q))."""
    if kappa is None:
        kappa = lambda q, x: np.array([-2.0 * (x[0] - TARGETS[q])])
    return SlffPair(
        modes=ModeSet([1, 2]),
        V=lambda q, x: float((x[0] - TARGETS[q]) ** 2),
        gradV=lambda q, x: np.array([2.0 * (x[0] - TARGETS[q])]),
        kappa=kappa,
        domain_X=lambda q, x: True,
        flow_effective_Y=lambda q, x: True,
        attractor_A=Attractor.from_dist(lambda q, x: abs(x[0] - TARGETS[q])),
        manifold=ManifoldDescriptor([BlockSpec("z", 1)]),
        weak=weak, pure=pure,
        psi=lambda q, x: np.eye(1),
        box_bounds={"z": (-3.0, 3.0)})


def line_decomposition():
    """kappa0 = -2 z + 2 varsigma0(q), varsigma0(q) = r_q."""
    return SmoothingDecomposition(
        beta0=lambda x: np.array([-2.0 * x[0]]),
        vartheta0=lambda x: np.array([[2.0]]),
        varsigma0=lambda q: np.array([TARGETS[q]]),
        r=1)


def rand_states(rng, n, dim, lo=-3.0, hi=3.0):
    for _ in range(n):
        yield int(rng.integers(1, 3)), rng.uniform(lo, hi, size=dim)


# ---------------------------------------------------------------------------
# damping specs


def test_damping_spec_validates_gamma():
    with pytest.raises(ValueError):
        DampingSpec(Gamma=np.array([[1.0, 2.0]]))
    with pytest.raises(ValueError):
        DampingSpec(Gamma=np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        DampingSpec(Gamma=np.array([[1.0, 0.0], [0.0, -1.0]]))


def test_default_damping_audit_is_tight():
    G = np.diag([1.5, 0.25, 2.0])
    damp = default_damping(G, k_d=2.0)
    worst = damping_audit(damp, 3, n_samples=3000)
    assert worst <= 1e-12
    with pytest.raises(ValueError):
        default_damping(G, k_d=0.0)


def test_damping_audit_catches_sign_error():
    G = np.eye(2)
    bad = DampingSpec(Gamma=G, Theta=lambda v: +np.asarray(v, float),
                      theta=lambda s: s * s)
    assert damping_audit(bad, 2, n_samples=500) > 0.0
    with pytest.raises(ValueError):
        damping_audit(DampingSpec(Gamma=G), 2)


# ---------------------------------------------------------------------------
# lipschitz rescaling profile


def test_lipschitz_rho_profile_knots():
    lr = build_lipschitz_rho(np.eye(1), L=1.0)
    # identity segment, then sqrt: rho(2)/rho(1) = 2, rho(8)/rho(1) = 4
    assert lr.rho(0.5) == pytest.approx(0.5 * lr.rho(1.0))
    assert lr.rho(2.0) == pytest.approx(2.0 * lr.rho(1.0))
    assert lr.rho(8.0) == pytest.approx(4.0 * lr.rho(1.0))
    assert lr.L == 1.0


def test_lipschitz_rho_is_smooth_and_increasing():
    lr = build_lipschitz_rho(2.0 * np.eye(2), L=1.5)
    s_grid = np.linspace(1e-6, 10.0, 400)
    vals = [lr.rho(s) for s in s_grid]
    assert all(b > a for a, b in zip(vals, vals[1:]))
    # derivative continuity across the bridge seams
    for seam in (1.0, 2.0):
        assert lr.rho_prime(seam - 1e-9) == pytest.approx(
            lr.rho_prime(seam + 1e-9), abs=1e-6)
    # derivative matches finite differences
    for s in (0.3, 1.4, 3.7):
        fd = (lr.rho(s + 1e-6) - lr.rho(s - 1e-6)) / 2e-6
        assert lr.rho_prime(s) == pytest.approx(fd, rel=1e-5)


def test_lipschitz_rho_composition_is_lipschitz():
    G = np.diag([0.4, 3.0])
    lr = build_lipschitz_rho(G, L=1.0)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(2000):
        v1 = rng.uniform(-6, 6, size=2)
        v2 = rng.uniform(-6, 6, size=2)
        num = abs(lr.rho(float(v1 @ G @ v1)) - lr.rho(float(v2 @ G @ v2)))
        den = float(np.linalg.norm(v1 - v2))
        if den > 1e-12:
            worst = max(worst, num / den)
    assert worst <= lr.L


def test_lipschitz_rho_rejects_bad_constant():
    with pytest.raises(ValueError):
        build_lipschitz_rho(np.eye(1), L=0.0)


# ---------------------------------------------------------------------------
# extension plumbing


def test_extend_affine_stacks_an_integrator():
    sys0 = line_system()
    ext = extend_affine(sys0)
    assert [b.name for b in ext.manifold.blocks] == ["z", "omega"]
    x = np.array([0.7, -1.3])
    u = np.array([2.0])
    got = ext.f(1, x, u)
    assert got[0] == pytest.approx(-1.3)  # ż = ω
    assert got[1] == pytest.approx(2.0)   # ω̇ = u


def test_extend_affine_rejects_existing_block_name():
    sys0 = line_system()
    with pytest.raises(ValueError):
        extend_affine(extend_affine(sys0))


def test_lift_gap_reads_base_prefix():
    gap = GapFunction(delta=lambda q, x: float(x[0]), epsilon_margin=0.25)
    lifted = lift_gap(gap, base_dim=1)
    assert lifted.delta(1, np.array([0.5, 99.0])) == 0.5
    assert lifted.epsilon_margin == 0.25


def test_as_plant_matches_system_flow():
    sys0 = line_system()
    f = as_plant(sys0)
    assert f(1, np.array([0.3]), np.array([2.0]))[0] == pytest.approx(2.0)


# ---------------------------------------------------------------------------
# type 1 backstepping


def jac_const(value):
    return JacobianProvider(Dkappa0=lambda q, x: np.array([[value]]))


def test_backstep_type1_lyapunov_identity():
    pair0 = line_pair()
    sys0 = line_system()
    damp = default_damping(np.array([[1.5]]), k_d=2.0)
    pair1 = backstep_type1(pair0, sys0, damp, jac_const(-2.0),
                           GapFunction.constant(1.0))
    ext = extend_affine(sys0)
    G = damp.Gamma
    rng = np.random.default_rng(1)
    worst = 0.0
    for q, x in rand_states(rng, 300, 2, -5.0, 5.0):
        v = x[1:] - pair0.kappa(q, x[:1])
        base = lyap_rate(pair0, sys0, q, x[:1])
        full = lyap_rate(pair1, ext, q, x)
        extra = 2.0 * float(v @ G @ damp.Theta(v))
        worst = max(worst, abs(full - base - extra))
    assert worst <= 1e-9


def test_backstep_type1_rate_dominates_damping_certificate():
    pair0 = line_pair()
    sys0 = line_system()
    damp = default_damping(np.array([[1.5]]), k_d=2.0)
    pair1 = backstep_type1(pair0, sys0, damp, jac_const(-2.0),
                           GapFunction.constant(1.0))
    ext = extend_affine(sys0)
    rng = np.random.default_rng(2)
    for q, x in rand_states(rng, 300, 2, -5.0, 5.0):
        v = x[1:] - pair0.kappa(q, x[:1])
        base = lyap_rate(pair0, sys0, q, x[:1])
        assert lyap_rate(pair1, ext, q, x) <= \
            base - damp.theta(float(np.linalg.norm(v))) + 1e-9


def test_backstep_type1_value_and_gradient_shape():
    pair0 = line_pair()
    sys0 = line_system()
    damp = default_damping(np.array([[1.5]]), k_d=1.0)
    pair1 = backstep_type1(pair0, sys0, damp, jac_const(-2.0),
                           GapFunction.constant(1.0))
    x = np.array([0.4, 1.1])
    v = 1.1 - (-2.0 * (0.4 - 1.0))
    assert pair1.V(1, x) == pytest.approx((0.4 - 1.0) ** 2 + 1.5 * v * v)
    assert check_gradient(pair1, n_samples=60, seed=3).ok
    assert pair1.provenance["construction"] == "backstep_type1"
    json.loads(provenance_json(pair1))


def test_backstep_type1_extended_attractor_and_candidate_audit():
    pair0 = line_pair()
    sys0 = line_system()
    damp = default_damping(np.array([[1.5]]), k_d=1.0)
    pair1 = backstep_type1(pair0, sys0, damp, None, GapFunction.constant(1.0))
    on = np.array([1.0, 0.0])  # z = r_1, omega = kappa0 = 0
    assert pair1.attractor_A.dist(1, on) == 0.0
    assert pair1.attractor_A.contains(1, on)
    assert pair1.attractor_A.dist(1, np.array([1.0, 0.5])) == pytest.approx(0.5)
    rep = candidate_check(pair1, as_plant(extend_affine(sys0)),
                          n_samples=300, seed=5)
    assert rep.passed


def test_backstep_type1_validates_inputs():
    pair0 = line_pair()
    sys0 = line_system()
    with pytest.raises(ValueError):
        backstep_type1(line_pair(pure=False), sys0,
                       default_damping(np.eye(1)), None,
                       GapFunction.constant(1.0))
    with pytest.raises(ValueError):
        backstep_type1(pair0, sys0, default_damping(np.eye(2)), None,
                       GapFunction.constant(1.0))
    with pytest.raises(ValueError):
        backstep_type1(pair0, sys0, DampingSpec(Gamma=np.eye(1)), None,
                       GapFunction.constant(1.0))


# ---------------------------------------------------------------------------
# type 2 backstepping


def test_backstep_type2_matches_type1_under_linear_rho():
    # constant per-mode feedback: zero Jacobian, the two constructions align
    pair0 = line_pair(kappa=lambda q, x: np.array([TARGETS[q]]))
    sys0 = line_system()
    damp = default_damping(np.array([[1.5]]), k_d=2.0)
    c = 0.4
    linear = LipschitzRho(rho=lambda s: c * s, rho_prime=lambda s: c, L=1.0)
    p1 = backstep_type1(pair0, sys0, damp, jac_const(0.0),
                        GapFunction.constant(1.0))
    p2 = backstep_type2(pair0, sys0, damp, jac_const(0.0), linear,
                        GapFunction.constant(1.0))
    rng = np.random.default_rng(6)
    for q, x in rand_states(rng, 200, 2, -5.0, 5.0):
        assert c * np.asarray(p2.kappa(q, x)) == pytest.approx(
            np.asarray(p1.kappa(q, x)), abs=1e-12)
        v = x[1] - TARGETS[q]
        assert p2.V(q, x) == pytest.approx(
            pair0.V(q, x[:1]) + c * 1.5 * v * v)


def test_backstep_type2_lyapunov_identity_with_profile_rho():
    pair0 = line_pair()
    sys0 = line_system()
    damp = default_damping(np.array([[1.5]]), k_d=2.0)
    rho = build_lipschitz_rho(damp.Gamma, L=1.0)
    pair1 = backstep_type2(pair0, sys0, damp, jac_const(-2.0), rho,
                           GapFunction.constant(1.0))
    ext = extend_affine(sys0)
    G = damp.Gamma
    rng = np.random.default_rng(7)
    worst = 0.0
    for q, x in rand_states(rng, 300, 2, -5.0, 5.0):
        v = x[1:] - pair0.kappa(q, x[:1])
        base = lyap_rate(pair0, sys0, q, x[:1])
        full = lyap_rate(pair1, ext, q, x)
        extra = 2.0 * float(v @ G @ damp.Theta(v))
        worst = max(worst, abs(full - base - extra))
    assert worst <= 1e-8
    assert check_gradient(pair1, n_samples=60, seed=8).ok


def test_backstep_type2_keeps_partial_effective_set():
    pair0 = line_pair(pure=False)
    sys0 = line_system()
    damp = default_damping(np.eye(1))
    rho = build_lipschitz_rho(damp.Gamma, L=1.0)
    pair1 = backstep_type2(pair0, sys0, damp, None, rho,
                           GapFunction.constant(1.0))
    assert not pair1.pure
    assert pair1.provenance["construction"] == "backstep_type2"
    assert pair1.provenance["L"] == 1.0


# ---------------------------------------------------------------------------
# logic smoothing


def test_choose_gamma_for_logic_widest_pair_bound():
    eps = 0.3
    varsigma0 = lambda q: np.eye(2)[q - 1]
    damp = choose_gamma_for_logic(varsigma0, [1, 2], eps)
    assert np.allclose(damp.Gamma, (eps / 4.0) * np.eye(2))
    dv = varsigma0(1) - varsigma0(2)
    assert float(dv @ damp.Gamma @ dv) == pytest.approx(eps / 2.0)


def test_choose_gamma_for_logic_degenerate_cases():
    ident = choose_gamma_for_logic(lambda q: np.array([3.0]), [1, 2], 0.5)
    assert np.array_equal(ident.Gamma, np.eye(1))
    with pytest.raises(ValueError):
        choose_gamma_for_logic(lambda q: np.array([1.0]), [1, 2], 0.0)


def smoothing_setup(eps=0.4, k_p=2.0):
    pair0 = line_pair()
    sys0 = line_system()
    decomp = line_decomposition()
    gsp = choose_gamma_for_logic(decomp.varsigma0, [1, 2], eps)
    damp_p = default_damping(gsp.Gamma, k_d=k_p)
    return pair0, sys0, decomp, damp_p, eps


def test_smoothed_feedback_drops_mode_dependence():
    pair0, sys0, decomp, damp_p, eps = smoothing_setup()
    pair1, vs1 = smooth_logic_controller(pair0, sys0, decomp, eps, damp_p)
    rng = np.random.default_rng(9)
    for _, x in rand_states(rng, 100, 2):
        k1 = pair1.kappa(1, x)
        k2 = pair1.kappa(2, x)
        assert np.array_equal(k1, k2)
        # at p = varsigma0(q) the smoothed input reproduces kappa0
        xq = np.array([x[0], TARGETS[1]])
        assert pair1.kappa(1, xq)[0] == pytest.approx(
            pair0.kappa(1, x[:1])[0], abs=1e-12)


def test_smoothed_value_splits_into_base_plus_tracking():
    pair0, sys0, decomp, damp_p, eps = smoothing_setup()
    pair1, _ = smooth_logic_controller(pair0, sys0, decomp, eps, damp_p)
    Gp = damp_p.Gamma[0, 0]
    x = np.array([0.3, 0.8])
    pt = 0.8 - TARGETS[1]
    assert pair1.V(1, x) == pytest.approx((0.3 - 1.0) ** 2 + Gp * pt * pt)
    assert check_gradient(pair1, n_samples=60, seed=10).ok
    assert pair1.provenance["construction"] == "logic_smoothing"


def test_smoothed_p_drive_matches_hand_formula():
    pair0, sys0, decomp, damp_p, eps = smoothing_setup()
    pair1, vs1 = smooth_logic_controller(pair0, sys0, decomp, eps, damp_p)
    Gp = damp_p.Gamma[0, 0]
    rng = np.random.default_rng(11)
    for q, x in rand_states(rng, 100, 2):
        pt = x[1] - TARGETS[q]
        hand = -2.0 * pt - 0.5 / Gp * 2.0 * 2.0 * (x[0] - TARGETS[q])
        assert vs1(q, x)[0] == pytest.approx(hand, abs=1e-12)


def test_smoothed_flow_derivative_telescopes():
    pair0, sys0, decomp, damp_p, eps = smoothing_setup()
    pair1, vs1 = smooth_logic_controller(pair0, sys0, decomp, eps, damp_p)
    sysI = smooth_intermediate_system(sys0, vs1, decomp.r)
    Gp = damp_p.Gamma
    rng = np.random.default_rng(12)
    worst = 0.0
    for q, x in rand_states(rng, 200, 2):
        pt = x[1:] - np.atleast_1d(decomp.varsigma0(q))
        rate = lyap_rate(pair1, sysI, q, x)
        base = lyap_rate(pair0, sys0, q, x[:1])
        extra = 2.0 * float(pt @ Gp @ damp_p.Theta(pt))
        worst = max(worst, abs(rate - base - extra))
    assert worst <= 1e-10


def test_smoothed_mode_switch_fits_epsilon_budget():
    pair0, sys0, decomp, damp_p, eps = smoothing_setup()
    pair1, _ = smooth_logic_controller(pair0, sys0, decomp, eps, damp_p)
    rng = np.random.default_rng(13)
    worst = 0.0
    for q, x in rand_states(rng, 300, 1):
        # with tracking converged (p = varsigma0(q)), switching the logic to
        # any mode g costs at most sigma0 of the output step: eps/2
        xp = np.concatenate([x, decomp.varsigma0(q)])
        for g in (1, 2):
            overshoot = pair1.V(g, xp) - pair0.V(g, x)
            assert overshoot <= 0.5 * eps + 1e-12
            worst = max(worst, overshoot)
    assert worst == pytest.approx(0.5 * eps)  # tight at the widest pair


def test_smooth_logic_controller_validations():
    pair0, sys0, decomp, damp_p, eps = smoothing_setup()
    with pytest.raises(ValueError):
        smooth_logic_controller(pair0, sys0, decomp, -1.0, damp_p)
    with pytest.raises(ValueError):
        smooth_logic_controller(line_pair(weak=True), sys0, decomp, eps, damp_p)
    with pytest.raises(ValueError):
        smooth_logic_controller(pair0, sys0, decomp, eps,
                                DampingSpec(Gamma=damp_p.Gamma))
    # Gamma_p exceeding the epsilon budget
    big = default_damping(np.array([[10.0]]), k_d=1.0)
    with pytest.raises(ValueError):
        smooth_logic_controller(pair0, sys0, decomp, eps, big)
    # decomposition that fails to reconstruct kappa0
    broken = SmoothingDecomposition(
        beta0=lambda x: np.array([0.0]),
        vartheta0=decomp.vartheta0, varsigma0=decomp.varsigma0, r=1)
    with pytest.raises(ValueError):
        smooth_logic_controller(pair0, sys0, broken, eps, damp_p)
    wrong_dim = default_damping(np.eye(2))
    with pytest.raises(ValueError):
        smooth_logic_controller(pair0, sys0, decomp, eps, wrong_dim)


# ---------------------------------------------------------------------------
# the composed pipeline


def unready_setup(pure=True):
    pair0 = line_pair(pure=pure)
    sys0 = line_system()
    decomp = line_decomposition()
    eps = 0.4
    gsp = choose_gamma_for_logic(decomp.varsigma0, [1, 2], eps)
    damp_p = default_damping(gsp.Gamma, k_d=2.0)
    damp_u = default_damping(np.array([[0.5]]), k_d=1.0)
    return pair0, sys0, decomp, eps, damp_p, damp_u


def test_unready_pipeline_shapes_and_provenance():
    pair0, sys0, decomp, eps, damp_p, damp_u = unready_setup()
    pair2 = backstep_unready(pair0, sys0, decomp, eps, damp_p, damp_u)
    assert [b.name for b in pair2.manifold.blocks] == ["z", "p", "omega"]
    assert pair2.provenance["construction"] == "unready_pipeline"
    assert pair2.provenance["stage1"]["construction"] == "logic_smoothing"
    assert not pair2.weak


def test_unready_pipeline_intermediate_input_is_mode_free():
    pair0, sys0, decomp, eps, damp_p, damp_u = unready_setup()
    pair1, _ = smooth_logic_controller(pair0, sys0, decomp, eps, damp_p,
                                       allow_weak=True)
    pair2 = backstep_unready(pair0, sys0, decomp, eps, damp_p, damp_u)
    rng = np.random.default_rng(14)
    final_dep = 0.0
    for _, x in rand_states(rng, 100, 3):
        assert np.array_equal(pair1.kappa(1, x[:2]), pair1.kappa(2, x[:2]))
        final_dep = max(final_dep, float(np.max(np.abs(
            np.asarray(pair2.kappa(1, x)) - np.asarray(pair2.kappa(2, x))))))
    # the outer feedback keeps honest mode dependence through gradV0
    assert final_dep > 0.1


def test_unready_pipeline_criticals_sit_on_the_tracking_manifold():
    pair0, sys0, decomp, eps, damp_p, damp_u = unready_setup()
    pair2 = backstep_unready(pair0, sys0, decomp, eps, damp_p, damp_u)
    pair1, vs1 = smooth_logic_controller(pair0, sys0, decomp, eps, damp_p,
                                         allow_weak=True)
    ext = extend_affine(smooth_intermediate_system(sys0, vs1, decomp.r))
    crits = sample_critical_set(pair2, as_plant(ext), "psi", 40)
    assert crits
    for c in crits:
        q, x = c.point.q, c.point.x
        assert abs(x[1] - TARGETS[q]) <= 1e-5
        assert abs(x[2] - pair1.kappa(q, x[:2])[0]) <= 1e-5


def test_unready_pipeline_closed_loop_converges():
    pair0, sys0, decomp, eps, damp_p, damp_u = unready_setup()
    pair2 = backstep_unready(pair0, sys0, decomp, eps, damp_p, damp_u)
    pair1, vs1 = smooth_logic_controller(pair0, sys0, decomp, eps, damp_p,
                                         allow_weak=True)
    ext = extend_affine(smooth_intermediate_system(sys0, vs1, decomp.r))
    hs = synthesize_controller(pair2, GapFunction.constant(1.0), as_plant(ext))
    x0 = np.array([-0.5, TARGETS[2], 0.0])
    arc = simulate(hs, (2, x0), horizon_t=30.0, horizon_j=4, step=1e-3,
                   stop_dist=1e-2)
    assert arc.termination == "in-attractor"
    V = np.array([pair2.V(q, x) for q, x in zip(arc.qs, arc.xs)])
    flow_legs = np.diff(V)[np.diff(arc.js) == 0]
    assert flow_legs.max() <= 1e-8
    for i in arc.jump_indices:
        assert mu_v(pair2, int(arc.qs[i]), arc.xs[i]) == 0.0


def test_unready_pipeline_nonpure_base_takes_rescaled_branch():
    pair0, sys0, decomp, eps, damp_p, damp_u = unready_setup(pure=False)
    pair2 = backstep_unready(pair0, sys0, decomp, eps, damp_p, damp_u)
    assert pair2.provenance["construction"] == "unready_pipeline"
    assert "L" in pair2.provenance  # rescaled second stage
    assert check_gradient(pair2, n_samples=40, seed=15).ok


def test_provenance_json_requires_a_record():
    with pytest.raises(ValueError):
        provenance_json(line_pair())
