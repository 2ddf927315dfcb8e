"""3-D pendulum scenario: dynamics, potential family, certification, control.

The reduced pendulum state is the unit gravity-direction vector z on the
sphere and the body angular rate omega; the input is a torque.  A family of
mode-indexed potentials on the sphere is built by angularly warping a base
potential (rotation angle proportional to the potential itself, about
per-mode axes orthogonal to the upright target), and the synergy constant c
is certified numerically from the family's sampled stall set.  On top of
that sit the mode-switching torque controller and its smoothed variant,
whose applied torque is continuous across mode switches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .hybrid_core import (
    UNCONSTRAINED,
    UNIT_SPHERE,
    BlockSpec,
    HybridArc,
    HybridSystem,
    ManifoldDescriptor,
    ModeSet,
    ProductState,
)
from . import slff
from .backstepping import AffineControlSystem
from .slff import (
    Attractor,
    GapFunction,
    SlffPair,
    b_set_samples,
    fibonacci_sphere,
    sample_critical_set,
    synthesize_controller,
)

DEFAULT_WARP_GAIN = 0.45
DEFAULT_BETA = 0.9
DEFAULT_K_XI = 0.5
DEFAULT_K_P = 2.0


class CertificationError(RuntimeError):
    """The potential family failed synergy certification."""

    def __init__(self, message, witness=None, min_gap=None):
        super().__init__(message)
        self.witness = witness
        self.min_gap = min_gap


@dataclass(frozen=True)
class PendulumParams:
    """Inertia J (SPD, kg m^2), mass (kg), gravity (m/s^2), pivot-to-center
    vector nu (m, nonzero)."""

    J: np.ndarray
    m: float
    g: float
    nu: np.ndarray

    def __post_init__(self):
        J = np.asarray(self.J, dtype=float)
        nu = np.asarray(self.nu, dtype=float)
        if J.shape != (3, 3) or not np.allclose(J, J.T, atol=1e-12):
            raise ValueError("J must be a symmetric 3x3 matrix")
        try:
            np.linalg.cholesky(J)
        except np.linalg.LinAlgError:
            raise ValueError("J must be positive definite")
        if nu.shape != (3,) or np.linalg.norm(nu) == 0.0:
            raise ValueError("nu must be a nonzero 3-vector")
        object.__setattr__(self, "J", J)
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "m", float(self.m))
        object.__setattr__(self, "g", float(self.g))

    @property
    def target(self) -> np.ndarray:
        """The stabilized gravity direction -nu/|nu|."""
        return -self.nu / np.linalg.norm(self.nu)


def default_params() -> PendulumParams:
    return PendulumParams(J=np.diag([0.03, 0.04, 0.05]), m=1.0, g=9.81,
                          nu=np.array([0.0, 0.0, 0.1]))


def default_Xi(k_xi: float = DEFAULT_K_XI) -> np.ndarray:
    return k_xi * np.eye(3)


def hat(v: np.ndarray) -> np.ndarray:
    """Skew matrix of the cross product: hat(v) w = v x w."""
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def pendulum_flow(params: PendulumParams, z: np.ndarray, omega: np.ndarray,
                  tau: np.ndarray):
    """Reduced dynamics: ż = z x omega, J omegȧ = (J omega) x omega
    + m g (nu x z) + tau."""
    z = np.asarray(z, dtype=float)
    omega = np.asarray(omega, dtype=float)
    tau = np.asarray(tau, dtype=float)
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(omega))
            and np.all(np.isfinite(tau))):
        raise ValueError("non-finite input")
    if abs(np.linalg.norm(z) - 1.0) > 1e-9:
        raise ValueError("z must lie on the unit sphere")
    J = params.J
    zdot = np.cross(z, omega)
    omegadot = np.linalg.solve(
        J, np.cross(J @ omega, omega) + params.m * params.g * np.cross(params.nu, z)
        + tau)
    return zdot, omegadot


# ---------------------------------------------------------------------------
# potential family

@dataclass
class CertificationResult:
    c: float
    min_gap: float
    margin_fraction: float
    grid_density: int
    residual_tol: float
    worst_witness: Optional[ProductState]
    criticals: list = field(default_factory=list)

    def to_dict(self) -> dict:
        w = None
        if self.worst_witness is not None:
            w = {"q": int(self.worst_witness.q),
                 "x": [float(v) for v in self.worst_witness.x]}
        return {"c": self.c, "min_gap": self.min_gap,
                "margin_fraction": self.margin_fraction,
                "grid_density": self.grid_density,
                "residual_tol": self.residual_tol,
                "worst_witness": w}


@dataclass
class PotentialFamily:
    """Mode-indexed warped potentials on the sphere.

    The base potential P(y) = k (1 - r'y) vanishes only at the target r.
    Mode q evaluates P after rotating z about the mode's axis (orthogonal to
    r) by angle warp_gain * P(z), so all modes vanish exactly at the target
    while their landscapes elsewhere disagree, which is what gives mode
    switching something to gain.  S lists the central modes and defaults to
    all of them; this family cannot realize a strict subset (every warp dies
    at the target), and certification reports that honestly.
    """

    modes: ModeSet
    S: tuple
    axes: np.ndarray
    warp_gain: float
    k: float
    r: np.ndarray
    certification: Optional[CertificationResult] = None

    def __post_init__(self):
        # float tables for the hot paths: per-mode axis and r x axis
        r = self.r
        tabs = {}
        for i, q in enumerate(self.modes):
            a = self.axes[i]
            ra = np.cross(r, a)
            tabs[q] = (float(a[0]), float(a[1]), float(a[2]),
                       float(ra[0]), float(ra[1]), float(ra[2]))
        self._tabs = tabs
        self._r = (float(r[0]), float(r[1]), float(r[2]))

    def V0(self, q: int, z: np.ndarray) -> float:
        z0, z1, z2 = float(z[0]), float(z[1]), float(z[2])
        r0, r1, r2 = self._r
        _, _, _, ra0, ra1, ra2 = self._tabs[q]
        k = self.k
        u = r0 * z0 + r1 * z1 + r2 * z2
        T = ra0 * z0 + ra1 * z1 + ra2 * z2
        phi = self.warp_gain * k * (1.0 - u)
        return k * (1.0 - u * math.cos(phi) - T * math.sin(phi))

    def grad0(self, q: int, z: np.ndarray) -> np.ndarray:
        z0, z1, z2 = float(z[0]), float(z[1]), float(z[2])
        r0, r1, r2 = self._r
        _, _, _, ra0, ra1, ra2 = self._tabs[q]
        k = self.k
        wk = self.warp_gain * k
        u = r0 * z0 + r1 * z1 + r2 * z2
        T = ra0 * z0 + ra1 * z1 + ra2 * z2
        phi = wk * (1.0 - u)
        c, s = math.cos(phi), math.sin(phi)
        cr = k * (-c - wk * (u * s - T * c))
        cs = -k * s
        return np.array([cr * r0 + cs * ra0, cr * r1 + cs * ra1,
                         cr * r2 + cs * ra2])

    def V0_many(self, q: int, Z: np.ndarray) -> np.ndarray:
        """Vectorized V0 over rows of Z (post-processing helper)."""
        r = np.asarray(self._r)
        ra = np.asarray(self._tabs[q][3:])
        u = Z @ r
        T = Z @ ra
        phi = self.warp_gain * self.k * (1.0 - u)
        return self.k * (1.0 - u * np.cos(phi) - T * np.sin(phi))

    def attractor_states(self):
        """Continuous states at the attractor level (the target direction)."""
        return [np.array(self.r, dtype=float)]

    def base_manifold(self) -> ManifoldDescriptor:
        return ManifoldDescriptor([BlockSpec("z", 3, UNIT_SPHERE)])

    def base_pair(self) -> SlffPair:
        """The weak pair (V0, kappa0 = 0) for ż = z x omega with input omega."""
        fam = self
        r = np.array(self.r, dtype=float)
        manifold = self.base_manifold()

        def dist(q, x):
            return float(np.linalg.norm(x - r))

        def sampler(rng, n):
            labels = tuple(fam.modes)
            out = []
            for _ in range(n):
                v = rng.normal(size=3)
                out.append((labels[rng.integers(0, len(labels))],
                            v / np.linalg.norm(v)))
            return out

        return SlffPair(
            modes=self.modes,
            V=self.V0,
            gradV=self.grad0,
            kappa=lambda q, x: np.zeros(3),
            domain_X=lambda q, x: True,
            flow_effective_Y=lambda q, x: True,
            attractor_A=Attractor.from_dist(dist),
            manifold=manifold,
            weak=True,
            pure=True,
            psi=lambda q, x: hat(x),
            sampler=sampler,
            seeder=lambda density: fibonacci_sphere(int(density)),
        )

    def base_system(self) -> AffineControlSystem:
        """ż = z x omega as an input-affine system (zero drift)."""
        return AffineControlSystem(
            phi0=lambda q, x: np.zeros(3),
            psi0=lambda q, x: hat(x),
            domain_X0=lambda q, x: True,
            manifold=self.base_manifold(),
            input_dim=3)


def potential_family_build(params: PendulumParams, N: int = 2,
                           warp_gain: float = DEFAULT_WARP_GAIN,
                           k: float = 1.0,
                           S: Optional[tuple] = None) -> PotentialFamily:
    """Build the warped potential family.

    The warp angle gradient must stay below 1 for the per-mode warp to be a
    diffeomorphism of the sphere, which bounds warp_gain * k.  warp_gain
    may be 0 (all modes identical); certification then fails, by design.
    """
    if N < 2:
        raise ValueError("need at least two modes")
    if warp_gain < 0:
        raise ValueError("warp_gain must be nonnegative")
    if warp_gain * k >= 1.0:
        raise ValueError("warp_gain * k = %g leaves the certified"
                         " diffeomorphism range [0, 1)" % (warp_gain * k))
    modes = ModeSet.range(N)
    if S is None:
        S = tuple(modes)
    else:
        S = tuple(int(s) for s in S)
        if not set(S) <= set(modes.modes) or not S:
            raise ValueError("S must be a non-empty subset of the modes")
    r = params.target
    # orthonormal tangent pair at the target, deterministic
    seed_axis = np.array([1.0, 0.0, 0.0])
    if abs(seed_axis @ r) > 0.9:
        seed_axis = np.array([0.0, 1.0, 0.0])
    a1 = seed_axis - (seed_axis @ r) * r
    a1 /= np.linalg.norm(a1)
    a2 = np.cross(r, a1)
    axes = np.array([math.cos(2.0 * math.pi * i / N) * a1 +
                     math.sin(2.0 * math.pi * i / N) * a2 for i in range(N)])
    return PotentialFamily(modes=modes, S=S, axes=axes,
                           warp_gain=float(warp_gain), k=float(k),
                           r=np.array(r, dtype=float))


def certify_synergy_constant(family: PotentialFamily, grid_density: int = 10000,
                             margin_fraction: float = DEFAULT_BETA,
                             residual_tol: float = 1e-8) -> float:
    """Certify the synergy constant of the family by stall-set sampling.

    Samples the input-annihilation critical set of every mode plus the
    set of (mode, target) combinations, takes the minimum synergy gap over
    the non-attractor samples, and returns c = margin_fraction * minimum.
    Raises CertificationError with the worst witness when the minimum is
    not strictly positive (for example at warp_gain = 0, where all modes
    share the antipodal critical point with zero gap, or when S excludes a
    mode whose potential still vanishes at the target).
    """
    if not (0.0 < margin_fraction < 1.0):
        raise ValueError("margin_fraction must lie in (0, 1)")
    pair = family.base_pair()
    plant = lambda q, x, w: np.cross(x, w)
    criticals = sample_critical_set(pair, plant, "omega", grid_density,
                                    refine_tol=residual_tol)
    criticals = criticals + b_set_samples(pair, family.attractor_states())
    r = np.array(family.r, dtype=float)
    min_gap = math.inf
    witness = None
    for cs in criticals:
        q, x = cs.point.q, cs.point.x
        central = q in family.S
        near_target = float(np.linalg.norm(x - r)) <= 1e-6
        if central and near_target:
            continue  # attractor member
        gap = slff.mu_v(pair, q, x)
        if gap < min_gap:
            min_gap = gap
            witness = cs.point
    if not criticals or not math.isfinite(min_gap):
        raise CertificationError("no stall samples found", None, None)
    if min_gap <= 1e-12:
        raise CertificationError(
            "family is not synergistic: minimum gap %.3e at mode %d"
            % (min_gap, witness.q), witness=witness, min_gap=min_gap)
    c = margin_fraction * min_gap
    family.certification = CertificationResult(
        c=c, min_gap=min_gap, margin_fraction=margin_fraction,
        grid_density=grid_density, residual_tol=residual_tol,
        worst_witness=witness, criticals=criticals)
    return c


# ---------------------------------------------------------------------------
# torque feedback and the switching controller

def torque_feedback(family: PotentialFamily, params: PendulumParams,
                    Xi: np.ndarray, q: int, z: np.ndarray,
                    omega: np.ndarray) -> np.ndarray:
    """tau = -m g (nu x z) - Xi omega + z x gradV0(q, z)."""
    z = np.asarray(z, dtype=float)
    omega = np.asarray(omega, dtype=float)
    g = family.grad0(q, z)
    return (-params.m * params.g * np.cross(params.nu, z)
            - np.asarray(Xi, float) @ omega + np.cross(z, g))


def _mgnu(params):
    v = params.m * params.g * params.nu
    return float(v[0]), float(v[1]), float(v[2])


def _mat_rows(M):
    M = np.asarray(M, dtype=float)
    return tuple(tuple(float(x) for x in row) for row in M)


def _torque_plant(params: PendulumParams):
    """Fast flow map (q, x, tau) -> xdot for the (z, omega) state."""
    J = _mat_rows(params.J)
    Ji = _mat_rows(np.linalg.inv(params.J))
    n0, n1, n2 = _mgnu(params)

    def f(q, x, tau):
        z0, z1, z2, w0, w1, w2 = x.tolist()
        t0, t1, t2 = tau.tolist()
        # gravity torque m g (nu x z)
        g0 = n1 * z2 - n2 * z1
        g1 = n2 * z0 - n0 * z2
        g2 = n0 * z1 - n1 * z0
        # J omega and its gyroscopic torque (J omega) x omega
        a0 = J[0][0] * w0 + J[0][1] * w1 + J[0][2] * w2
        a1 = J[1][0] * w0 + J[1][1] * w1 + J[1][2] * w2
        a2 = J[2][0] * w0 + J[2][1] * w1 + J[2][2] * w2
        c0 = a1 * w2 - a2 * w1
        c1 = a2 * w0 - a0 * w2
        c2 = a0 * w1 - a1 * w0
        m0 = c0 + g0 + t0
        m1 = c1 + g1 + t1
        m2 = c2 + g2 + t2
        return np.array([
            z1 * w2 - z2 * w1,
            z2 * w0 - z0 * w2,
            z0 * w1 - z1 * w0,
            Ji[0][0] * m0 + Ji[0][1] * m1 + Ji[0][2] * m2,
            Ji[1][0] * m0 + Ji[1][1] * m1 + Ji[1][2] * m2,
            Ji[2][0] * m0 + Ji[2][1] * m1 + Ji[2][2] * m2,
        ])

    return f


def _fast_grad0(family: PotentialFamily):
    """grad0 on plain floats: (q, z0, z1, z2) -> (g0, g1, g2)."""
    r0, r1, r2 = family._r
    wk = family.warp_gain * family.k
    k = family.k
    tabs = family._tabs

    def grad(q, z0, z1, z2):
        _, _, _, ra0, ra1, ra2 = tabs[q]
        u = r0 * z0 + r1 * z1 + r2 * z2
        T = ra0 * z0 + ra1 * z1 + ra2 * z2
        phi = wk * (1.0 - u)
        c, s = math.cos(phi), math.sin(phi)
        cr = k * (-c - wk * (u * s - T * c))
        cs = -k * s
        return (cr * r0 + cs * ra0, cr * r1 + cs * ra1, cr * r2 + cs * ra2)

    return grad


def _fast_v0(family: PotentialFamily):
    r0, r1, r2 = family._r
    wk = family.warp_gain * family.k
    k = family.k
    tabs = family._tabs

    def val(q, z0, z1, z2):
        _, _, _, ra0, ra1, ra2 = tabs[q]
        u = r0 * z0 + r1 * z1 + r2 * z2
        T = ra0 * z0 + ra1 * z1 + ra2 * z2
        phi = wk * (1.0 - u)
        return k * (1.0 - u * math.cos(phi) - T * math.sin(phi))

    return val


def backstepped_pair(family: PotentialFamily, params: PendulumParams,
                     Xi: np.ndarray) -> SlffPair:
    """(V0 + kinetic energy, torque feedback) over the (z, omega) state.

    This is the integrator-backstepped pair expressed directly in torque
    coordinates; it matches the generic quadratic backstepping construction
    composed with the input transformation tau = -(J w) x w - m g (nu x z)
    + J u (audited in the tests).
    """
    manifold = ManifoldDescriptor([BlockSpec("z", 3, UNIT_SPHERE),
                                   BlockSpec("omega", 3)])
    J = _mat_rows(params.J)
    Xr = _mat_rows(Xi)
    n0, n1, n2 = _mgnu(params)
    v0 = _fast_v0(family)
    g0f = _fast_grad0(family)
    fam = family
    r = np.array(family.r, dtype=float)
    labels = tuple(family.modes)

    def V1(q, x):
        z0, z1, z2, w0, w1, w2 = x.tolist()
        a0 = J[0][0] * w0 + J[0][1] * w1 + J[0][2] * w2
        a1 = J[1][0] * w0 + J[1][1] * w1 + J[1][2] * w2
        a2 = J[2][0] * w0 + J[2][1] * w1 + J[2][2] * w2
        return v0(q, z0, z1, z2) + 0.5 * (w0 * a0 + w1 * a1 + w2 * a2)

    def gradV1(q, x):
        z0, z1, z2, w0, w1, w2 = x.tolist()
        g0, g1, g2 = g0f(q, z0, z1, z2)
        return np.array([
            g0, g1, g2,
            J[0][0] * w0 + J[0][1] * w1 + J[0][2] * w2,
            J[1][0] * w0 + J[1][1] * w1 + J[1][2] * w2,
            J[2][0] * w0 + J[2][1] * w1 + J[2][2] * w2,
        ])

    def kappa_tau(q, x):
        z0, z1, z2, w0, w1, w2 = x.tolist()
        g0, g1, g2 = g0f(q, z0, z1, z2)
        return np.array([
            -(n1 * z2 - n2 * z1) - (Xr[0][0] * w0 + Xr[0][1] * w1 + Xr[0][2] * w2)
            + (z1 * g2 - z2 * g1),
            -(n2 * z0 - n0 * z2) - (Xr[1][0] * w0 + Xr[1][1] * w1 + Xr[1][2] * w2)
            + (z2 * g0 - z0 * g2),
            -(n0 * z1 - n1 * z0) - (Xr[2][0] * w0 + Xr[2][1] * w1 + Xr[2][2] * w2)
            + (z0 * g1 - z1 * g0),
        ])

    def dist(q, x):
        z = x[:3]
        w = x[3:]
        return math.sqrt(float((z - r) @ (z - r)) + float(w @ w))

    def stall(q, x):
        z = x[:3]
        g = fam.grad0(q, z)
        return np.concatenate([np.cross(z, g), x[3:]])

    def sampler(rng, n):
        out = []
        for _ in range(n):
            v = rng.normal(size=3)
            v /= np.linalg.norm(v)
            w = rng.normal(size=3)
            nw = np.linalg.norm(w)
            if nw > 0:
                w = w / nw * 5.0 * rng.uniform() ** (1.0 / 3.0)
            out.append((labels[rng.integers(0, len(labels))],
                        np.concatenate([v, w])))
        return out

    def seeder(density):
        offsets = [np.zeros(3)]
        for i in range(3):
            for sgn in (0.7, -0.7):
                e = np.zeros(3)
                e[i] = sgn
                offsets.append(e)
        nz = max(8, int(math.ceil(density / len(offsets))))
        mesh = fibonacci_sphere(nz)
        return np.array([np.concatenate([z, w]) for z in mesh for w in offsets])

    return SlffPair(
        modes=family.modes, V=V1, gradV=gradV1, kappa=kappa_tau,
        domain_X=lambda q, x: True, flow_effective_Y=lambda q, x: True,
        attractor_A=Attractor.from_dist(dist), manifold=manifold,
        weak=False, pure=True, stall_residual=stall,
        sampler=sampler, seeder=seeder,
        box_bounds={"omega": (-5.0, 5.0)})


def build_hybrid_pendulum_controller(family: PotentialFamily,
                                     params: PendulumParams,
                                     Xi: Optional[np.ndarray] = None,
                                     c: Optional[float] = None) -> HybridSystem:
    """Closed loop: flow under the torque feedback while the synergy gap is
    at most c, switch to an argmin mode when it reaches c."""
    if Xi is None:
        Xi = default_Xi()
    if c is None:
        if family.certification is None:
            raise ValueError("certify the family first or pass c explicitly")
        c = family.certification.c
    pair = backstepped_pair(family, params, Xi)
    return synthesize_controller(pair, GapFunction.constant(float(c)),
                                 _torque_plant(params))


# ---------------------------------------------------------------------------
# smoothed controller

def smoothed_applied_torque(family: PotentialFamily, params: PendulumParams,
                            Xi: np.ndarray, z: np.ndarray, omega: np.ndarray,
                            p: np.ndarray) -> np.ndarray:
    """tau = -m g (nu x z) - Xi omega + z x (sum_s p_s gradV0(s, z)).

    Depends on the logic state only through p, never through q, which is
    what makes the applied torque continuous across mode switches.
    """
    z = np.asarray(z, dtype=float)
    gsum = np.zeros(3)
    for i, s in enumerate(family.modes):
        gsum += float(p[i]) * family.grad0(s, z)
    return (-params.m * params.g * np.cross(params.nu, z)
            - np.asarray(Xi, float) @ np.asarray(omega, float)
            + np.cross(z, gsum))


def smoothed_pair(family: PotentialFamily, params: PendulumParams,
                  Xi: np.ndarray, epsilon: float, k_p: float = DEFAULT_K_P) -> SlffPair:
    """The smoothed pair over (z, omega, p) with p tracking the mode's
    indicator vector.

    V2 = V0 + kinetic + (eps/4)|p - e_q|^2; the applied input stacks the
    torque (a function of z, omega, p only) and the tracking flow
    ṗ = -k_p (p - e_q) + (2/eps) DV0_stack (z x omega).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    N = len(family.modes)
    labels = tuple(family.modes)
    manifold = ManifoldDescriptor([BlockSpec("z", 3, UNIT_SPHERE),
                                   BlockSpec("omega", 3),
                                   BlockSpec("p", N)])
    J = _mat_rows(params.J)
    Xr = _mat_rows(Xi)
    n0, n1, n2 = _mgnu(params)
    v0 = _fast_v0(family)
    g0f = _fast_grad0(family)
    gp = 0.25 * epsilon      # Gamma_p = (eps/4) I
    inv2 = 2.0 / epsilon     # (1/2) Gamma_p^{-1}
    fam = family
    r = np.array(family.r, dtype=float)
    idx = {q: i for i, q in enumerate(labels)}

    def V2(q, x):
        vals = x.tolist()
        z0, z1, z2, w0, w1, w2 = vals[:6]
        p = vals[6:]
        a0 = J[0][0] * w0 + J[0][1] * w1 + J[0][2] * w2
        a1 = J[1][0] * w0 + J[1][1] * w1 + J[1][2] * w2
        a2 = J[2][0] * w0 + J[2][1] * w1 + J[2][2] * w2
        pe = 0.0
        iq = idx[q]
        for i in range(N):
            d = p[i] - (1.0 if i == iq else 0.0)
            pe += d * d
        return (v0(q, z0, z1, z2) + 0.5 * (w0 * a0 + w1 * a1 + w2 * a2)
                + gp * pe)

    def gradV2(q, x):
        vals = x.tolist()
        z0, z1, z2, w0, w1, w2 = vals[:6]
        p = vals[6:]
        g0, g1, g2 = g0f(q, z0, z1, z2)
        iq = idx[q]
        out = [g0, g1, g2,
               J[0][0] * w0 + J[0][1] * w1 + J[0][2] * w2,
               J[1][0] * w0 + J[1][1] * w1 + J[1][2] * w2,
               J[2][0] * w0 + J[2][1] * w1 + J[2][2] * w2]
        for i in range(N):
            d = p[i] - (1.0 if i == iq else 0.0)
            out.append(2.0 * gp * d)
        return np.array(out)

    def kappa2(q, x):
        # stacked input: torque then ṗ
        vals = x.tolist()
        z0, z1, z2, w0, w1, w2 = vals[:6]
        p = vals[6:]
        gs0 = gs1 = gs2 = 0.0
        grads = []
        for i, s in enumerate(labels):
            g0, g1, g2 = g0f(s, z0, z1, z2)
            grads.append((g0, g1, g2))
            gs0 += p[i] * g0
            gs1 += p[i] * g1
            gs2 += p[i] * g2
        tau0 = -(n1 * z2 - n2 * z1) \
            - (Xr[0][0] * w0 + Xr[0][1] * w1 + Xr[0][2] * w2) \
            + (z1 * gs2 - z2 * gs1)
        tau1 = -(n2 * z0 - n0 * z2) \
            - (Xr[1][0] * w0 + Xr[1][1] * w1 + Xr[1][2] * w2) \
            + (z2 * gs0 - z0 * gs2)
        tau2 = -(n0 * z1 - n1 * z0) \
            - (Xr[2][0] * w0 + Xr[2][1] * w1 + Xr[2][2] * w2) \
            + (z0 * gs1 - z1 * gs0)
        # z x omega
        x0 = z1 * w2 - z2 * w1
        x1 = z2 * w0 - z0 * w2
        x2 = z0 * w1 - z1 * w0
        iq = idx[q]
        out = [tau0, tau1, tau2]
        for i in range(N):
            d = p[i] - (1.0 if i == iq else 0.0)
            g0, g1, g2 = grads[i]
            out.append(-k_p * d + inv2 * (g0 * x0 + g1 * x1 + g2 * x2))
        return np.array(out)

    def dist(q, x):
        z = x[:3]
        w = x[3:6]
        pe = np.array(x[6:], dtype=float)
        pe[idx[q]] -= 1.0
        return math.sqrt(float((z - r) @ (z - r)) + float(w @ w)
                         + float(pe @ pe))

    def stall(q, x):
        z = x[:3]
        g = fam.grad0(q, z)
        pe = np.array(x[6:], dtype=float)
        pe[idx[q]] -= 1.0
        return np.concatenate([np.cross(z, g), x[3:6], pe])

    def sampler(rng, n):
        out = []
        for _ in range(n):
            v = rng.normal(size=3)
            v /= np.linalg.norm(v)
            w = rng.normal(size=3)
            nw = np.linalg.norm(w)
            if nw > 0:
                w = w / nw * 5.0 * rng.uniform() ** (1.0 / 3.0)
            q = labels[rng.integers(0, N)]
            p = np.zeros(N)
            p[idx[q]] = 1.0
            p += 0.3 * rng.normal(size=N)
            out.append((q, np.concatenate([v, w, p])))
        return out

    def seeder(density):
        combos = []
        for s in range(N):
            e = np.zeros(N)
            e[s] = 1.0
            combos.append((np.zeros(3), e))
        for i in range(3):
            e = np.zeros(3)
            e[i] = 0.7
            combos.append((e, np.full(N, 1.0 / N)))
        nz = max(8, int(math.ceil(density / len(combos))))
        mesh = fibonacci_sphere(nz)
        return np.array([np.concatenate([z, w, p])
                         for z in mesh for w, p in combos])

    return SlffPair(
        modes=family.modes, V=V2, gradV=gradV2, kappa=kappa2,
        domain_X=lambda q, x: True, flow_effective_Y=lambda q, x: True,
        attractor_A=Attractor.from_dist(dist), manifold=manifold,
        weak=False, pure=True, stall_residual=stall,
        sampler=sampler, seeder=seeder,
        box_bounds={"omega": (-5.0, 5.0), "p": (-0.5, 1.5)})


def _smoothed_plant(params: PendulumParams, N: int):
    """Flow map (q, x, u) with u = (tau, ṗ) stacked."""
    J = _mat_rows(params.J)
    Ji = _mat_rows(np.linalg.inv(params.J))
    n0, n1, n2 = _mgnu(params)

    def f(q, x, u):
        vals = x.tolist()
        z0, z1, z2, w0, w1, w2 = vals[:6]
        uu = u.tolist()
        t0, t1, t2 = uu[:3]
        g0 = n1 * z2 - n2 * z1
        g1 = n2 * z0 - n0 * z2
        g2 = n0 * z1 - n1 * z0
        a0 = J[0][0] * w0 + J[0][1] * w1 + J[0][2] * w2
        a1 = J[1][0] * w0 + J[1][1] * w1 + J[1][2] * w2
        a2 = J[2][0] * w0 + J[2][1] * w1 + J[2][2] * w2
        c0 = a1 * w2 - a2 * w1
        c1 = a2 * w0 - a0 * w2
        c2 = a0 * w1 - a1 * w0
        m0 = c0 + g0 + t0
        m1 = c1 + g1 + t1
        m2 = c2 + g2 + t2
        return np.array([
            z1 * w2 - z2 * w1,
            z2 * w0 - z0 * w2,
            z0 * w1 - z1 * w0,
            Ji[0][0] * m0 + Ji[0][1] * m1 + Ji[0][2] * m2,
            Ji[1][0] * m0 + Ji[1][1] * m1 + Ji[1][2] * m2,
            Ji[2][0] * m0 + Ji[2][1] * m1 + Ji[2][2] * m2,
        ] + uu[3:])

    return f


@dataclass(frozen=True)
class SmoothedControllerState:
    """Logic snapshot of the smoothed controller: mode, tracking state, and
    the torque it applies (p does not jump; tau is continuous in time)."""

    q: int
    p: np.ndarray
    tau: np.ndarray


def build_smoothed_pendulum_controller(family: PotentialFamily,
                                       params: PendulumParams,
                                       Xi: Optional[np.ndarray] = None,
                                       c: Optional[float] = None,
                                       epsilon: Optional[float] = None,
                                       k_p: float = DEFAULT_K_P) -> HybridSystem:
    """Closed loop over (z, omega, p) with jump threshold c + epsilon/2.

    Requires the certified minimum gap to exceed c + epsilon (the smoothing
    budget must fit under the certified headroom); otherwise raises
    CertificationError instructing a smaller epsilon.
    """
    if Xi is None:
        Xi = default_Xi()
    if family.certification is None:
        raise ValueError("certify the family before building controllers")
    if c is None:
        c = family.certification.c
    if epsilon is None:
        epsilon = 0.5 * c
    if c + epsilon >= family.certification.min_gap:
        raise CertificationError(
            "smoothing budget c + epsilon = %.6g reaches the certified"
            " minimum gap %.6g; choose a smaller epsilon"
            % (c + epsilon, family.certification.min_gap),
            min_gap=family.certification.min_gap)
    pair = smoothed_pair(family, params, Xi, epsilon, k_p=k_p)
    gap = GapFunction(delta=lambda q, x: float(c), epsilon_margin=0.5 * epsilon)
    return synthesize_controller(pair, gap, _smoothed_plant(params, len(family.modes)))


# ---------------------------------------------------------------------------
# arc post-processing

def lyapunov_samples(arc: HybridArc, family: PotentialFamily,
                     params: PendulumParams,
                     epsilon: Optional[float] = None) -> np.ndarray:
    """Vectorized Lyapunov values along an arc.

    Backstepped arcs (6-dim state) get V0 + kinetic; smoothed arcs (with a
    p block) add the (eps/4)|p - e_q|^2 tracking term, so epsilon is
    required for them.
    """
    Z = arc.xs[:, :3]
    W = arc.xs[:, 3:6]
    J = np.asarray(params.J)
    vals = 0.5 * np.einsum("ij,jk,ik->i", W, J, W)
    for q in family.modes:
        mask = arc.qs == q
        if np.any(mask):
            vals[mask] += family.V0_many(q, Z[mask])
    if arc.xs.shape[1] > 6:
        if epsilon is None:
            raise ValueError("epsilon required for smoothed arcs")
        P = arc.xs[:, 6:]
        labels = tuple(family.modes)
        for i, q in enumerate(labels):
            mask = arc.qs == q
            if np.any(mask):
                pe = P[mask].copy()
                pe[:, i] -= 1.0
                vals[mask] += 0.25 * epsilon * np.einsum("ij,ij->i", pe, pe)
    return vals


def attractor_distances(arc: HybridArc, family: PotentialFamily) -> np.ndarray:
    """Vectorized attractor distance along an arc (target direction, zero
    rate, and for smoothed arcs the mode's indicator)."""
    r = np.asarray(family.r, dtype=float)
    dz = arc.xs[:, :3] - r
    d2 = np.einsum("ij,ij->i", dz, dz)
    if arc.xs.shape[1] >= 6:
        W = arc.xs[:, 3:6]
        d2 = d2 + np.einsum("ij,ij->i", W, W)
    if arc.xs.shape[1] > 6:
        P = arc.xs[:, 6:]
        labels = tuple(family.modes)
        for i, q in enumerate(labels):
            mask = arc.qs == q
            if np.any(mask):
                pe = P[mask].copy()
                pe[:, i] -= 1.0
                d2[mask] += np.einsum("ij,ij->i", pe, pe)
    return np.sqrt(d2)


def applied_torques(arc: HybridArc, family: PotentialFamily,
                    params: PendulumParams, Xi: np.ndarray) -> np.ndarray:
    """Torque signal along an arc: mode-dependent for backstepped arcs,
    p-driven (mode-independent) for smoothed arcs."""
    out = np.empty((len(arc), 3))
    smoothed = arc.xs.shape[1] > 6
    for i in range(len(arc)):
        x = arc.xs[i]
        if smoothed:
            out[i] = smoothed_applied_torque(family, params, Xi, x[:3], x[3:6],
                                             x[6:])
        else:
            out[i] = torque_feedback(family, params, Xi, int(arc.qs[i]),
                                     x[:3], x[3:6])
    return out
