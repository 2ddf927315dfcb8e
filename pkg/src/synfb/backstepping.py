"""Constructive extensions of SLFF pairs through integrators.

Given a pair (V0, kappa0) for an input-affine system ż = phi0 + psi0·w,
backstepping produces a pair for the extended system with ẇ = u.  Two
constructions are provided: the quadratic-overshoot form
V1 = V0 + (w - kappa0)' Gamma (w - kappa0) for pairs whose feedback-jump
sizes are compatible with the quadratic sigma (backstep_type1), and a
Lipschitz-rescaled form V1 = V0 + rho((w - kappa0)' Gamma (w - kappa0))
for pairs that are only compatible with sigma(v) = L|v| (backstep_type2).

A separate construction smooths the logic variable: when kappa0 decomposes
as beta0(z) + vartheta0(z)·varsigma0(q), an auxiliary state p tracking
varsigma0(q) replaces the mode-dependent input with the continuous signal
beta0 + vartheta0·p (smooth_logic_controller); composing that with
integrator backstepping handles feedbacks that are not compatible to begin
with (backstep_unready).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .hybrid_core import (
    UNCONSTRAINED,
    BlockSpec,
    ManifoldDescriptor,
)
from .slff import Attractor, GapFunction, SlffPair

_DEFAULT_OMEGA_BOUNDS = (-2.0, 2.0)


@dataclass(frozen=True)
class AffineControlSystem:
    """Input-affine flow ż = phi0(q,z) + psi0(q,z)·w with w the input."""

    phi0: Callable[[int, np.ndarray], np.ndarray]
    psi0: Callable[[int, np.ndarray], np.ndarray]
    domain_X0: Callable[[int, np.ndarray], bool]
    manifold: ManifoldDescriptor
    input_dim: int

    def f(self, q: int, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        return np.asarray(self.phi0(q, x), float) + \
            np.asarray(self.psi0(q, x), float) @ np.asarray(w, float)


def as_plant(sys: AffineControlSystem):
    """Flow-map closure f(q, x, w) for simulation and audits."""
    phi0, psi0 = sys.phi0, sys.psi0

    def f(q, x, w):
        return np.asarray(phi0(q, x), float) + \
            np.asarray(psi0(q, x), float) @ np.asarray(w, float)

    return f


@dataclass(frozen=True)
class DampingSpec:
    """Gamma, a damping feedback Theta, and its certificate rate theta.

    Gamma must be symmetric positive definite.  Theta and theta, when
    present, must satisfy v'Gamma Theta(v) + Theta(v)'Gamma v <= -theta(|v|)
    (audited by damping_audit; the constructor only validates Gamma).
    """

    Gamma: np.ndarray
    Theta: Optional[Callable[[np.ndarray], np.ndarray]] = None
    theta: Optional[Callable[[float], float]] = None

    def __post_init__(self):
        G = np.asarray(self.Gamma, dtype=float)
        if G.ndim != 2 or G.shape[0] != G.shape[1]:
            raise ValueError("Gamma must be square")
        if not np.allclose(G, G.T, atol=1e-12):
            raise ValueError("Gamma must be symmetric")
        try:
            np.linalg.cholesky(G)
        except np.linalg.LinAlgError:
            raise ValueError("Gamma must be positive definite")
        object.__setattr__(self, "Gamma", G)


def default_damping(Gamma: np.ndarray, k_d: float = 1.0) -> DampingSpec:
    """Linear damping Theta(v) = -k_d v with theta(s) = 2 k_d lam_min(Gamma) s^2."""
    if k_d <= 0:
        raise ValueError("k_d must be positive")
    G = np.asarray(Gamma, dtype=float)
    lam_min = float(np.linalg.eigvalsh(G).min())

    def Theta(v):
        return -k_d * np.asarray(v, float)

    def theta(s):
        return 2.0 * k_d * lam_min * s * s

    return DampingSpec(Gamma=G, Theta=Theta, theta=theta)


def damping_audit(damp: DampingSpec, dim: int, n_samples: int = 10000,
                  seed: int = 42, radius: float = 10.0) -> float:
    """Worst violation of v'G Theta(v) + Theta(v)'G v + theta(|v|) <= 0."""
    if damp.Theta is None or damp.theta is None:
        raise ValueError("damping spec has no Theta/theta to audit")
    rng = np.random.default_rng(seed)
    G = damp.Gamma
    worst = -math.inf
    for _ in range(n_samples):
        v = rng.uniform(-radius, radius, size=dim)
        tv = np.asarray(damp.Theta(v), float)
        val = 2.0 * float(v @ G @ tv) + damp.theta(float(np.linalg.norm(v)))
        worst = max(worst, val)
    return worst


@dataclass(frozen=True)
class JacobianProvider:
    """Jacobian of a feedback with respect to the continuous state."""

    Dkappa0: Callable[[int, np.ndarray], np.ndarray]

    @classmethod
    def finite_difference(cls, kappa, step: float = 1e-6) -> "JacobianProvider":
        def D(q, x):
            x = np.asarray(x, dtype=float)
            k0 = np.atleast_1d(np.asarray(kappa(q, x), float))
            J = np.empty((k0.size, x.size))
            for i in range(x.size):
                xp = x.copy(); xp[i] += step
                xm = x.copy(); xm[i] -= step
                J[:, i] = (np.atleast_1d(kappa(q, xp)) -
                           np.atleast_1d(kappa(q, xm))) / (2.0 * step)
            return J
        return cls(Dkappa0=D)


@dataclass(frozen=True)
class LipschitzRho:
    """A smooth class-K-infinity rescaling with derivative and the Lipschitz
    constant its composition with the quadratic form is built to respect."""

    rho: Callable[[float], float]
    rho_prime: Callable[[float], float]
    L: float


# quintic bridge coefficients on [1, 2] (u = s - 1):
# H(u) = 1 + u + a3 u^3 + a4 u^4 + a5 u^5 matching value/slope/curvature of
# the identity at s = 1 and of sqrt(2 s) at s = 2
_A3, _A4, _A5 = 31.0 / 16.0, -27.0 / 8.0, 23.0 / 16.0


def _rho_tilde(s: float) -> float:
    if s <= 1.0:
        return s
    if s >= 2.0:
        return math.sqrt(2.0 * s)
    u = s - 1.0
    return 1.0 + u + u ** 3 * (_A3 + u * (_A4 + u * _A5))


def _rho_tilde_prime(s: float) -> float:
    if s <= 1.0:
        return 1.0
    if s >= 2.0:
        return math.sqrt(0.5 / s)
    u = s - 1.0
    return 1.0 + u ** 2 * (3.0 * _A3 + u * (4.0 * _A4 + u * 5.0 * _A5))


def build_lipschitz_rho(Gamma: np.ndarray, L: float) -> LipschitzRho:
    """Scale the identity/sqrt profile so rho(v'Gamma v) is L-Lipschitz in v.

    The unscaled profile is s on [0,1], sqrt(2 s) from 2 on, and a quintic
    Hermite bridge between; its derivative stays positive.  The returned
    rho = c * profile uses c = L / M where M bounds the directional
    derivative 2 rho'(s) sqrt(lam_max(Gamma) s) over a dense s-probe.
    """
    if L <= 0:
        raise ValueError("L must be positive")
    G = np.asarray(Gamma, dtype=float)
    lam_max = float(np.linalg.eigvalsh(G).max())
    grid = np.concatenate([
        np.linspace(1e-9, 1.0, 200),
        np.linspace(1.0, 2.0, 2000),
        np.linspace(2.0, 50.0, 200),
    ])
    M = max(2.0 * _rho_tilde_prime(float(s)) * math.sqrt(lam_max * float(s))
            for s in grid)
    M = max(M, math.sqrt(2.0 * lam_max), 2.0 * math.sqrt(lam_max)) * 1.02
    c = L / M

    def rho(s):
        return c * _rho_tilde(float(s))

    def rho_prime(s):
        return c * _rho_tilde_prime(float(s))

    return LipschitzRho(rho=rho, rho_prime=rho_prime, L=float(L))


@dataclass(frozen=True)
class SmoothingDecomposition:
    """Affine-in-logic split kappa0(q,z) = beta0(z) + vartheta0(z) varsigma0(q)."""

    beta0: Callable[[np.ndarray], np.ndarray]
    vartheta0: Callable[[np.ndarray], np.ndarray]
    varsigma0: Callable[[int], np.ndarray]
    r: int


# ---------------------------------------------------------------------------
# shared extension plumbing

def _extended_manifold(base: ManifoldDescriptor, name: str, dim: int):
    if name in base.slices:
        raise ValueError("base system already has a %r block" % (name,))
    return ManifoldDescriptor(base.blocks + (BlockSpec(name, dim, UNCONSTRAINED),))


def _base_stall_residual(pair0: SlffPair, sys0: AffineControlSystem):
    """Residual vanishing on the base pair's stall-set stand-in."""
    if pair0.stall_residual is not None:
        base = pair0.stall_residual
        return lambda q, x0: np.atleast_1d(base(q, x0))
    gradV0, kappa0 = pair0.gradV, pair0.kappa
    phi0, psi0 = sys0.phi0, sys0.psi0
    if pair0.weak:
        def res(q, x0):
            g = np.asarray(gradV0(q, x0), float)
            drift = float(g @ (np.asarray(phi0(q, x0), float) +
                               np.asarray(psi0(q, x0), float) @ kappa0(q, x0)))
            annih = np.atleast_1d(g @ np.asarray(psi0(q, x0), float))
            return np.concatenate(([drift], annih))
        return res

    def res(q, x0):
        g = np.asarray(gradV0(q, x0), float)
        return np.atleast_1d(
            float(g @ (np.asarray(phi0(q, x0), float) +
                       np.asarray(psi0(q, x0), float) @ kappa0(q, x0))))
    return res


def _extended_attractor(pair0: SlffPair, n: int, target) -> Attractor:
    """Attractor proxy for {(q, x0) in A0, tail = target(q, x0)}.

    The distance combines the base distance with the tail mismatch in
    quadrature; it is a measurement proxy, exact on product attractors
    where target is constant.
    """
    A0 = pair0.attractor_A

    def dist(q, x):
        x0 = x[:n]
        err = np.asarray(x[n:], float) - np.asarray(target(q, x0), float)
        return math.sqrt(A0.dist(q, x0) ** 2 + float(err @ err))

    def contains(q, x):
        x0 = x[:n]
        err = np.asarray(x[n:], float) - np.asarray(target(q, x0), float)
        return A0.contains(q, x0) and float(np.linalg.norm(err)) <= 1e-9

    return Attractor(contains=contains, dist=dist)


def extend_affine(sys0: AffineControlSystem) -> AffineControlSystem:
    """The integrator-extended system: state (x0, w), input u, ẇ = u."""
    n = sys0.manifold.dim
    m = sys0.input_dim
    manifold1 = _extended_manifold(sys0.manifold, "omega", m)
    phi0, psi0, dom0 = sys0.phi0, sys0.psi0, sys0.domain_X0
    zero_top = np.zeros((n, m))
    eye_bot = np.eye(m)
    psi1_mat = np.vstack([zero_top, eye_bot])

    def phi1(q, x):
        x0, w = x[:n], x[n:]
        return np.concatenate([
            np.asarray(phi0(q, x0), float) + np.asarray(psi0(q, x0), float) @ w,
            np.zeros(m)])

    return AffineControlSystem(
        phi1, lambda q, x: psi1_mat, lambda q, x: dom0(q, x[:n]),
        manifold1, m)


def lyap_rate(pair: SlffPair, sys: AffineControlSystem, q: int,
              x: np.ndarray) -> float:
    """<gradV, phi + psi kappa> at (q, x): the closed-loop flow derivative."""
    x = np.asarray(x, dtype=float)
    return float(np.asarray(pair.gradV(q, x), float) @ sys.f(q, x, pair.kappa(q, x)))


def provenance_json(pair: SlffPair) -> str:
    """Serialize the construction record attached to a synthesized pair."""
    if pair.provenance is None:
        raise ValueError("pair carries no construction record")
    return json.dumps(pair.provenance, sort_keys=True)


# ---------------------------------------------------------------------------
# integrator backstepping

def _backstep_common(pair0: SlffPair, sys0: AffineControlSystem,
                     damp: DampingSpec, jac: Optional[JacobianProvider]):
    if damp.Theta is None or damp.theta is None:
        raise ValueError("backstepping needs a full damping spec (Theta, theta)")
    m = sys0.input_dim
    if damp.Gamma.shape[0] != m:
        raise ValueError("Gamma dimension %d != input dimension %d"
                         % (damp.Gamma.shape[0], m))
    if jac is None:
        jac = JacobianProvider.finite_difference(pair0.kappa)
    n = sys0.manifold.dim
    manifold1 = _extended_manifold(sys0.manifold, "omega", m)
    bounds = dict(pair0.box_bounds or {})
    bounds.setdefault("omega", _DEFAULT_OMEGA_BOUNDS)
    return m, n, manifold1, jac, bounds


def backstep_type1(pair0: SlffPair, sys0: AffineControlSystem,
                   damp: DampingSpec, jac: Optional[JacobianProvider],
                   gap: GapFunction) -> SlffPair:
    """Quadratic-overshoot backstepping through one integrator.

    Requires a pure base pair (Y0 = X0) whose feedback-jump sizes are
    compatible with sigma(v) = v'Gamma v.  Returns the extended pair with
    V1 = V0 + (w - kappa0)'Gamma(w - kappa0) and
    kappa1 = Theta(v) - Gamma^{-1} psi0' gradV0 / 2 + Dkappa0 (phi0 + psi0 w);
    the threshold function is unchanged (lift it with lift_gap when it reads
    the base state).
    """
    if not pair0.pure:
        raise ValueError("quadratic backstepping requires a pure base pair")
    m, n, manifold1, jac, bounds = _backstep_common(pair0, sys0, damp, jac)
    G = damp.Gamma
    G_inv = np.linalg.inv(G)
    Theta, theta = damp.Theta, damp.theta
    V0, gradV0, kappa0 = pair0.V, pair0.gradV, pair0.kappa
    phi0, psi0 = sys0.phi0, sys0.psi0
    Dk = jac.Dkappa0
    base_res = _base_stall_residual(pair0, sys0)

    def V1(q, x):
        v = x[n:] - np.asarray(kappa0(q, x[:n]), float)
        return V0(q, x[:n]) + float(v @ G @ v)

    def gradV1(q, x):
        x0 = x[:n]
        v = x[n:] - np.asarray(kappa0(q, x0), float)
        gw = 2.0 * (G @ v)
        gz = np.asarray(gradV0(q, x0), float) - np.asarray(Dk(q, x0), float).T @ gw
        return np.concatenate([gz, gw])

    def kappa1(q, x):
        x0, w = x[:n], x[n:]
        v = w - np.asarray(kappa0(q, x0), float)
        p0 = np.asarray(psi0(q, x0), float)
        return (np.asarray(Theta(v), float)
                - 0.5 * (G_inv @ (p0.T @ np.asarray(gradV0(q, x0), float)))
                + np.asarray(Dk(q, x0), float) @ (np.asarray(phi0(q, x0), float)
                                                  + p0 @ w))

    def stall1(q, x):
        x0 = x[:n]
        return np.concatenate([base_res(q, x0),
                               x[n:] - np.asarray(kappa0(q, x0), float)])

    def domain1(q, x):
        return pair0.domain_X(q, x[:n])

    return SlffPair(
        modes=pair0.modes, V=V1, gradV=gradV1, kappa=kappa1,
        domain_X=domain1, flow_effective_Y=domain1,
        attractor_A=_extended_attractor(pair0, n, kappa0),
        manifold=manifold1, weak=False, pure=True,
        stall_residual=stall1, box_bounds=bounds,
        provenance={"construction": "backstep_type1",
                    "Gamma": damp.Gamma.tolist(),
                    "input_dim": m})


def backstep_type2(pair0: SlffPair, sys0: AffineControlSystem,
                   damp: DampingSpec, jac: Optional[JacobianProvider],
                   rho: LipschitzRho, gap: GapFunction) -> SlffPair:
    """Lipschitz-rescaled backstepping for non-pure base pairs.

    V1 = V0 + rho(v'Gamma v), and the feedback divides only the damping and
    gradient terms by rho', keeping the feedforward Dkappa0 (phi0 + psi0 w)
    unscaled so the flow derivative telescopes exactly:
    kappa1 = [Theta(v) - Gamma^{-1} psi0' gradV0 / 2] / rho' + Dkappa0 (...).
    The flow-effective set gains the whole input axis: Y1 = Y0 x R^m.
    """
    m, n, manifold1, jac, bounds = _backstep_common(pair0, sys0, damp, jac)
    G = damp.Gamma
    G_inv = np.linalg.inv(G)
    Theta = damp.Theta
    V0, gradV0, kappa0 = pair0.V, pair0.gradV, pair0.kappa
    phi0, psi0 = sys0.phi0, sys0.psi0
    Dk = jac.Dkappa0
    rho_fn, rho_p = rho.rho, rho.rho_prime
    base_res = _base_stall_residual(pair0, sys0)

    def _v_sigma(q, x):
        v = x[n:] - np.asarray(kappa0(q, x[:n]), float)
        return v, float(v @ G @ v)

    def V1(q, x):
        v, s = _v_sigma(q, x)
        return V0(q, x[:n]) + rho_fn(s)

    def gradV1(q, x):
        x0 = x[:n]
        v, s = _v_sigma(q, x)
        gw = (2.0 * rho_p(s)) * (G @ v)
        gz = np.asarray(gradV0(q, x0), float) - np.asarray(Dk(q, x0), float).T @ gw
        return np.concatenate([gz, gw])

    def kappa1(q, x):
        x0, w = x[:n], x[n:]
        v = w - np.asarray(kappa0(q, x0), float)
        s = float(v @ G @ v)
        rp = rho_p(s)
        if rp <= 0.0:
            raise ValueError("rho derivative non-positive at sigma=%g" % s)
        p0 = np.asarray(psi0(q, x0), float)
        return ((np.asarray(Theta(v), float)
                 - 0.5 * (G_inv @ (p0.T @ np.asarray(gradV0(q, x0), float)))) / rp
                + np.asarray(Dk(q, x0), float) @ (np.asarray(phi0(q, x0), float)
                                                  + p0 @ w))

    def stall1(q, x):
        x0 = x[:n]
        return np.concatenate([base_res(q, x0),
                               x[n:] - np.asarray(kappa0(q, x0), float)])

    def domain1(q, x):
        return pair0.domain_X(q, x[:n])

    def effective1(q, x):
        return pair0.flow_effective_Y(q, x[:n])

    return SlffPair(
        modes=pair0.modes, V=V1, gradV=gradV1, kappa=kappa1,
        domain_X=domain1, flow_effective_Y=effective1,
        attractor_A=_extended_attractor(pair0, n, kappa0),
        manifold=manifold1, weak=False, pure=pair0.pure,
        stall_residual=stall1, box_bounds=bounds,
        provenance={"construction": "backstep_type2",
                    "Gamma": damp.Gamma.tolist(),
                    "L": rho.L, "input_dim": m})


def lift_gap(gap: GapFunction, base_dim: int) -> GapFunction:
    """Read an extended state's threshold from its base-state prefix."""
    delta0 = gap.delta
    return GapFunction(delta=lambda q, x: delta0(q, x[:base_dim]),
                       epsilon_margin=gap.epsilon_margin)


# ---------------------------------------------------------------------------
# logic smoothing

def choose_gamma_for_logic(varsigma0, modes, epsilon: float) -> DampingSpec:
    """Gamma making the logic-jump overshoot at most epsilon/2.

    With sigma0(v) = v'Gamma v, returns Gamma = epsilon / (2 max |dv|^2) I
    over mode pairs dv = varsigma0(q) - varsigma0(s); identity when all
    varsigma0 coincide.  The bound holds with equality at the widest pair.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    labels = tuple(modes)
    r = np.atleast_1d(np.asarray(varsigma0(labels[0]), float)).size
    worst = 0.0
    for q in labels:
        for s in labels:
            dv = np.atleast_1d(np.asarray(varsigma0(q), float)) - \
                np.atleast_1d(np.asarray(varsigma0(s), float))
            worst = max(worst, float(dv @ dv))
    if worst == 0.0:
        return DampingSpec(Gamma=np.eye(r))
    return DampingSpec(Gamma=(epsilon / (2.0 * worst)) * np.eye(r))


def smooth_logic_controller(pair0: SlffPair, sys0: AffineControlSystem,
                            decomp: SmoothingDecomposition, epsilon: float,
                            damp_p: DampingSpec, allow_weak: bool = False):
    """Replace the mode-switched input by a continuous one tracking it.

    Treats p as a control for the augmented state (x0, p), applies the
    quadratic backstepping construction to (V0, varsigma0) with input matrix
    psi0·vartheta0 (varsigma0 has no state Jacobian), and returns
    (pair1, varsigma1): pair1 has V1 = V0 + (p - varsigma0(q))'Gp(p - ...)
    and the q-independent feedback kappa1 = beta0 + vartheta0 p; varsigma1
    is the continuous feedback driving ṗ.  Requires the base gap bounded
    away from its threshold by epsilon and Gamma_p small enough that mode
    switches overshoot V1 by at most epsilon/2.

    The weak variant is refused unless allow_weak is set (the composed
    pipeline handles it; see backstep_unready).
    """
    if epsilon <= 0:
        raise ValueError("epsilon margin must be positive")
    if pair0.weak and not allow_weak:
        raise ValueError("smoothing expects a non-weak pair"
                         " (weak pairs go through backstep_unready)")
    if damp_p.Theta is None or damp_p.theta is None:
        raise ValueError("smoothing needs a full damping spec for p")
    r = decomp.r
    Gp = damp_p.Gamma
    if Gp.shape[0] != r:
        raise ValueError("Gamma_p dimension %d != r = %d" % (Gp.shape[0], r))
    labels = tuple(pair0.modes)
    # the Gamma_p premise: mode switches must fit inside the epsilon budget
    for q in labels:
        for s in labels:
            dv = np.atleast_1d(decomp.varsigma0(q)) - np.atleast_1d(decomp.varsigma0(s))
            if float(dv @ Gp @ dv) > 0.5 * epsilon + 1e-12:
                raise ValueError("Gamma_p too large: sigma0 of a mode switch"
                                 " exceeds epsilon/2")
    # spot-check the decomposition against the pair's feedback
    rng = np.random.default_rng(0)
    for q, x0 in pair0.draw_states(rng, 16):
        rec = np.asarray(decomp.beta0(x0), float) + \
            np.asarray(decomp.vartheta0(x0), float) @ np.atleast_1d(decomp.varsigma0(q))
        if float(np.linalg.norm(rec - np.asarray(pair0.kappa(q, x0), float))) > 1e-9:
            raise ValueError("decomposition does not reconstruct kappa0")

    n = sys0.manifold.dim
    manifold1 = _extended_manifold(sys0.manifold, "p", r)
    Gp_inv = np.linalg.inv(Gp)
    Theta_p = damp_p.Theta
    V0, gradV0 = pair0.V, pair0.gradV
    psi0 = sys0.psi0
    beta0, vartheta0, varsigma0 = decomp.beta0, decomp.vartheta0, decomp.varsigma0
    base_res = _base_stall_residual(pair0, sys0)
    m = sys0.input_dim

    def V1(q, x):
        pt = x[n:] - np.atleast_1d(varsigma0(q))
        return V0(q, x[:n]) + float(pt @ Gp @ pt)

    def gradV1(q, x):
        pt = x[n:] - np.atleast_1d(varsigma0(q))
        return np.concatenate([np.asarray(gradV0(q, x[:n]), float),
                               2.0 * (Gp @ pt)])

    def kappa1(q, x):
        x0 = x[:n]
        return np.asarray(beta0(x0), float) + \
            np.asarray(vartheta0(x0), float) @ x[n:]

    def varsigma1(q, x):
        x0 = x[:n]
        pt = x[n:] - np.atleast_1d(varsigma0(q))
        vt = np.asarray(vartheta0(x0), float)
        g0 = np.asarray(gradV0(q, x0), float)
        return np.asarray(Theta_p(pt), float) - \
            0.5 * (Gp_inv @ (vt.T @ (np.asarray(psi0(q, x0), float).T @ g0)))

    def stall1(q, x):
        return np.concatenate([base_res(q, x[:n]),
                               x[n:] - np.atleast_1d(varsigma0(q))])

    def psi1(q, x):
        return np.vstack([np.asarray(psi0(q, x[:n]), float), np.zeros((r, m))])

    def domain1(q, x):
        return pair0.domain_X(q, x[:n])

    def effective1(q, x):
        return pair0.flow_effective_Y(q, x[:n])

    bounds = dict(pair0.box_bounds or {})
    bounds.setdefault("p", (-1.5, 1.5))

    pair1 = SlffPair(
        modes=pair0.modes, V=V1, gradV=gradV1, kappa=kappa1,
        domain_X=domain1, flow_effective_Y=effective1,
        attractor_A=_extended_attractor(pair0, n,
                                        lambda q, x0: np.atleast_1d(varsigma0(q))),
        manifold=manifold1, weak=pair0.weak, pure=pair0.pure,
        psi=psi1 if pair0.weak else None,
        stall_residual=stall1, box_bounds=bounds,
        provenance={"construction": "logic_smoothing",
                    "Gamma_p": Gp.tolist(), "epsilon": float(epsilon), "r": r})
    return pair1, varsigma1


def smooth_intermediate_system(sys0: AffineControlSystem, varsigma1,
                               r: int) -> AffineControlSystem:
    """The (x0, p) system after smoothing: ṗ = varsigma1 is autonomous drift,
    the original input channel is untouched."""
    n = sys0.manifold.dim
    m = sys0.input_dim
    manifold1 = _extended_manifold(sys0.manifold, "p", r)
    phi0, psi0, dom0 = sys0.phi0, sys0.psi0, sys0.domain_X0

    def phiI(q, x):
        return np.concatenate([np.asarray(phi0(q, x[:n]), float),
                               np.atleast_1d(varsigma1(q, x))])

    def psiI(q, x):
        return np.vstack([np.asarray(psi0(q, x[:n]), float), np.zeros((r, m))])

    return AffineControlSystem(phiI, psiI, lambda q, x: dom0(q, x[:n]),
                               manifold1, m)


def backstep_unready(pair0: SlffPair, sys0: AffineControlSystem,
                     decomp: SmoothingDecomposition, epsilon: float,
                     damp_p: DampingSpec, damp_u: DampingSpec,
                     jac_chain: Optional[JacobianProvider] = None) -> SlffPair:
    """Full pipeline for feedbacks with no ready-made compatibility.

    Stage one smooths the logic variable, yielding a pair whose feedback
    beta0 + vartheta0 p is q-independent and therefore compatible with any
    sigma (zero overshoot).  Stage two backsteps that pair through the
    actual input integrator: the quadratic construction when the base is
    pure, the Lipschitz-rescaled one otherwise.
    """
    pair1, varsigma1 = smooth_logic_controller(
        pair0, sys0, decomp, epsilon, damp_p, allow_weak=True)
    sysI = smooth_intermediate_system(sys0, varsigma1, decomp.r)
    if jac_chain is None:
        jac_chain = JacobianProvider.finite_difference(pair1.kappa)
    gap = GapFunction.constant(0.0)
    if pair1.pure:
        pair2 = backstep_type1(pair1, sysI, damp_u, jac_chain, gap)
    else:
        rho = build_lipschitz_rho(damp_u.Gamma, L=1.0)
        pair2 = backstep_type2(pair1, sysI, damp_u, jac_chain, rho, gap)
    prov = dict(pair2.provenance or {})
    prov["construction"] = "unready_pipeline"
    prov["stage1"] = pair1.provenance
    return SlffPair(
        modes=pair2.modes, V=pair2.V, gradV=pair2.gradV, kappa=pair2.kappa,
        domain_X=pair2.domain_X, flow_effective_Y=pair2.flow_effective_Y,
        attractor_A=pair2.attractor_A, manifold=pair2.manifold,
        weak=False, pure=pair2.pure, psi=pair2.psi,
        stall_residual=pair2.stall_residual, sampler=pair2.sampler,
        seeder=pair2.seeder, box_bounds=pair2.box_bounds, provenance=prov)
