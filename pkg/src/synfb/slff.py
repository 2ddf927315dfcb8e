"""Synergistic Lyapunov function and feedback pairs.

An SLFF pair bundles a mode-indexed Lyapunov function V, its z-gradient, a
feedback kappa, the sets it is defined relative to (domain X, flow-effective
set Y, attractor A), and the synergy gap machinery.  The synergy gap
mu_V(q,z) = V(q,z) - min_s V(s,z) measures the decrease available by
switching modes; the synthesized hybrid controller jumps to an argmin mode
whenever the gap reaches a threshold function delta.

Verification here is certification by sampling: stall-set candidates are
found by grid seeding plus damped Gauss-Newton refinement of a stationarity
residual, and the gap conditions are checked at the refined samples.  That
over-approximates the true invariant stall sets, which is conservative and
therefore sound for gap checking, but it is not a proof.
"""

from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .hybrid_core import (
    UNCONSTRAINED,
    UNIT_SPHERE,
    HybridSystem,
    ManifoldDescriptor,
    ManifoldError,
    ModeSet,
    ProductState,
)

KIND_PSI = "psi_candidate"
KIND_OMEGA = "omega_candidate"
KIND_BOUNDARY = "boundary_XY"
KIND_B = "B_set"

GAP_EXCEEDS = "exceeds"
GAP_TOTALLY = "totally_exceeds"
GAP_WEAKLY = "weakly_exceeds"
GAP_WEAKLY_TOTALLY = "weakly_totally_exceeds"

_GAP_MODES = (GAP_EXCEEDS, GAP_TOTALLY, GAP_WEAKLY, GAP_WEAKLY_TOTALLY)

_DEFAULT_BOX = (-2.0, 2.0)


@dataclass(frozen=True)
class Attractor:
    """Membership predicate plus distance function for the attractor A."""

    contains: Callable[[int, np.ndarray], bool]
    dist: Callable[[int, np.ndarray], float]

    @classmethod
    def from_dist(cls, dist, tol: float = 1e-9) -> "Attractor":
        return cls(contains=lambda q, x: dist(q, x) <= tol, dist=dist)


@dataclass(frozen=True)
class SlffPair:
    """A synergistic Lyapunov function and feedback pair relative to (A, Y).

    V, gradV, kappa take (q, x) with x the flat continuous state; gradV is
    the gradient in the continuous state with q held fixed.  weak marks the
    variant whose stall set is cut down by the input-annihilation set
    {gradV' psi = 0}; psi supplies that input matrix.  pure means Y = X.

    stall_residual, when present, overrides the generic stationarity
    residual in sample_critical_set: it encodes the tightest known
    characterization of the pair's stall set (backstepping attaches one).
    sampler(rng, n) draws states covering X; seeder(density) returns
    deterministic grid seeds; box_bounds gives per-block ranges for the
    default implementations of both.
    """

    modes: ModeSet
    V: Callable[[int, np.ndarray], float]
    gradV: Callable[[int, np.ndarray], np.ndarray]
    kappa: Callable[[int, np.ndarray], np.ndarray]
    domain_X: Callable[[int, np.ndarray], bool]
    flow_effective_Y: Callable[[int, np.ndarray], bool]
    attractor_A: Attractor
    manifold: ManifoldDescriptor
    weak: bool = False
    pure: bool = True
    psi: Optional[Callable[[int, np.ndarray], np.ndarray]] = None
    stall_residual: Optional[Callable[[int, np.ndarray], np.ndarray]] = None
    sampler: Optional[Callable] = None
    seeder: Optional[Callable[[int], np.ndarray]] = None
    box_bounds: Optional[dict] = None
    provenance: Optional[dict] = None

    def draw_states(self, rng: np.random.Generator, n: int):
        """n sampled (q, x) pairs from the pair's sampling measure."""
        if self.sampler is not None:
            return self.sampler(rng, n)
        return default_sampler(self.modes, self.manifold, self.box_bounds)(rng, n)

    def seed_states(self, density: int) -> np.ndarray:
        if self.seeder is not None:
            return self.seeder(density)
        return default_seeds(self.manifold, self.box_bounds, density)


@dataclass(frozen=True)
class GapFunction:
    """Threshold function delta plus a reserved margin.

    epsilon_margin is added to delta before every comparison; it realizes
    "bounded away" requirements and is 0 otherwise.
    """

    delta: Callable[[int, np.ndarray], float]
    epsilon_margin: float = 0.0

    def threshold(self, q: int, x: np.ndarray) -> float:
        return self.delta(q, x) + self.epsilon_margin

    @classmethod
    def constant(cls, value: float, epsilon_margin: float = 0.0) -> "GapFunction":
        v = float(value)
        return cls(delta=lambda q, x: v, epsilon_margin=float(epsilon_margin))


@dataclass(frozen=True)
class CriticalSample:
    """A refined stall-set (or boundary / B-set) candidate point."""

    point: ProductState
    residual: float
    kind: str


@dataclass(frozen=True)
class GapReport:
    mode: str
    worst_margin: float
    worst_point: Optional[ProductState]
    sample_count: int
    passed: bool
    seed: Optional[int] = None

    def to_json(self) -> str:
        wp = None
        if self.worst_point is not None:
            wp = {"q": int(self.worst_point.q),
                  "x": [float(v) for v in self.worst_point.x]}
        return json.dumps(
            {"mode": self.mode, "pass": self.passed,
             "worst_margin": self.worst_margin, "worst_point": wp,
             "sample_count": self.sample_count, "seed": self.seed},
            sort_keys=True)


@dataclass(frozen=True)
class AuditCheck:
    name: str
    ok: bool
    margin: float
    witness: Optional[ProductState] = None


@dataclass(frozen=True)
class AuditReport:
    passed: bool
    checks: tuple
    sample_count: int
    seed: int

    def check(self, name: str) -> AuditCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


# ---------------------------------------------------------------------------
# sampling helpers

def fibonacci_sphere(n: int) -> np.ndarray:
    """n near-uniform points on the unit 2-sphere (deterministic)."""
    i = np.arange(n, dtype=float) + 0.5
    ga = math.pi * (3.0 - math.sqrt(5.0))
    cos_t = 1.0 - 2.0 * i / n
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t * cos_t))
    ang = ga * i
    return np.column_stack((np.cos(ang) * sin_t, np.sin(ang) * sin_t, cos_t))


def _block_bounds(box_bounds, name):
    if box_bounds and name in box_bounds:
        lo, hi = box_bounds[name]
        return float(lo), float(hi)
    return _DEFAULT_BOX


def default_sampler(modes: ModeSet, manifold: ManifoldDescriptor,
                    box_bounds: Optional[dict] = None):
    """Uniform sampler: random mode, uniform sphere blocks, uniform boxes."""
    labels = tuple(modes)

    def draw(rng: np.random.Generator, n: int):
        out = []
        for _ in range(n):
            q = labels[rng.integers(0, len(labels))]
            parts = []
            for b in manifold.blocks:
                if b.constraint == UNIT_SPHERE:
                    v = rng.normal(size=b.dim)
                    v /= np.linalg.norm(v)
                    parts.append(v)
                else:
                    lo, hi = _block_bounds(box_bounds, b.name)
                    parts.append(rng.uniform(lo, hi, size=b.dim))
            out.append((q, np.concatenate(parts)))
        return out

    return draw


def default_seeds(manifold: ManifoldDescriptor, box_bounds: Optional[dict],
                  density: int) -> np.ndarray:
    """Deterministic seed grid: Fibonacci meshes for spheres, lattices for boxes.

    Per-block designs are combined as an outer product sized to roughly the
    requested density.
    """
    eff = 0
    for b in manifold.blocks:
        if b.constraint == UNIT_SPHERE:
            if b.dim != 3:
                raise NotImplementedError("sphere seeding implemented for dim 3")
            eff += 2
        else:
            eff += b.dim
    g = max(2, int(math.ceil(density ** (1.0 / max(eff, 1)))))
    block_pts = []
    for b in manifold.blocks:
        if b.constraint == UNIT_SPHERE:
            block_pts.append(list(fibonacci_sphere(g * g)))
        else:
            lo, hi = _block_bounds(box_bounds, b.name)
            axes = [np.linspace(lo, hi, g) for _ in range(b.dim)]
            block_pts.append([np.array(t) for t in itertools.product(*axes)])
    rows = [np.concatenate(parts) for parts in itertools.product(*block_pts)]
    return np.array(rows)


# ---------------------------------------------------------------------------
# synergy gap and controller synthesis

def mu_v(pair: SlffPair, q: int, x: np.ndarray) -> float:
    """Synergy gap V(q,x) - min_s V(s,x); >= 0, and 0 when q attains the min."""
    x = np.asarray(x, dtype=float)
    if not pair.domain_X(q, x):
        raise ValueError("state outside the pair's domain")
    vals = [pair.V(s, x) for s in pair.modes]
    return vals[pair.modes.modes.index(q)] - min(vals)


def argmin_modes(pair: SlffPair, x: np.ndarray):
    """Modes attaining min_s V(s,x), in ascending label order."""
    vals = [pair.V(s, x) for s in pair.modes]
    m = min(vals)
    return [s for s, v in zip(pair.modes, vals) if v == m]


def synthesize_controller(pair: SlffPair, gap: GapFunction, plant) -> HybridSystem:
    """Close the loop: flow with kappa while mu_V <= delta, jump to an argmin
    mode when mu_V >= delta.

    plant is the flow map f(q, x, omega).  The jump map keeps the continuous
    state and returns every argmin mode, lowest label first; the jump leaves
    the gap exactly at zero because V is evaluated by the same closures used
    for the argmin.
    """
    V = pair.V
    kappa = pair.kappa
    labels = tuple(pair.modes)
    delta = gap.delta
    margin = gap.epsilon_margin

    def _mu(q, x):
        vals = [V(s, x) for s in labels]
        return vals[labels.index(q)] - min(vals)

    def flow_map(q, x):
        return plant(q, x, kappa(q, x))

    def flow_set(q, x):
        return _mu(q, x) <= delta(q, x) + margin

    def jump_set(q, x):
        return _mu(q, x) >= delta(q, x) + margin

    def jump_map(q, x):
        vals = [V(s, x) for s in labels]
        m = min(vals)
        return [(s, x) for s, v in zip(labels, vals) if v == m]

    return HybridSystem(
        modes=pair.modes,
        manifold=pair.manifold,
        flow_map=flow_map,
        flow_set=flow_set,
        jump_set=jump_set,
        jump_map=jump_map,
        domain=pair.domain_X,
        attractor_dist=pair.attractor_A.dist,
    )


# ---------------------------------------------------------------------------
# candidate conditions

def candidate_check(pair: SlffPair, plant, n_samples: int, seed: int) -> AuditReport:
    """Sampled audit of the SLFF candidate conditions.

    Checks V >= 0, V = 0 iff attractor membership, the flow derivative
    <gradV, f(q,x,kappa)> <= 1e-10 on Y, and a sublevel-boundedness probe
    along unbounded coordinate rays.  Returns a structured report; witnesses
    are the worst offending sample per check.
    """
    rng = np.random.default_rng(seed)
    states = pair.draw_states(rng, n_samples)
    A = pair.attractor_A

    worst = {"nonneg": 0.0, "posdef": 0.0, "derivative": -math.inf}
    wit = {"nonneg": None, "posdef": None, "derivative": None}
    deriv_seen = False

    for q, x in states:
        v = pair.V(q, x)
        if v < -worst["nonneg"]:
            worst["nonneg"] = -v
            wit["nonneg"] = ProductState.from_flat(q, x, pair.manifold)
        bad = 0.0
        if A.contains(q, x):
            bad = max(bad, v - 1e-9)
        elif v <= 1e-12 and A.dist(q, x) > 1e-9:
            bad = max(bad, A.dist(q, x))
        if bad > worst["posdef"]:
            worst["posdef"] = bad
            wit["posdef"] = ProductState.from_flat(q, x, pair.manifold)
        if pair.flow_effective_Y(q, x):
            deriv_seen = True
            d = float(pair.gradV(q, x) @ plant(q, x, pair.kappa(q, x)))
            if d > worst["derivative"]:
                worst["derivative"] = d
                wit["derivative"] = ProductState.from_flat(q, x, pair.manifold)

    checks = [
        AuditCheck("nonneg", worst["nonneg"] <= 0.0, -worst["nonneg"], wit["nonneg"]),
        AuditCheck("posdef", worst["posdef"] <= 0.0, -worst["posdef"], wit["posdef"]),
        AuditCheck("derivative",
                   (not deriv_seen) or worst["derivative"] <= 1e-10,
                   1e-10 - worst["derivative"] if deriv_seen else math.inf,
                   wit["derivative"]),
        _sublevel_probe(pair, states),
    ]
    return AuditReport(passed=all(c.ok for c in checks), checks=tuple(checks),
                       sample_count=len(states), seed=seed)


def _sublevel_probe(pair: SlffPair, states) -> AuditCheck:
    # heuristic: V must grow along +-rays of every unconstrained axis
    free = [b for b in pair.manifold.blocks if b.constraint == UNCONSTRAINED]
    if not free or not states:
        return AuditCheck("sublevel", True, math.inf, None)
    q0, x0 = states[0]
    worst = math.inf
    witness = None
    for b in free:
        sl = pair.manifold.slices[b.name]
        for axis in range(b.dim):
            for sign in (1.0, -1.0):
                vals = []
                for t in (4.0, 64.0):
                    xt = np.array(x0, dtype=float)
                    xt[sl] = 0.0
                    xt[sl.start + axis] = sign * t
                    vals.append(pair.V(q0, xt))
                growth = vals[1] - vals[0]
                if growth < worst:
                    worst = growth
                    witness = ProductState.from_flat(q0, x0, pair.manifold)
    return AuditCheck("sublevel", worst > 0.0, worst, witness)


def check_gradient(pair: SlffPair, n_samples: int, seed: int,
                   rel_tol: float = 1e-5, h: float = 1e-6) -> AuditCheck:
    """Central-difference audit of gradV against V."""
    rng = np.random.default_rng(seed)
    states = pair.draw_states(rng, n_samples)
    worst = 0.0
    witness = None
    for q, x in states:
        g = np.asarray(pair.gradV(q, x), dtype=float)
        fd = np.empty_like(g)
        for i in range(x.size):
            xp = np.array(x, dtype=float)
            xm = np.array(x, dtype=float)
            xp[i] += h
            xm[i] -= h
            fd[i] = (pair.V(q, xp) - pair.V(q, xm)) / (2.0 * h)
        rel = float(np.linalg.norm(fd - g) / max(1.0, np.linalg.norm(g)))
        if rel > worst:
            worst = rel
            witness = ProductState.from_flat(q, x, pair.manifold)
    return AuditCheck("gradient", worst <= rel_tol, rel_tol - worst, witness)


# ---------------------------------------------------------------------------
# critical-set sampling

def _tangent_basis(m: ManifoldDescriptor, x: np.ndarray) -> np.ndarray:
    """Columns spanning the manifold tangent space at x (ambient coords)."""
    cols = []
    covered = np.zeros(m.dim, dtype=bool)
    for lo, hi in m._sphere_spans:
        covered[lo:hi] = True
        d = hi - lo
        v = x[lo:hi] / np.linalg.norm(x[lo:hi])
        basis = np.linalg.qr(np.column_stack([v, np.eye(d)]))[0][:, 1:d]
        for k in range(basis.shape[1]):
            e = np.zeros(m.dim)
            e[lo:hi] = basis[:, k]
            cols.append(e)
    for i in range(m.dim):
        if not covered[i]:
            e = np.zeros(m.dim)
            e[i] = 1.0
            cols.append(e)
    return np.column_stack(cols)


def _retract(m: ManifoldDescriptor, x: np.ndarray) -> np.ndarray:
    out = np.array(x, dtype=float)
    m.renormalize_inplace(out)
    return out


def _refine_point(res, m: ManifoldDescriptor, x0: np.ndarray,
                  tol: float, max_iter: int = 60, h: float = 1e-6):
    """Damped Gauss-Newton minimization of |res(x)| on the manifold."""
    try:
        x = _retract(m, x0)
    except ManifoldError:
        return None
    r = np.atleast_1d(np.asarray(res(x), dtype=float))
    best = float(np.linalg.norm(r))
    lam = 1e-6
    for _ in range(max_iter):
        if best <= tol or not math.isfinite(best):
            break
        B = _tangent_basis(m, x)
        k = B.shape[1]
        J = np.empty((r.size, k))
        try:
            for i in range(k):
                xp = _retract(m, x + h * B[:, i])
                xm = _retract(m, x - h * B[:, i])
                J[:, i] = (np.atleast_1d(res(xp)) - np.atleast_1d(res(xm))) / (2.0 * h)
        except ManifoldError:
            return None
        A = J.T @ J
        g = J.T @ r
        accepted = False
        while lam <= 1e10:
            try:
                d = np.linalg.solve(A + lam * np.eye(k), -g)
                xn = _retract(m, x + B @ d)
            except (np.linalg.LinAlgError, ManifoldError):
                lam *= 10.0
                continue
            rn = np.atleast_1d(np.asarray(res(xn), dtype=float))
            nn = float(np.linalg.norm(rn))
            if math.isfinite(nn) and nn < best:
                x, r, best = xn, rn, nn
                lam = max(lam * 0.3, 1e-12)
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            break
    if not math.isfinite(best):
        return None
    return x, best


def _stationarity_residual(pair: SlffPair, plant, kind: str, q: int):
    if pair.stall_residual is not None:
        return lambda x: np.atleast_1d(pair.stall_residual(q, x))
    if kind == "psi":
        def res(x):
            return np.atleast_1d(
                float(pair.gradV(q, x) @ plant(q, x, pair.kappa(q, x))))
        return res
    if kind == "omega":
        if pair.psi is None:
            raise ValueError("omega-kind residual needs the pair's psi matrix")

        def res(x):
            drift = float(pair.gradV(q, x) @ plant(q, x, pair.kappa(q, x)))
            annih = np.asarray(pair.gradV(q, x) @ pair.psi(q, x), dtype=float)
            return np.concatenate(([drift], np.atleast_1d(annih)))
        return res
    raise ValueError("kind must be 'psi' or 'omega'")


def sample_critical_set(pair: SlffPair, plant, kind: str, grid_density: int,
                        refine_tol: float = 1e-8, dedup_tol: float = 1e-4,
                        max_refine: int = 400):
    """Stall-set candidates: grid seeding plus Gauss-Newton refinement.

    kind selects the residual: 'psi' uses the flow stationarity
    <gradV, f(q,x,kappa)>; 'omega' adds the input annihilation gradV' psi.
    A pair-supplied stall_residual overrides both.  Seeds are ranked by
    residual and only the best max_refine per mode are polished; converged
    points (residual <= refine_tol) inside X and Y are deduplicated at
    spatial tolerance dedup_tol.  This over-approximates the invariant stall
    set, which is sound for gap checking.
    """
    sample_kind = KIND_OMEGA if kind == "omega" else KIND_PSI
    found = []
    for q in pair.modes:
        res = _stationarity_residual(pair, plant, kind, q)
        seeds = pair.seed_states(grid_density)
        scores = np.empty(len(seeds))
        for i, s in enumerate(seeds):
            try:
                v = float(np.linalg.norm(np.atleast_1d(res(np.asarray(s, float)))))
            except (FloatingPointError, ManifoldError):
                v = math.inf
            scores[i] = v if math.isfinite(v) else math.inf
        order = np.argsort(scores, kind="stable")[:max_refine]
        for i in order:
            out = _refine_point(res, pair.manifold, np.asarray(seeds[i], float),
                                refine_tol)
            if out is None:
                continue
            x, r = out
            if r > refine_tol:
                continue
            if not pair.domain_X(q, x) or not pair.flow_effective_Y(q, x):
                continue
            found.append((q, x, r))
    found.sort(key=lambda t: t[2])
    kept = []
    for q, x, r in found:
        dup = False
        for ks in kept:
            if ks.point.q == q and np.linalg.norm(ks.point.x - x) <= dedup_tol:
                dup = True
                break
        if not dup:
            kept.append(CriticalSample(
                point=ProductState.from_flat(q, x, pair.manifold),
                residual=r, kind=sample_kind))
    return kept


def sample_boundary_XY(pair: SlffPair, n_samples: int, seed: int):
    """Samples of X \\ Y (empty for pure pairs), tagged boundary_XY."""
    if pair.pure:
        return []
    rng = np.random.default_rng(seed)
    out = []
    for q, x in pair.draw_states(rng, n_samples):
        if pair.domain_X(q, x) and not pair.flow_effective_Y(q, x):
            out.append(CriticalSample(
                point=ProductState.from_flat(q, x, pair.manifold),
                residual=0.0, kind=KIND_BOUNDARY))
    return out


def b_set_samples(pair: SlffPair, attractor_states: Sequence[np.ndarray]):
    """B-set samples: every mode paired with attractor-level continuous states.

    attractor_states are flat continuous states x with (s, x) in A for some
    mode s; the returned samples cover (q, x) for every mode q.  Members that
    are themselves in A contribute nothing to gap margins but satisfy the
    presence requirement of the 'totally' verification modes.
    """
    out = []
    for q in pair.modes:
        for x in attractor_states:
            out.append(CriticalSample(
                point=ProductState.from_flat(q, np.asarray(x, float), pair.manifold),
                residual=0.0, kind=KIND_B))
    return out


# ---------------------------------------------------------------------------
# gap verification

def _required_kinds(mode: str, pure: bool):
    req = {KIND_OMEGA if mode.startswith("weakly") else KIND_PSI}
    if "totally" in mode:
        req.add(KIND_B)
    if not pure:
        req.add(KIND_BOUNDARY)
    return req


def verify_gap(pair: SlffPair, gap: GapFunction, criticals, mode: str,
               seed: Optional[int] = None,
               attractor_exclude_tol: float = 1e-6) -> GapReport:
    """Check mu_V - (delta + epsilon_margin) > 0 at the critical samples.

    mode selects which sample kinds are required and contribute: the stall
    kind (psi for plain, omega for weakly), boundary_XY when the pair is not
    pure, and B_set for the totally variants.  Samples within
    attractor_exclude_tol of A are excluded (the condition quantifies over
    the set minus the attractor; the tolerance absorbs refinement slop).
    A missing required kind raises; no contributing samples yields the
    vacuous pass worst_margin = +inf.
    """
    if mode not in _GAP_MODES:
        raise ValueError("unknown gap mode %r" % (mode,))
    req = _required_kinds(mode, pair.pure)
    present = {c.kind for c in criticals}
    missing = req - present
    if missing:
        raise ValueError("criticals missing required kinds: %s"
                         % ", ".join(sorted(missing)))
    worst = math.inf
    worst_point = None
    count = 0
    for c in criticals:
        if c.kind not in req:
            continue
        q = c.point.q
        x = c.point.x
        if pair.attractor_A.dist(q, x) <= attractor_exclude_tol:
            continue
        count += 1
        m = mu_v(pair, q, x) - gap.threshold(q, x)
        if m < worst:
            worst = m
            worst_point = c.point
    return GapReport(mode=mode, worst_margin=worst, worst_point=worst_point,
                     sample_count=count, passed=worst > 0.0, seed=seed)


# ---------------------------------------------------------------------------
# threshold constructions

def delta_construction_prop1(pair: SlffPair, criticals,
                             fallback_delta: float = 1e-3) -> GapFunction:
    """Distance-plus-half-gap threshold built from the critical samples.

    delta(q,x) = min over samples (s, xi) of |(q,x) - (s, xi)| + mu_V(s,xi)/2,
    with modes embedded as reals in the product distance.  Continuous by
    construction and at most half the gap at each sample.  An empty sample
    list falls back to a constant positive delta with a warning.
    """
    if not criticals:
        warnings.warn("no critical samples; using constant fallback delta")
        return GapFunction.constant(fallback_delta)
    anchors = [(float(c.point.q), np.asarray(c.point.x, float),
                0.5 * mu_v(pair, c.point.q, c.point.x)) for c in criticals]

    def delta(q, x):
        x = np.asarray(x, dtype=float)
        best = math.inf
        for s, xi, half in anchors:
            d = math.sqrt((q - s) ** 2 + float(np.sum((x - xi) ** 2))) + half
            if d < best:
                best = d
        return best

    return GapFunction(delta=delta, epsilon_margin=0.0)


@dataclass(frozen=True)
class SmoothScalar:
    """A scalar function with its analytic derivative."""

    fn: Callable[[float], float]
    deriv: Callable[[float], float]


def rescale_prop1(pair: SlffPair, rho: SmoothScalar, c: float,
                  gap: GapFunction):
    """Rescaled pair (rho(V), kappa) with threshold rho'(c V) (1-c) delta.

    rho must be smooth, zero at zero, with positive nondecreasing derivative;
    c in (0, 1).  Any epsilon_margin on the incoming gap is folded into
    delta before rescaling.  Argmins of V(., x) are preserved, so the
    synthesized controller's jump targets are unchanged.
    """
    if not (0.0 < c < 1.0):
        raise ValueError("c must lie in (0, 1)")
    # positive away from zero; rho'(0) = 0 is fine (quadratic rescalings)
    last = 0.0
    for s in np.linspace(0.25, 10.0, 40):
        d = rho.deriv(float(s))
        if d <= 0.0:
            raise ValueError("rho derivative must be positive (fails at %g)" % s)
        if d < last - 1e-12:
            raise ValueError("rho derivative must be nondecreasing")
        last = d

    V0, g0, delta0, margin0 = pair.V, pair.gradV, gap.delta, gap.epsilon_margin

    def V(q, x):
        return rho.fn(V0(q, x))

    def gradV(q, x):
        return rho.deriv(V0(q, x)) * g0(q, x)

    def delta(q, x):
        return rho.deriv(c * V0(q, x)) * (1.0 - c) * (delta0(q, x) + margin0)

    new_pair = SlffPair(
        modes=pair.modes, V=V, gradV=gradV, kappa=pair.kappa,
        domain_X=pair.domain_X, flow_effective_Y=pair.flow_effective_Y,
        attractor_A=pair.attractor_A, manifold=pair.manifold,
        weak=pair.weak, pure=pair.pure, psi=pair.psi,
        stall_residual=pair.stall_residual, sampler=pair.sampler,
        seeder=pair.seeder, box_bounds=pair.box_bounds,
        provenance=pair.provenance)
    return new_pair, GapFunction(delta=delta, epsilon_margin=0.0)


# ---------------------------------------------------------------------------
# ready-made checks

def ready_made_check(pair: SlffPair, sigma, varrho, gap: GapFunction,
                     criticals, type_: str, omega_probe_count: int = 16,
                     n_samples: int = 1000, seed: int = 42,
                     omega_radius: float = 10.0) -> AuditReport:
    """Audit the ready-made compatibility between sigma and the gap.

    Checks, on sampled states (q,x) and all modes s:
      1. sigma(w - kappa(s,x)) - sigma(w - kappa(q,x)) <= varrho(q,x), with
         w = kappa(q,x) for type I, and w drawn from a ball of radius
         omega_radius (recorded in the report) for type II;
      2. mu_V > delta + margin + varrho at the non-attractor critical samples;
      3. the boundary samples (cl(X\\Y) stand-ins) avoid the attractor.
    """
    if type_ not in ("I", "II"):
        raise ValueError("type_ must be 'I' or 'II'")
    rng = np.random.default_rng(seed)
    states = pair.draw_states(rng, n_samples)

    worst1 = -math.inf
    wit1 = None
    for q, x in states:
        kq = np.asarray(pair.kappa(q, x), dtype=float)
        if type_ == "I":
            probes = [kq]
        else:
            m = kq.size
            probes = [kq + omega_radius * _ball_point(rng, m)
                      for _ in range(omega_probe_count)]
        bound = float(varrho(q, x))
        for w in probes:
            base = float(sigma(w - kq))
            for s in pair.modes:
                lhs = float(sigma(w - np.asarray(pair.kappa(s, x), float))) - base
                if lhs - bound > worst1:
                    worst1 = lhs - bound
                    wit1 = ProductState.from_flat(q, x, pair.manifold)

    worst2 = math.inf
    wit2 = None
    for c in criticals:
        if c.kind == KIND_B:
            continue
        q, x = c.point.q, c.point.x
        if pair.attractor_A.dist(q, x) <= 1e-6:
            continue
        m = mu_v(pair, q, x) - (gap.threshold(q, x) + float(varrho(q, x)))
        if m < worst2:
            worst2 = m
            wit2 = c.point
    worst3 = math.inf
    wit3 = None
    for c in criticals:
        if c.kind != KIND_BOUNDARY:
            continue
        d = pair.attractor_A.dist(c.point.q, c.point.x)
        if d < worst3:
            worst3 = d
            wit3 = c.point

    checks = (
        AuditCheck("feedback_jump_bound", worst1 <= 1e-12, -worst1, wit1),
        AuditCheck("gap_exceeds_with_varrho", worst2 > 0.0, worst2, wit2),
        AuditCheck("boundary_avoids_attractor", worst3 > 1e-9, worst3, wit3),
    )
    return AuditReport(passed=all(c.ok for c in checks), checks=checks,
                       sample_count=len(states), seed=seed)


def _ball_point(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.normal(size=dim)
    n = np.linalg.norm(v)
    if n == 0.0:
        return np.zeros(dim)
    return v / n * rng.uniform(0.0, 1.0) ** (1.0 / dim)
