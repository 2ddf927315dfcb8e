"""Hybrid dynamical systems: flow integration, jump resolution, hybrid arcs.

A hybrid system flows through a flow set C and jumps from a jump set D.
Solutions live on hybrid time domains (t, j): t accumulates flow time, j
counts jumps.  Integration is fixed-step classical Runge-Kutta 4 with
per-step manifold renormalization; jump events are localized by bisecting
the last step.  On the overlap C ∩ D jumps have priority, and set-valued
jump maps are resolved deterministically (first candidate).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

UNCONSTRAINED = "unconstrained"
UNIT_SPHERE = "unit-sphere"

TERM_HORIZON = "horizon-reached"
TERM_JUMPS = "jump-budget"
TERM_ATTRACTOR = "in-attractor"
TERM_FAILURE = "integration-failure"

EXIT_JUMP = "entered_jump_set"
EXIT_MAXT = "max_t"
EXIT_FAILURE = "failure"

# internal-only leg exit, mapped to TERM_ATTRACTOR by simulate
_EXIT_ATTR = "_attractor"

EVENT_TOL = 1e-10  # event time localized to within this many seconds
_NORM_FLOOR = 1e-6  # sphere block below this norm means integration blew up

_STATE_FIELDS = ("z", "omega", "p")


class ZenoError(RuntimeError):
    """Two jumps with zero intervening flow time outside the attractor."""


class ManifoldError(RuntimeError):
    """A sphere-constrained block left its manifold catastrophically."""


@dataclass(frozen=True)
class BlockSpec:
    """One contiguous block of the continuous state.

    name must be one of 'z', 'omega', 'p'; constraint is UNCONSTRAINED or
    UNIT_SPHERE.
    """

    name: str
    dim: int
    constraint: str = UNCONSTRAINED

    def __post_init__(self):
        if self.name not in _STATE_FIELDS:
            raise ValueError("block name must be one of %r" % (_STATE_FIELDS,))
        if self.dim <= 0:
            raise ValueError("block dim must be positive")
        if self.constraint not in (UNCONSTRAINED, UNIT_SPHERE):
            raise ValueError("unknown constraint %r" % (self.constraint,))


class ManifoldDescriptor:
    """Partition of the continuous state into tagged blocks.

    The block list covers the whole state vector in order.  Sphere-tagged
    blocks are kept at unit norm by renormalization after every accepted
    integration step.
    """

    def __init__(self, blocks: Sequence[BlockSpec]):
        blocks = tuple(blocks)
        if not blocks:
            raise ValueError("at least one block required")
        names = [b.name for b in blocks]
        if len(set(names)) != len(names):
            raise ValueError("duplicate block names")
        self.blocks = blocks
        self.slices = {}
        off = 0
        for b in blocks:
            self.slices[b.name] = slice(off, off + b.dim)
            off += b.dim
        self.dim = off
        # (start, stop) pairs for the hot renormalization loop
        self._sphere_spans = tuple(
            (self.slices[b.name].start, self.slices[b.name].stop)
            for b in blocks
            if b.constraint == UNIT_SPHERE
        )

    def split(self, x: np.ndarray) -> dict:
        """Split a flat state vector into named block arrays."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError("state has dim %d, expected %d" % (x.size, self.dim))
        return {b.name: x[self.slices[b.name]] for b in self.blocks}

    def renormalize_inplace(self, x: np.ndarray) -> None:
        for lo, hi in self._sphere_spans:
            v = x[lo:hi]
            n = math.sqrt(float(v @ v))
            # also trips on NaN, since NaN comparisons are false
            if not (n > _NORM_FLOOR):
                raise ManifoldError(
                    "sphere block [%d:%d] has norm %r" % (lo, hi, n)
                )
            x[lo:hi] = v / n

    def sphere_drift(self, x: np.ndarray) -> float:
        """Max over sphere blocks of ||block| - 1| (0.0 if none)."""
        worst = 0.0
        for lo, hi in self._sphere_spans:
            v = x[lo:hi]
            worst = max(worst, abs(math.sqrt(float(v @ v)) - 1.0))
        return worst


@dataclass(frozen=True, eq=False)
class ProductState:
    """Mode label plus continuous state blocks.

    z is always present; omega and p exist only in extended systems.
    """

    q: int
    z: np.ndarray
    omega: Optional[np.ndarray] = None
    p: Optional[np.ndarray] = None
    order: Optional[tuple] = None

    @property
    def x(self) -> np.ndarray:
        """Flat continuous state, blocks concatenated in declaration order
        (the manifold's order when built via from_flat)."""
        if self.order is not None:
            return np.concatenate([getattr(self, name) for name in self.order])
        parts = [self.z]
        if self.omega is not None:
            parts.append(self.omega)
        if self.p is not None:
            parts.append(self.p)
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, q: int, x: np.ndarray, m: ManifoldDescriptor) -> "ProductState":
        parts = m.split(x)
        return cls(q=int(q), order=tuple(b.name for b in m.blocks), **parts)


@dataclass(frozen=True)
class HybridSystem:
    """Flow/jump description of a hybrid system.

    All callables take (q, x) with x the flat continuous state.  flow_set
    and jump_set are the predicates for C and D; jump_map returns a
    non-empty ordered list of (q, x) candidates and the first one is taken.
    domain is the predicate for the overall state space X; attractor_dist,
    when provided, measures distance to the attractor and enables the
    stop_dist termination in simulate.
    """

    modes: "ModeSet"
    manifold: ManifoldDescriptor
    flow_map: Callable[[int, np.ndarray], np.ndarray]
    flow_set: Callable[[int, np.ndarray], bool]
    jump_set: Callable[[int, np.ndarray], bool]
    jump_map: Callable[[int, np.ndarray], list]
    domain: Optional[Callable[[int, np.ndarray], bool]] = None
    attractor_dist: Optional[Callable[[int, np.ndarray], float]] = None

    def in_domain(self, q: int, x: np.ndarray) -> bool:
        if self.domain is not None:
            return bool(self.domain(q, x))
        return bool(self.flow_set(q, x)) or bool(self.jump_set(q, x))


class ModeSet:
    """Finite ordered set of integer mode labels."""

    def __init__(self, modes: Sequence[int]):
        modes = tuple(int(m) for m in modes)
        if not modes:
            raise ValueError("mode set must be non-empty")
        if len(set(modes)) != len(modes):
            raise ValueError("mode labels must be distinct")
        self.modes = modes

    def __iter__(self):
        return iter(self.modes)

    def __len__(self):
        return len(self.modes)

    def __contains__(self, q):
        return q in self.modes

    @classmethod
    def range(cls, n: int) -> "ModeSet":
        """Labels 1..n."""
        return cls(tuple(range(1, n + 1)))


@dataclass(frozen=True)
class HybridTime:
    t: float
    j: int


@dataclass
class HybridArc:
    """A simulated solution: packed sample arrays plus jump bookkeeping.

    ts, js, qs, xs hold one entry per sample; jump rows appear twice (the
    pre-jump state and the post-jump state at the same t, j incremented).
    jump_indices are the positions of the post-jump samples.
    """

    ts: np.ndarray
    js: np.ndarray
    qs: np.ndarray
    xs: np.ndarray
    jump_indices: np.ndarray
    termination: str
    manifold: ManifoldDescriptor

    def __len__(self):
        return self.ts.size

    @property
    def samples(self):
        """Ordered list of (HybridTime, ProductState)."""
        m = self.manifold
        return [
            (HybridTime(float(self.ts[i]), int(self.js[i])),
             ProductState.from_flat(int(self.qs[i]), self.xs[i], m))
            for i in range(self.ts.size)
        ]

    @property
    def final(self):
        i = self.ts.size - 1
        return (HybridTime(float(self.ts[i]), int(self.js[i])),
                ProductState.from_flat(int(self.qs[i]), self.xs[i], self.manifold))

    @property
    def jump_count(self) -> int:
        return int(self.js[-1]) if self.js.size else 0

    def sphere_drift(self) -> float:
        worst = 0.0
        for i in range(self.ts.size):
            worst = max(worst, self.manifold.sphere_drift(self.xs[i]))
        return worst


def renormalize(x: ProductState, m: ManifoldDescriptor) -> ProductState:
    """Project sphere-tagged blocks back to unit norm; other blocks untouched."""
    flat = np.array(x.x, dtype=float)
    m.renormalize_inplace(flat)
    return ProductState.from_flat(x.q, flat, m)


def _rk4(f, q, x, h):
    k1 = f(q, x)
    k2 = f(q, x + (0.5 * h) * k1)
    k3 = f(q, x + (0.5 * h) * k2)
    k4 = f(q, x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)


def rk4_step(f, q: int, x: np.ndarray, h: float) -> np.ndarray:
    """One classical fourth-order Runge-Kutta step of ẋ = f(q, x)."""
    return _rk4(f, q, np.asarray(x, dtype=float), float(h))


def _flow_leg(sys, q, x, t0, max_t, step, ts, js, qs, xs, j, stop_dist):
    """Integrate within C from (t0, x) until event, horizon, stop, or failure.

    Appends every accepted sample to the ts/js/qs/xs lists.  Returns
    (t, x, exit) where exit is EXIT_JUMP, EXIT_MAXT, EXIT_FAILURE, or
    _EXIT_ATTR.  On EXIT_JUMP the returned state lies in D with the event
    time localized to within EVENT_TOL seconds.
    """
    f = sys.flow_map
    in_d = sys.jump_set
    renorm = sys.manifold.renormalize_inplace
    adist = sys.attractor_dist
    t = t0
    while max_t - t > 1e-15:
        h = min(step, max_t - t)
        try:
            xn = _rk4(f, q, x, h)
            renorm(xn)
        except ManifoldError:
            return t, x, EXIT_FAILURE
        if not math.isfinite(float(np.sum(xn))):
            return t, x, EXIT_FAILURE
        if in_d(q, xn):
            # bisect the step fraction: lo stays out of D, hi lands in D
            lo, hi, xhi = 0.0, 1.0, xn
            while (hi - lo) * h > EVENT_TOL:
                mid = 0.5 * (lo + hi)
                xm = _rk4(f, q, x, h * mid)
                renorm(xm)
                if in_d(q, xm):
                    hi, xhi = mid, xm
                else:
                    lo = mid
            t = t + h * hi
            x = xhi
            ts.append(t); js.append(j); qs.append(q); xs.append(x)
            return t, x, EXIT_JUMP
        t = t + h
        x = xn
        ts.append(t); js.append(j); qs.append(q); xs.append(x)
        if stop_dist is not None and adist(q, x) <= stop_dist:
            return t, x, _EXIT_ATTR
    return t, x, EXIT_MAXT


def flow_segment(sys: HybridSystem, x0: ProductState, max_t: float, step: float):
    """Flow from x0 through C for up to max_t seconds.

    Returns (segment, exit): segment is a list of (t, ProductState) samples
    starting at (0, x0); exit is EXIT_JUMP, EXIT_MAXT, or EXIT_FAILURE.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    q = x0.q
    x = np.array(x0.x, dtype=float)
    if not sys.flow_set(q, x):
        raise ValueError("x0 is not in the flow set")
    ts, js, qs, xs = [0.0], [0], [q], [x]
    _, _, code = _flow_leg(sys, q, x, 0.0, float(max_t), float(step),
                           ts, js, qs, xs, 0, None)
    m = sys.manifold
    segment = [(t, ProductState.from_flat(qi, xi, m))
               for t, qi, xi in zip(ts, qs, xs)]
    return segment, code


def jump_once(sys: HybridSystem, x: ProductState) -> ProductState:
    """Resolve one jump from x, taking the first jump-map candidate."""
    q = x.q
    flat = np.asarray(x.x, dtype=float)
    if not sys.jump_set(q, flat):
        raise ValueError("x is not in the jump set")
    candidates = sys.jump_map(q, flat)
    if not candidates:
        raise ValueError("jump map returned no candidates")
    qn, xn = candidates[0]
    return ProductState.from_flat(int(qn), np.asarray(xn, dtype=float), sys.manifold)


def simulate(sys: HybridSystem, x0, horizon_t: float,
             horizon_j: int, step: float,
             stop_dist: Optional[float] = None) -> HybridArc:
    """Simulate the hybrid system from x0 (a ProductState or (q, flat) pair).

    Alternates flow legs and jumps with jump priority on C ∩ D.  Terminates
    on the flow horizon, the jump budget, entry into the attractor (when
    stop_dist is given and the system provides attractor_dist), or
    integration failure.  Two jumps separated by zero flow time outside the
    attractor raise ZenoError.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if stop_dist is not None and sys.attractor_dist is None:
        raise ValueError("stop_dist requires attractor_dist on the system")
    if isinstance(x0, tuple):
        x0 = ProductState.from_flat(x0[0], np.asarray(x0[1], dtype=float),
                                    sys.manifold)
    q = x0.q
    x = np.array(x0.x, dtype=float)
    sys.manifold.renormalize_inplace(x)
    if not sys.in_domain(q, x):
        raise ValueError("x0 is outside the domain")

    in_d = sys.jump_set
    adist = sys.attractor_dist
    t = 0.0
    j = 0
    ts, js, qs, xs = [t], [j], [q], [x]
    jump_idx = []
    last_jump_t = None
    termination = None

    if stop_dist is not None and adist(q, x) <= stop_dist:
        termination = TERM_ATTRACTOR

    while termination is None:
        if in_d(q, x):
            if j >= horizon_j:
                termination = TERM_JUMPS
                break
            if last_jump_t is not None and t == last_jump_t:
                if adist is not None and adist(q, x) <= max(stop_dist or 0.0, 1e-9):
                    termination = TERM_ATTRACTOR
                    break
                raise ZenoError(
                    "repeated jump with zero flow time at t=%r, q=%r" % (t, q)
                )
            candidates = sys.jump_map(q, x)
            if not candidates:
                raise ValueError("jump map returned no candidates")
            qn, xn = candidates[0]
            q = int(qn)
            x = np.array(xn, dtype=float)
            j += 1
            ts.append(t); js.append(j); qs.append(q); xs.append(x)
            jump_idx.append(len(ts) - 1)
            last_jump_t = t
            if stop_dist is not None and adist(q, x) <= stop_dist:
                termination = TERM_ATTRACTOR
            continue
        if horizon_t - t <= 1e-15:
            termination = TERM_HORIZON
            break
        t, x, code = _flow_leg(sys, q, x, t, float(horizon_t), float(step),
                               ts, js, qs, xs, j, stop_dist)
        if code == EXIT_FAILURE:
            termination = TERM_FAILURE
        elif code == _EXIT_ATTR:
            termination = TERM_ATTRACTOR
        elif code == EXIT_MAXT:
            termination = TERM_HORIZON
        # EXIT_JUMP falls through to the jump branch on the next pass

    return HybridArc(
        ts=np.asarray(ts, dtype=float),
        js=np.asarray(js, dtype=np.int64),
        qs=np.asarray(qs, dtype=np.int64),
        xs=np.asarray(xs, dtype=float),
        jump_indices=np.asarray(jump_idx, dtype=np.int64),
        termination=termination,
        manifold=sys.manifold,
    )
