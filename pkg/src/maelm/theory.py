"""Numerical checks of the residual contraction argument for self-attention.

Real-token rows ``H_R`` are mixed with ``[MASK]`` rows built as
``H_M = U H_R`` (rows of ``U`` sum to one). One single-head attention layer
maps ``[H_R; H_M]`` to ``H'``; the residual of ``H'_R`` around the
constructed vector ``h'`` should shrink cubically in the composite norm.

All instances here are synthetic. Nothing is extracted from trained models.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rank import ResidualDecomposition, norm_composite, norm_l1, norm_linf, residual_decompose

REGIME_LIMIT = 1.25  # exp(x) <= 1 + 2x holds on [0, ~1.2564]
ROW_SUM_TOL = 1e-12
CONSTRUCTION_TOL = 1e-12
BOUND_RTOL = 1e-9
BOUND_ATOL = 1e-12


class ConstructionError(ValueError):
    pass


@dataclass(frozen=True)
class TheoremInstance:
    h_r: np.ndarray  # [n, d]
    u: np.ndarray  # [m, n]
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    def __post_init__(self):
        sums = self.u.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > ROW_SUM_TOL):
            raise ConstructionError(f"rows of U must sum to 1 (worst {np.abs(sums - 1).max():.3e})")
        d = self.h_r.shape[1]
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape[0] != d:
                raise ConstructionError(f"{name} has {getattr(self, name).shape[0]} rows, expected {d}")

    @property
    def d(self) -> int:
        return self.h_r.shape[1]

    @property
    def wqk(self) -> np.ndarray:
        return self.wq @ self.wk.T / math.sqrt(self.d)

    @property
    def wvo(self) -> np.ndarray:
        return self.wv @ self.wo

    @property
    def h_m(self) -> np.ndarray:
        return self.u @ self.h_r


def compute_epsilon(inst: TheoremInstance) -> float:
    """``|W^QK|_1 * |W^VO|_{1,inf} * |U|_inf * (1 + |U|_inf)``."""
    u_inf = norm_linf(inst.u)
    return norm_l1(inst.wqk) * norm_composite(inst.wvo) * u_inf * (1.0 + u_inf)


@dataclass
class TheoremTrace:
    s_rr: np.ndarray
    s_rm: np.ndarray
    z: np.ndarray  # diagonal of Z
    a_r: np.ndarray
    f: np.ndarray
    f_prime: np.ndarray
    f_tilde: np.ndarray
    g: np.ndarray
    g_prime: np.ndarray
    c: np.ndarray
    d: np.ndarray  # diagonal of D, per-row spread of F~
    r: np.ndarray
    h_prime: np.ndarray
    h_prime_r: np.ndarray
    h_prime_m: np.ndarray
    r_prime: np.ndarray

    def to_json(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in self.__dict__.items()}

    def dump(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json()), encoding="utf-8")
        return path


@dataclass
class StepResult:
    trace: TheoremTrace
    holds: bool
    in_regime: bool
    epsilon: float
    lhs: float  # composite norm of R'
    rhs: float  # 4 eps |R|^3
    sandwich: bool  # -D1r^T R W^VO <= R' <= 2 D1r^T R W^VO entrywise
    mixing_sandwich: bool  # (I-D)1r^T <= Z^-1(S_RR + S_RM U) <= (I+2D)1r^T entrywise
    u_nonnegative: bool

    @property
    def next_residual(self) -> ResidualDecomposition:
        return ResidualDecomposition.of(self.trace.r_prime, self.trace.h_prime)


def verify_theorem_step(
    inst: TheoremInstance,
    decomp: ResidualDecomposition | None = None,
    h_m: np.ndarray | None = None,
) -> StepResult:
    """Run one attention layer and compare the residual against its bound.

    ``decomp`` defaults to the column-mean split of ``H_R``. ``h_m`` may be
    passed to check an externally built mask block; it must equal
    ``U H_R`` to within 1e-12.
    """
    h_r = inst.h_r
    if h_m is None:
        h_m = inst.h_m
    elif np.abs(h_m - inst.u @ h_r).max(initial=0.0) > CONSTRUCTION_TOL:
        raise ConstructionError("mask rows are not U times the real rows")
    if decomp is None:
        decomp = residual_decompose(h_r)
    elif np.abs(decomp.r + decomp.h - h_r).max(initial=0.0) > CONSTRUCTION_TOL * max(1.0, np.abs(h_r).max()):
        raise ConstructionError("residual decomposition does not reconstruct H_R")
    R, h = decomp.r, decomp.h
    wqk, wvo, u = inst.wqk, inst.wvo, inst.u
    n = h_r.shape[0]

    full = np.vstack([h_r, h_m])
    logits = h_r @ wqk @ full.T
    shift = logits.max(axis=1, keepdims=True)
    s = np.exp(logits - shift)
    s_rr, s_rm = s[:, :n], s[:, n:]
    z = s.sum(axis=1)
    a_r = s / z[:, None]
    h_prime_r = a_r @ full @ wvo
    logits_m = h_m @ wqk @ full.T
    a_m = np.exp(logits_m - logits_m.max(axis=1, keepdims=True))
    a_m /= a_m.sum(axis=1, keepdims=True)
    h_prime_m = a_m @ full @ wvo

    f = R @ wqk @ R.T
    f_prime = f @ u.T
    f_tilde = np.hstack([f, f_prime])
    g = h @ wqk @ R.T
    g_prime = g @ u.T
    c = R @ wqk @ h + h @ wqk @ h
    spread = f_tilde.max(axis=1) - f_tilde.min(axis=1)
    eg, egp = np.exp(g - g.max()), np.exp(g_prime - g.max())
    g_plus = eg.sum() + egp.sum()
    r = (eg + egp @ u) / g_plus
    h_prime = r @ R @ wvo + h @ wvo
    r_prime = h_prime_r - h_prime[None, :]

    eps = compute_epsilon(inst)
    lhs = norm_composite(r_prime)
    rhs = 4.0 * eps * norm_composite(R) ** 3
    holds = lhs <= rhs * (1.0 + BOUND_RTOL) + BOUND_ATOL
    in_regime = bool(spread.max(initial=0.0) <= REGIME_LIMIT)

    scale = BOUND_ATOL * max(1.0, np.abs(h_prime_r).max())
    band = np.outer(spread, r @ R @ wvo)
    sandwich = bool(np.all(-band - scale <= r_prime) and np.all(r_prime <= 2.0 * band + scale))
    mix = (s_rr + s_rm @ u) / z[:, None]
    base = np.outer(np.ones(n), r)
    mixing = bool(
        np.all(base * (1.0 - spread)[:, None] - BOUND_ATOL <= mix)
        and np.all(mix <= base * (1.0 + 2.0 * spread)[:, None] + BOUND_ATOL)
    )

    trace = TheoremTrace(
        s_rr=s_rr, s_rm=s_rm, z=z, a_r=a_r, f=f, f_prime=f_prime, f_tilde=f_tilde,
        g=g, g_prime=g_prime, c=c, d=spread, r=r, h_prime=h_prime,
        h_prime_r=h_prime_r, h_prime_m=h_prime_m, r_prime=r_prime,
    )
    return StepResult(trace, bool(holds), in_regime, eps, lhs, rhs, sandwich, mixing, bool(np.all(u >= 0)))


def refresh_mixing(h_r: np.ndarray, h_m: np.ndarray) -> np.ndarray:
    """Solve ``U [H_R | 1] = [H_M | 1]`` and rescale rows to sum to one.

    Raises :class:`ConstructionError` when ``H_M`` is not reachable from the
    row space of ``H_R`` (plus the all-ones direction).
    """
    n, m = h_r.shape[0], h_m.shape[0]
    x = np.hstack([h_r, np.ones((n, 1))])
    y = np.hstack([h_m, np.ones((m, 1))])
    ut = np.linalg.lstsq(x.T, y.T, rcond=None)[0]
    u = ut.T
    err = np.abs(u @ x - y).max()
    if err > 1e-9 * max(1.0, np.abs(y).max()):
        raise ConstructionError(f"mask rows leave the real-row span (reconstruction error {err:.3e})")
    return u / u.sum(axis=1, keepdims=True)


@dataclass
class DepthResult:
    holds: bool
    in_regime: bool
    norms: list[float]  # composite residual norm, layer 0..L
    epsilons: list[float]
    bound: float
    contraction: float  # 4 eps_bar |R^0|^2
    steps: list[StepResult] = field(repr=False, default_factory=list)

    @property
    def eps_bar(self) -> float:
        return max(self.epsilons)

    @property
    def strictly_decreasing(self) -> bool:
        return all(b < a for a, b in zip(self.norms, self.norms[1:]))


def verify_theorem_depth(h_r0: np.ndarray, u0: np.ndarray, layers) -> DepthResult:
    """Chain single-layer checks through ``layers`` of ``(W^Q, W^K, W^V, W^O)``.

    Each layer's residual is the previous layer's constructed ``R'`` around
    ``h'``; ``U`` is re-derived from the previous layer's outputs. The final
    composite norm is compared with ``(4 eps_bar)^((3^L - 1)/2) |R^0|^(3^L)``.
    """
    if not layers:
        raise ValueError("need at least one layer")
    decomp = residual_decompose(h_r0)
    h_r, u = np.asarray(h_r0, dtype=np.float64), np.asarray(u0, dtype=np.float64)
    norms = [decomp.composite]
    steps: list[StepResult] = []
    for i, (wq, wk, wv, wo) in enumerate(layers):
        if i:
            u = refresh_mixing(h_r, steps[-1].trace.h_prime_m)
        res = verify_theorem_step(TheoremInstance(h_r, u, wq, wk, wv, wo), decomp)
        steps.append(res)
        decomp = res.next_residual
        h_r = res.trace.h_prime_r
        norms.append(decomp.composite)
    eps_bar = max(s.epsilon for s in steps)
    depth = len(layers)
    r0 = norms[0]
    bound = (4.0 * eps_bar) ** ((3**depth - 1) // 2) * r0 ** (3**depth)
    holds = norms[-1] <= bound * (1.0 + BOUND_RTOL) + BOUND_ATOL
    return DepthResult(
        holds=bool(holds),
        in_regime=all(s.in_regime for s in steps),
        norms=norms,
        epsilons=[s.epsilon for s in steps],
        bound=bound,
        contraction=4.0 * eps_bar * r0**2,
        steps=steps,
    )


# --------------------------------------------------------------------------
# seeded synthetic instances
# --------------------------------------------------------------------------

_SHRINK = (1.0, 0.5, 0.25, 0.1, 0.05, 0.02, 0.01, 0.005, 0.002, 0.001)


def _weights(rng: np.random.Generator, d: int, scale: float = 1.0) -> tuple[np.ndarray, ...]:
    return tuple(rng.normal(size=(d, d)) * (scale / math.sqrt(d)) for _ in range(4))


def random_instance(seed: int, max_n: int = 8, max_m: int = 4, max_d: int = 16) -> TheoremInstance:
    """Seeded instance with nonnegative ``U``, shrunk until the spread regime holds.

    The residual around the column mean is scaled down by the first factor
    in a fixed ladder that puts every row spread of ``F~`` within 1.25.
    """
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, max_n + 1))
    m = int(rng.integers(1, max_m + 1))
    d = int(rng.integers(2, max_d + 1))
    h = rng.normal(size=d)
    resid = rng.normal(size=(n, d))
    resid -= resid.mean(axis=0)
    u = rng.dirichlet(np.ones(n), size=m)
    u /= u.sum(axis=1, keepdims=True)
    w = _weights(rng, d)
    inst = None
    for s in _SHRINK:
        inst = TheoremInstance(h + s * resid, u, *w)
        if _spread(inst) <= REGIME_LIMIT:
            break
    return inst


def _spread(inst: TheoremInstance) -> float:
    R = residual_decompose(inst.h_r).r
    f = R @ inst.wqk @ R.T
    ft = np.hstack([f, f @ inst.u.T])
    return float((ft.max(axis=1) - ft.min(axis=1)).max())


def wide_spread_instance(seed: int) -> TheoremInstance:
    """A deliberately large-residual instance whose spread exceeds the regime."""
    rng = np.random.default_rng(seed)
    n, m, d = 6, 3, 8
    u = rng.dirichlet(np.ones(n), size=m)
    u /= u.sum(axis=1, keepdims=True)
    return TheoremInstance(rng.normal(size=(n, d)) * 5.0, u, *_weights(rng, d, 2.0))


def random_chain(seed: int, depth: int = 3, max_n: int = 8, max_m: int = 4, max_d: int = 16):
    """Seeded depth chain whose weights are shrunk until ``4 eps_bar |R^0|^2 < 1``.

    Shrinking weights rather than the residual keeps every layer's residual
    far above double-precision rounding, so contraction is observable.
    Returns ``(H_R^0, U^0, layers, result)``.
    """
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, max_n + 1))
    m = int(rng.integers(1, max_m + 1))
    d = int(rng.integers(n, max_d + 1))  # keeps H_R full row rank so U can be refreshed
    h = rng.normal(size=d)
    resid = rng.normal(size=(n, d))
    resid -= resid.mean(axis=0)
    u = rng.dirichlet(np.ones(n), size=m)
    u /= u.sum(axis=1, keepdims=True)
    base = [_weights(rng, d) for _ in range(depth)]
    h_r0 = h + resid
    result = layers = None
    for s in _SHRINK:
        layers = [tuple(w * s for w in ws) for ws in base]
        result = verify_theorem_depth(h_r0, u, layers)
        if result.contraction < 1.0 and result.in_regime:
            break
    return h_r0, u, layers, result


@dataclass
class SweepSummary:
    total: int
    in_regime: int
    hold: int
    fail: int
    sandwich_fail: int
    out_of_regime: int
    depth_total: int = 0
    depth_pass: int = 0

    def line(self) -> str:
        return f"{self.in_regime} in-regime, {self.hold} hold, {self.fail} fail"

    def to_json(self) -> dict:
        return dict(self.__dict__)


def theorem_sweep(seeds: int, depth_chains: int = 0, first_seed: int = 0) -> tuple[SweepSummary, list[dict]]:
    """Single-step checks over ``seeds`` instances plus optional depth chains.

    Out-of-regime instances are counted separately and never as failures.
    """
    rows = []
    in_regime = hold = fail = sandwich_fail = 0
    for seed in range(first_seed, first_seed + seeds):
        res = verify_theorem_step(random_instance(seed))
        if res.in_regime:
            in_regime += 1
            hold += res.holds
            fail += not res.holds
            sandwich_fail += not res.sandwich
        rows.append({
            "seed": seed, "in_regime": res.in_regime, "holds": res.holds,
            "sandwich": res.sandwich, "mixing_sandwich": res.mixing_sandwich,
            "lhs": res.lhs, "rhs": res.rhs, "epsilon": res.epsilon,
        })
    depth_pass = 0
    for seed in range(first_seed, first_seed + depth_chains):
        *_, res = random_chain(seed)
        ok = res.holds and res.in_regime and res.contraction < 1 and res.strictly_decreasing
        depth_pass += ok
        rows.append({
            "chain_seed": seed, "holds": res.holds, "in_regime": res.in_regime,
            "contraction": res.contraction, "norms": res.norms, "bound": res.bound,
            "strictly_decreasing": res.strictly_decreasing,
        })
    summary = SweepSummary(seeds, in_regime, hold, fail, sandwich_fail, seeds - in_regime, depth_chains, depth_pass)
    return summary, rows
