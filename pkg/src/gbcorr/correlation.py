"""Bosonic and exchange correlation-energy sums with dual computation paths.

The bosonic contribution is evaluated two independent ways per transfer
momentum k and cross-checked:

* quadrature path: (1/pi) \\int_0^inf F(2 g Lambda_k(t)) dt with
  F(x) = log(1+x) - x and Lambda_k(t) = sum_p lambda_{k,p} /
  (lambda_{k,p}^2 + t^2), by adaptive Gauss-Kronrod on [0, T] plus the
  analytic tail correction -(2 g sum lambda)^2 / (6 T^3);
* trace path: tr(E_k - h_k - P_k) from the reduced eigenproblem.

The exchange contribution is the positive pair sum with the shifted-vertex
potential V_{p+q-k}.  All k-sums run over octahedral orbit representatives
weighted by multiplicity; every reduction is a sequential compensated fold
in canonical representative order, so results are bit-identical for any
worker count.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad as _scipy_quad

from .lattice import (Lune, OrbitTable, ValidationError, fermi_ball,
                      lune as make_lune, lune_lambda_multiset, norm_sq,
                      orbit_representative, orbits)
from .onebody import (NumericalError, build_mode, entry_tables, mode_weight,
                      s_entries, trace_term_from_multiset)
from .potential import PotentialModel

TWO_PI3 = 2.0 * (2.0 * np.pi) ** 3


def default_threads() -> int:
    env = os.environ.get("GBCORR_THREADS")
    if env:
        return max(1, int(env))
    return 1


def _map_ordered(fn, items, threads: int):
    """Per-item tasks into pre-ordered slots; results order == input order."""
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# Lindhard-type lune sum and the F-integral
# ---------------------------------------------------------------------------

def lindhard_sum(ln: Lune, t: float) -> float:
    """Lambda_k(t) = sum over the lune of lambda/(lambda^2 + t^2).

    Compensated summation (exact fsum) in the canonical point order; this is
    the contract surface, hot loops use an equivalent multiset evaluation.
    """
    if ln.size == 0:
        raise ValidationError("lindhard_sum requires a nonempty lune")
    tt = float(t) * float(t)
    return math.fsum(l / (l * l + tt) for l in ln.lambdas.tolist())


# 15-point Kronrod extension of 7-point Gauss on [-1, 1]
_XGK = np.array([
    -0.991455371120813, -0.949107912342759, -0.864864423359769,
    -0.741531185599394, -0.586087235467691, -0.405845151377397,
    -0.207784955007898, 0.0, 0.207784955007898, 0.405845151377397,
    0.586087235467691, 0.741531185599394, 0.864864423359769,
    0.949107912342759, 0.991455371120813])
_WGK = np.array([
    0.022935322010529, 0.063092092629979, 0.104790010322250,
    0.140653259715525, 0.169004726639267, 0.190350578064785,
    0.204432940075298, 0.209482141084728, 0.204432940075298,
    0.190350578064785, 0.169004726639267, 0.140653259715525,
    0.104790010322250, 0.063092092629979, 0.022935322010529])
_WG = np.array([
    0.129484966168870, 0.279705391489277, 0.381830050505119,
    0.417959183673469, 0.381830050505119, 0.279705391489277,
    0.129484966168870])


def adaptive_gauss_kronrod(f, a: float, b: float, tol: float,
                           max_panels: int = 4000):
    """Global-adaptive bisection with the embedded (G7, K15) pair.

    ``f`` maps an array of nodes to an array of values.  The worst panel
    (by |K15 - G7|) is bisected until the summed estimate falls below the
    absolute tolerance.  Fully deterministic: ties break on panel order.
    Returns (integral, error_estimate); raises NumericalError carrying the
    partial value when the panel budget is exhausted.
    """
    import heapq

    def panel(lo, hi):
        mid = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo)
        y = f(mid + half * _XGK)
        k15 = half * float(np.dot(_WGK, y))
        g7 = half * float(np.dot(_WG, y[1::2]))
        return abs(k15 - g7), lo, hi, k15

    serial = 0
    err0, *_ = first = panel(a, b)
    heap = [(-first[0], serial, first)]
    total_err = first[0]
    while total_err > tol and len(heap) < max_panels:
        _, _, (err, lo, hi, val) = heapq.heappop(heap)
        if hi - lo < 1e-14 * (b - a):
            heapq.heappush(heap, (0.0, serial, (err, lo, hi, val)))
            break
        total_err -= err
        mid = 0.5 * (lo + hi)
        for sub in (panel(lo, mid), panel(mid, hi)):
            serial += 1
            heapq.heappush(heap, (-sub[0], serial, sub))
            total_err += sub[0]
    if total_err > tol and len(heap) >= max_panels:
        partial = math.fsum(rec[2][3] for rec in heap)
        raise NumericalError(
            f"adaptive GK exhausted {max_panels} panels at error "
            f"{total_err:.3e} > {tol:.3e}; partial value {partial!r}")
    recs = sorted((rec[2] for rec in heap), key=lambda r: r[1])
    value = math.fsum(r[3] for r in recs)
    err = math.fsum(r[0] for r in recs)
    return value, err


@dataclass(frozen=True)
class BosTerm:
    value: float
    error: float
    T: float
    tail: float


def _lam_multiset(ln: Lune):
    vals2, mults = np.unique(ln.two_lambdas, return_counts=True)
    return vals2.astype(np.float64) / 2.0, mults.astype(np.float64)


def _multisets_for_chunk(k_F: float, kc: np.ndarray):
    """Lambda multisets for a chunk of transfer momenta at once.

    Returns a list of (lam_vals, mults, lune_size) per representative.  The
    ball-vs-representative dot products run as one float matmul (exact for
    these magnitudes, and BLAS-backed unlike integer matmul) and the
    per-column histograms as one strided bincount, which is what makes the
    large-K_max sweeps tractable.  Momenta with |k| > 2 k_F skip the
    membership mask entirely: the whole translated ball lies outside B_F.
    """
    from .lattice import fermi_ball, four_kf_sq
    q4 = four_kf_sq(k_F)
    ball = fermi_ball(k_F).points
    ballf = ball.astype(np.float64)
    m = len(kc)
    k2 = np.einsum("ij,ij->i", kc, kc)
    two_lam = np.rint(2.0 * (ballf @ kc.T.astype(np.float64))
                      ).astype(np.int64) + k2[None, :]    # (N, m)
    if int(k2.min()) > q4:                  # |k| > 2 k_F for the whole chunk
        outside = None                      # every shifted point is outside
        lo = two_lam.min(axis=0)
        sizes = np.full(m, len(ball))
    else:
        n2 = np.einsum("ij,ij->i", ball, ball)
        outside = 4 * (n2[:, None] + two_lam) > q4
        lo = np.where(outside, two_lam, np.int64(1) << 60).min(axis=0)
        sizes = outside.sum(axis=0)
    stride = int(two_lam.max() - lo.min()) + 2
    codes = (two_lam - lo[None, :]) + stride * np.arange(m, dtype=np.int64)[None, :]
    counts = np.bincount(codes.ravel() if outside is None else codes[outside],
                         minlength=stride * m)
    out = []
    for j in range(m):
        seg = counts[stride * j:stride * (j + 1)]
        nz = np.nonzero(seg)[0]
        lam_vals = (nz + lo[j]).astype(np.float64) / 2.0
        out.append((lam_vals, seg[nz].astype(np.float64), int(sizes[j])))
    return out


def _f_integral_panels(lam_vals: np.ndarray, mults: np.ndarray, two_g: float,
                       T: float, tol: float, max_panels: int = 2048):
    """Level-synchronous adaptive (G7, K15) for (1/pi)-less \\int_0^T F.

    All panels of a refinement round are evaluated through one matrix
    product, so the cost per mode stays bounded by a few BLAS calls; the
    refinement decision (split every panel holding more than its
    width-proportional share of the error) is deterministic.
    """
    lam2 = lam_vals * lam_vals
    mlam = mults * lam_vals

    def eval_panels(edges_lo, edges_hi):
        mid = 0.5 * (edges_lo + edges_hi)
        half = 0.5 * (edges_hi - edges_lo)
        t = (mid[:, None] + half[:, None] * _XGK[None, :]).ravel()
        x = two_g * (mlam @ (1.0 / (lam2[:, None] + (t * t)[None, :])))
        y = (np.log1p(x) - x).reshape(-1, 15)
        k15 = half * (y @ _WGK)
        g7 = half * (y[:, 1::2] @ _WG)
        return k15, np.abs(k15 - g7)

    # geometric seed panels resolve the lambda scale before refinement
    lo_scale = max(float(lam_vals[0]) / 4.0, T * 1e-9)
    edges = np.concatenate([[0.0], np.geomspace(lo_scale, T, 8)])
    lo, hi = edges[:-1], edges[1:]
    vals, errs = eval_panels(lo, hi)
    for _ in range(64):
        total_err = float(np.sum(errs))
        if total_err <= tol or len(lo) >= max_panels:
            break
        share = (hi - lo) * (tol / T)
        bad = errs > np.maximum(share, total_err * 1e-4)
        if not np.any(bad):
            bad = errs >= errs.max()
        mid = 0.5 * (lo[bad] + hi[bad])
        new_lo = np.concatenate([lo[~bad], lo[bad], mid])
        new_hi = np.concatenate([hi[~bad], mid, hi[bad]])
        keep_vals, keep_errs = vals[~bad], errs[~bad]
        sub_vals, sub_errs = eval_panels(np.concatenate([lo[bad], mid]),
                                         np.concatenate([mid, hi[bad]]))
        lo, hi = new_lo, new_hi
        vals = np.concatenate([keep_vals, sub_vals])
        errs = np.concatenate([keep_errs, sub_errs])
    else:
        total_err = float(np.sum(errs))
    if total_err > tol and len(lo) >= max_panels:
        raise NumericalError(
            f"bosonic quadrature exhausted {max_panels} panels at error "
            f"{total_err:.3e} > {tol:.3e}; partial value "
            f"{math.fsum(vals[np.argsort(lo)].tolist())!r}")
    order = np.argsort(lo, kind="stable")
    return math.fsum(vals[order].tolist()), float(np.sum(errs))


def _bos_tail(lam_vals, mults, g, T):
    """Analytic tail of (1/pi)-less \\int_T^inf F, exact to O(T^-7)."""
    s1 = float(np.dot(mults, lam_vals))
    s3 = float(np.dot(mults, lam_vals ** 3))
    return (-(2.0 * g * s1) ** 2 / (6.0 * T ** 3)
            + (4.0 * g * g * s1 * s3 + (8.0 / 3.0) * g ** 3 * s1 ** 3)
            / (5.0 * T ** 5))


def bos_terms_for_chunk(k_F: float, beta: float, model: PotentialModel,
                        kc: np.ndarray, multisets, quad_tol: float,
                        t_factor: float = 50.0) -> list:
    """Quadrature bosonic terms for a chunk of orbits in one pass.

    The half-line is sampled at t = lambda_max * u on a u-grid shared by
    the chunk; evaluating each panel across the concatenated multisets of
    all chunk members turns the the per-orbit Lindhard sums into one
    segmented reduction.  Orbits whose embedded-pair error estimate misses
    the tolerance fall back to the per-orbit adaptive integrator.
    """
    m = len(kc)
    k2 = np.einsum("ij,ij->i", kc, kc)
    gs = model.profile_from_norm_sq(k2) * float(k_F) ** (-beta) / TWO_PI3
    sizes = np.array([len(ms[0]) for ms in multisets])
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    lam_all = np.concatenate([ms[0] for ms in multisets])
    ml_all = np.concatenate([ms[1] * ms[0] for ms in multisets])
    lmax = np.array([float(ms[0][-1]) for ms in multisets])
    seg = np.repeat(np.arange(m), sizes)
    rho = lam_all / lmax[seg]
    w = ml_all / (lmax ** 2)[seg]
    u_lo = max(float(rho.min()) / 4.0, 1e-9)
    edges = np.concatenate([[0.0], np.geomspace(u_lo, t_factor, 11)])
    P = len(edges) - 1
    vals = np.empty((m, P))
    errs = np.empty((m, P))
    two_g = 2.0 * gs[:, None]
    for p in range(P):
        mid = 0.5 * (edges[p] + edges[p + 1])
        half = 0.5 * (edges[p + 1] - edges[p])
        u = mid + half * _XGK
        lam_part = np.add.reduceat(
            w[:, None] / (rho[:, None] ** 2 + (u * u)[None, :]), starts, axis=0)
        x = two_g * lam_part
        y = np.log1p(x) - x
        vals[:, p] = half * (y @ _WGK)
        errs[:, p] = half * np.abs(y @ _WGK - y[:, 1::2] @ _WG)
    value = vals.sum(axis=1) * lmax
    err = errs.sum(axis=1) * lmax
    out = []
    for j in range(m):
        if gs[j] == 0.0:
            out.append(BosTerm(0.0, 0.0, 0.0, 0.0))
            continue
        lam_vals, mults, _ = multisets[j]
        T = t_factor * lmax[j]
        if err[j] <= quad_tol:
            v, e = float(value[j]), float(err[j])
        else:
            v, e = _f_integral_panels(lam_vals, mults, 2.0 * gs[j], T, quad_tol)
        tail = _bos_tail(lam_vals, mults, gs[j], T)
        out.append(BosTerm(value=(v + tail) / np.pi, error=e / np.pi, T=T,
                           tail=tail / np.pi))
    return out


def bos_term_from_multiset(lam_vals: np.ndarray, mults: np.ndarray, g: float,
                           quad_tol: float = 1e-13,
                           t_factor: float = 50.0) -> BosTerm:
    """(1/pi) \\int_0^inf F(2 g Lambda(t)) dt for a lambda multiset."""
    if g == 0.0:
        return BosTerm(0.0, 0.0, 0.0, 0.0)
    two_g = 2.0 * g
    T = t_factor * float(lam_vals[-1])
    val, err = _f_integral_panels(lam_vals, mults, two_g, T, quad_tol)
    # analytic tail from F(x) = -x^2/2 + x^3/3 - ... and the large-t expansion
    # Lambda(t) = S1/t^2 - S3/t^4 + O(t^-6); the T^-5 term keeps the residual
    # at O(T^-7), far below the dual-path tolerance even for 1-point lunes
    tail = _bos_tail(lam_vals, mults, g, T)
    return BosTerm(value=(val + tail) / np.pi, error=err / np.pi, T=T,
                   tail=tail / np.pi)


def bos_term(k_F: float, beta: float, model: PotentialModel, k,
             quad_tol: float = 1e-13) -> BosTerm:
    """Per-k bosonic term (quadrature path); value <= 0."""
    g = mode_weight(k_F, beta, model, k)
    lam_vals, mults, _ = lune_lambda_multiset(k_F, k)
    return bos_term_from_multiset(lam_vals, mults, g, quad_tol)


def pair_inverse_sum_multiset(lam_vals: np.ndarray, mults: np.ndarray) -> float:
    """sum_{p,q in L_k} 1/(lambda_p + lambda_q) via the multiset."""
    denom = lam_vals[:, None] + lam_vals[None, :]
    return float(np.sum(np.outer(mults, mults) / denom))


def pair_inverse_sum(ln: Lune) -> float:
    lam_vals, mults = _lam_multiset(ln)
    return pair_inverse_sum_multiset(lam_vals, mults)


# ---------------------------------------------------------------------------
# Orbit-reduced k sums
# ---------------------------------------------------------------------------

def _integral_tail(model: PotentialModel, K: float) -> float:
    """4 pi \\int_K^inf V(r)^2 dr (continuum surrogate for shell sums)."""
    if model.coupling == 0.0:
        return 0.0
    val, _ = _scipy_quad(lambda r: model.profile(np.array([r]))[0] ** 2,
                         K, np.inf, limit=200)
    return 4.0 * np.pi * val


def _tail_estimate(k_F: float, beta: float, model: PotentialModel,
                   K_max: float, sign: float) -> float:
    """Second-order surrogate for the |k| > K_max remainder.

    Uses |L_k| ~ N and lambda_p + lambda_q ~ |k|^2 beyond 2 k_F, then
    replaces the shell sum by its continuum integral.
    """
    N = fermi_ball(k_F).N
    pref = float(k_F) ** (-2.0 * beta) / (4.0 * (2.0 * np.pi) ** 6)
    return sign * pref * N * N * _integral_tail(model, max(K_max, 2.0 * k_F))


@dataclass
class OrbitRow:
    k: tuple[int, int, int]
    multiplicity: int
    lune_size: int
    bos_term: float = 0.0
    ex_term: float = 0.0
    trace_term: float = 0.0


def _orbit_sweep(k_F: float, beta: float, model: PotentialModel, K_max: float,
                 per_orbit, threads: int, chunk: int = 64):
    """Run ``per_orbit(kv, g, lam_vals, mults, size)`` over every orbit
    representative with |k| <= K_max; returns (table, results-in-order)."""
    if K_max < 1:
        raise ValidationError("K_max must be >= 1")
    table = orbits(K_max)
    reps = table.representatives
    results = []
    for c0 in range(0, len(reps), chunk):
        kc = reps[c0:c0 + chunk]
        multisets = _multisets_for_chunk(k_F, kc)

        def work(j):
            kv = tuple(int(c) for c in kc[j])
            g = mode_weight(k_F, beta, model, kv)
            lam_vals, mults, size = multisets[j]
            return per_orbit(kv, g, lam_vals, mults, size)

        results.extend(_map_ordered(work, range(len(kc)), threads))
    return table, results


def e_corr_bos(k_F: float, beta: float, model: PotentialModel, K_max: float,
               quad_tol: float = 1e-13, threads: int | None = None,
               with_trace: bool = False, chunk: int = 64):
    """Bosonic correlation sum over |k| <= K_max (orbit reduced).

    Returns (value, tail_estimate, rows, max_quad_error).  With
    ``with_trace`` each row also carries tr(E_k - h_k - P_k) from the
    independent reduced-eigenproblem path.
    """
    if K_max < 1:
        raise ValidationError("K_max must be >= 1")
    threads = default_threads() if threads is None else threads
    table = orbits(K_max)
    reps = table.representatives
    rows = []
    max_err = 0.0
    for c0 in range(0, len(reps), chunk):
        kc = reps[c0:c0 + chunk]
        multisets = _multisets_for_chunk(k_F, kc)
        terms = bos_terms_for_chunk(k_F, beta, model, kc, multisets, quad_tol)

        def work(j):
            if not with_trace:
                return 0.0
            kv = tuple(int(c) for c in kc[j])
            lam_vals, mults, size = multisets[j]
            g = mode_weight(k_F, beta, model, kv)
            return trace_term_from_multiset(lam_vals, mults, g, size)

        traces = _map_ordered(work, range(len(kc)), threads)
        for j in range(len(kc)):
            rows.append(OrbitRow(
                k=tuple(int(c) for c in kc[j]),
                multiplicity=int(table.multiplicities[c0 + j]),
                lune_size=multisets[j][2], bos_term=terms[j].value,
                trace_term=traces[j]))
            max_err = max(max_err, terms[j].error)
    value = math.fsum(r.multiplicity * r.bos_term for r in rows)
    tail = _tail_estimate(k_F, beta, model, K_max, sign=-1.0)
    return value, tail, rows, max_err


def e_corr_bos_trace(k_F: float, beta: float, model: PotentialModel,
                     K_max: float, threads: int | None = None) -> float:
    """Trace-formula path for the bosonic sum (independent of quadrature)."""
    threads = default_threads() if threads is None else threads

    def per_orbit(kv, g, lam_vals, mults, size):
        return trace_term_from_multiset(lam_vals, mults, g, size)

    table, terms = _orbit_sweep(k_F, beta, model, K_max, per_orbit, threads)
    return math.fsum(m * t for m, t in zip(table.multiplicities.tolist(), terms))


def second_order(k_F: float, beta: float, model: PotentialModel,
                 K_max: float, threads: int | None = None) -> float:
    """-(1/4(2pi)^6) sum_k (V_k k_F^{-beta})^2 sum_{p,q} 1/(lambda_p+lambda_q).

    Equals -sum_k g_k^2 * pair sum; the quadratic Taylor term of the
    F-integral and the k-tail estimator.
    """
    threads = default_threads() if threads is None else threads

    def per_orbit(kv, g, lam_vals, mults, size):
        if g == 0.0:
            return 0.0
        return -g * g * pair_inverse_sum_multiset(lam_vals, mults)

    table, terms = _orbit_sweep(k_F, beta, model, K_max, per_orbit, threads)
    return math.fsum(m * t for m, t in zip(table.multiplicities.tolist(), terms))


# ---------------------------------------------------------------------------
# Exchange sum
# ---------------------------------------------------------------------------

def _exchange_pair_sum(k_F: float, model: PotentialModel, kv, ln: Lune,
                       chunk: int = 256) -> float:
    """sum_{p,q in L_k} V_{p+q-k} / (lambda_p + lambda_q), p<->q halved."""
    pts = ln.points
    lam = ln.lambdas
    n = len(pts)
    k_arr = np.asarray(kv, dtype=np.int64)
    n2 = np.einsum("ij,ij->i", pts, pts)
    pk = pts @ k_arr
    k2 = int(k_arr @ k_arr)
    total = 0.0
    for i0 in range(0, n, chunk):
        i1 = min(i0 + chunk, n)
        dot = pts[i0:i1] @ pts.T
        m2 = (n2[i0:i1, None] + n2[None, :] + k2 + 2 * dot
              - 2 * pk[i0:i1, None] - 2 * pk[None, :])
        if np.any(m2 == 0):
            raise NumericalError("p + q - k = 0 inside a lune (impossible)")
        vals = model.profile_from_norm_sq(m2) / (lam[i0:i1, None] + lam[None, :])
        # each unordered pair j > i counted twice, the diagonal once
        cols = np.arange(n)[None, :]
        rows = np.arange(i0, i1)[:, None]
        w = np.where(cols > rows, 2.0, np.where(cols == rows, 1.0, 0.0))
        total += float(np.sum(vals * w))
    return total


def e_corr_ex(k_F: float, beta: float, model: PotentialModel, K_max: float,
              threads: int | None = None):
    """Exchange contribution over |k| <= K_max; value >= 0.

    Returns (value, tail_estimate, rows).
    """
    if K_max < 1:
        raise ValidationError("K_max must be >= 1")
    threads = default_threads() if threads is None else threads
    table = orbits(K_max)
    pref = float(k_F) ** (-2.0 * beta) / (4.0 * (2.0 * np.pi) ** 6)

    def work(idx: int):
        kv = tuple(int(c) for c in table.representatives[idx])
        vk = model.profile_from_norm_sq(np.array([norm_sq(kv)]))[0]
        ln = make_lune(k_F, kv)
        if vk == 0.0:
            return ln.size, 0.0
        return ln.size, pref * vk * _exchange_pair_sum(k_F, model, kv, ln)

    results = _map_ordered(work, range(len(table.representatives)), threads)
    rows = [OrbitRow(k=tuple(int(c) for c in table.representatives[i]),
                     multiplicity=int(table.multiplicities[i]),
                     lune_size=size, ex_term=term)
            for i, (size, term) in enumerate(results)]
    value = math.fsum(r.multiplicity * r.ex_term for r in rows)
    tail = _tail_estimate(k_F, beta, model, K_max, sign=+1.0)
    return value, tail, rows


def e_corr_ex_brute_force(k_F: float, beta: float, model: PotentialModel,
                          K_max: float) -> float:
    """Independent oracle: plain double loop over every k (no orbit
    reduction, no pair symmetry).  Slow; for verification at small k_F."""
    from itertools import product
    pref = float(k_F) ** (-2.0 * beta) / (4.0 * (2.0 * np.pi) ** 6)
    r = int(math.floor(K_max))
    total = []
    for kx, ky, kz in product(range(-r, r + 1), repeat=3):
        kv = (kx, ky, kz)
        if kv == (0, 0, 0) or norm_sq(kv) > K_max * K_max + 1e-9:
            continue
        vk = model.profile_from_norm_sq(np.array([norm_sq(kv)]))[0]
        ln = make_lune(k_F, kv)
        acc = []
        for i in range(ln.size):
            for j in range(ln.size):
                m = ln.points[i] + ln.points[j] - np.asarray(kv)
                vm = model.profile_from_norm_sq(np.array([int(m @ m)]))[0]
                acc.append(vm / (ln.lambdas[i] + ln.lambdas[j]))
        total.append(pref * vk * math.fsum(acc))
    return math.fsum(total)


# ---------------------------------------------------------------------------
# Second-quantized exchange cross-check (exact S matrices)
# ---------------------------------------------------------------------------

def _pack(pts: np.ndarray, off: int = 512) -> np.ndarray:
    return ((pts[:, 0] + off) * (2 * off) + (pts[:, 1] + off)) * (2 * off) \
        + (pts[:, 2] + off)


class _ShiftedEntrySource:
    """Cache of per-mode entry tables keyed by the orbit of the shifted
    momentum; S entries come from the rank-one integral representation."""

    def __init__(self, k_F: float, beta: float, model: PotentialModel):
        self.k_F = k_F
        self.beta = beta
        self.model = model
        self._tables = {}

    def table(self, kv: tuple[int, int, int]):
        rep = orbit_representative(kv)
        tab = self._tables.get(rep)
        if tab is None:
            ln = make_lune(self.k_F, rep)
            g = mode_weight(self.k_F, self.beta, self.model, rep)
            vals2, mults = np.unique(ln.two_lambdas, return_counts=True)
            sm_like = _MultisetMode(g, vals2.astype(np.float64) / 2.0,
                                    mults.astype(np.float64))
            tab = entry_tables(sm_like)
            self._tables[rep] = tab
        return tab


@dataclass(frozen=True)
class _MultisetMode:
    g: float
    lam_vals: np.ndarray
    mults: np.ndarray


def eb6_exchange(k_F: float, beta: float, model: PotentialModel, K_max: float,
                 threads: int | None = None):
    """E_B6 = sum_k sum_{p,q in L_k} 2 lambda_{k,p} <S_k e_p, e_q>
    <e_q, S_{p+q-k} e_p>, with exact S matrices.

    Returns (value, deviation) where deviation = |E_B6 - E_corr_ex| at the
    same K_max.  Uses p,q in L_{p+q-k} <=> p,q in L_k; the shifted lambda
    values follow from |p - (p+q-k)| = |q - k|.
    """
    threads = default_threads() if threads is None else threads
    table = orbits(K_max)
    src = _ShiftedEntrySource(k_F, beta, model)

    def work(idx: int):
        kv = tuple(int(c) for c in table.representatives[idx])
        mode = build_mode(k_F, beta, model, kv)
        n = mode.size
        if n == 0 or mode.g == 0.0:
            return 0.0
        pts = mode.lune.points
        lam = mode.h_diag
        n2 = np.einsum("ij,ij->i", pts, pts).astype(np.float64)
        hole2 = n2 - 2.0 * lam            # |p - k|^2
        # pair grid: index i == p, index j == q
        kp = (pts[:, None, :] + pts[None, :, :]
              - np.asarray(kv, dtype=np.int64)[None, None, :])
        lam_p_sh = 0.5 * (n2[:, None] - hole2[None, :])   # lambda_{k',p}
        lam_q_sh = 0.5 * (n2[None, :] - hole2[:, None])   # lambda_{k',q}
        weight = 2.0 * lam[:, None] * mode.S.T            # 2 lam_p S_k[q,p]
        codes = _pack(kp.reshape(-1, 3))
        order = np.argsort(codes, kind="stable")
        codes_sorted = codes[order]
        bounds = np.flatnonzero(np.r_[True, codes_sorted[1:] != codes_sorted[:-1],
                                      True])
        flat_lp = lam_p_sh.ravel()[order]
        flat_lq = lam_q_sh.ravel()[order]
        flat_w = weight.ravel()[order]
        kp_flat = kp.reshape(-1, 3)
        acc = []
        for b0, b1 in zip(bounds[:-1], bounds[1:]):
            kprime = tuple(int(c) for c in kp_flat[order[b0]])
            tab = src.table(kprime)
            if tab.g == 0.0:
                continue
            sq = s_entries(tab, flat_lq[b0:b1], flat_lp[b0:b1])
            acc.append(float(np.dot(flat_w[b0:b1], sq)))
        return math.fsum(acc)

    terms = _map_ordered(work, range(len(table.representatives)), threads)
    value = math.fsum(m * t for m, t in zip(table.multiplicities.tolist(), terms))
    ex_value, _, _ = e_corr_ex(k_F, beta, model, K_max, threads=threads)
    return value, abs(value - ex_value)


# ---------------------------------------------------------------------------
# Report assembly and serialization
# ---------------------------------------------------------------------------

@dataclass
class CorrelationReport:
    k_F: float
    beta: float
    model: dict
    K_max_bos: float
    K_max_ex: float
    e_bos_quadrature: float = 0.0
    e_bos_trace: float = 0.0
    e_ex: float = 0.0
    e_second_order: float = 0.0
    e_b6: float = 0.0
    tail_estimate_bos: float = 0.0
    tail_estimate_ex: float = 0.0
    max_quad_error: float = 0.0
    dual_path_max_dev: float = 0.0
    rows: list = field(default_factory=list)

    def validate_invariants(self):
        if self.e_bos_quadrature > 1e-15 or self.e_bos_trace > 1e-15:
            raise NumericalError("bosonic contribution must be <= 0")
        if self.e_ex < -1e-15:
            raise NumericalError("exchange contribution must be >= 0")


def compute_report(k_F: float, beta: float, model: PotentialModel,
                   kmax_factor_bos: float = 4.0, kmax_factor_ex: float = 2.0,
                   quad_tol: float = 1e-10, threads: int | None = None,
                   with_eb6: bool = False) -> CorrelationReport:
    """Run every correlation path for one k_F and assemble the report."""
    K_bos = max(1.0, kmax_factor_bos * k_F)
    K_ex = max(1.0, kmax_factor_ex * k_F)
    bos, tail_bos, rows_bos, max_err = e_corr_bos(
        k_F, beta, model, K_bos, quad_tol, threads, with_trace=True)
    trace_total = math.fsum(r.multiplicity * r.trace_term for r in rows_bos)
    exch, tail_ex, rows_ex = e_corr_ex(k_F, beta, model, K_ex, threads)
    ex_by_k = {r.k: r.ex_term for r in rows_ex}
    for r in rows_bos:
        r.ex_term = ex_by_k.get(r.k, 0.0)
    so = second_order(k_F, beta, model, K_bos, threads)
    rep = CorrelationReport(
        k_F=float(k_F), beta=float(beta),
        model={"kind": model.kind, "coupling": model.coupling,
               "param": model.param},
        K_max_bos=K_bos, K_max_ex=K_ex,
        e_bos_quadrature=bos, e_bos_trace=trace_total, e_ex=exch,
        e_second_order=so, tail_estimate_bos=tail_bos, tail_estimate_ex=tail_ex,
        max_quad_error=max_err, rows=rows_bos,
        dual_path_max_dev=max(
            (abs(r.bos_term - r.trace_term) for r in rows_bos), default=0.0))
    if with_eb6:
        rep.e_b6, _ = eb6_exchange(k_F, beta, model, K_ex, threads)
    rep.validate_invariants()
    return rep


def fmt17(x: float) -> str:
    return format(float(x), ".17g")


def report_csv(rep: CorrelationReport) -> str:
    lines = ["kx,ky,kz,multiplicity,lune_size,bos_term,ex_term,trace_term"]
    for r in rep.rows:
        lines.append(",".join([str(r.k[0]), str(r.k[1]), str(r.k[2]),
                               str(r.multiplicity), str(r.lune_size),
                               fmt17(r.bos_term), fmt17(r.ex_term),
                               fmt17(r.trace_term)]))
    return "\r\n".join(lines) + "\r\n"


def report_json(rep: CorrelationReport) -> str:
    d = {k: v for k, v in rep.__dict__.items() if k != "rows"}
    d["n_orbits"] = len(rep.rows)
    return json.dumps(d, indent=2, sort_keys=True) + "\n"
