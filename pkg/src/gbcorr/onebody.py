"""Per-mode one-body operators on l^2(L_k).

For each momentum transfer k the mode carries the diagonal excitation
operator h (entries lambda_{k,p}), the rank-one interaction P = |v><v| with
constant entries <e_p, v> = sqrt(g), g = V_k k_F^{-beta} / (2 (2pi)^3), and
the derived family

    E         = (h^{1/2} (h + 2P) h^{1/2})^{1/2} = (h^2 + 2 P_w)^{1/2},
    C         = (h^{-1/2} E^{1/2} + h^{1/2} E^{-1/2}) / 2,
    S         = (h^{-1/2} E^{1/2} - h^{1/2} E^{-1/2}) / 2,
    eta       = E^{-3/2} h^{1/2} w,     w = g * (1, ..., 1),

where w = h^{1/2}-weighted rank-one vector, w_p = sqrt(lambda_p * g).

Two independent construction paths are provided and cross-checked:

* ``eigen``             -- symmetric eigendecomposition of h^2 + 2 P_w;
* ``rank_one_integral`` -- the fourth-root-of-a-rank-one-perturbation
  integral formulas driven by the Sherman-Morrison resolvent.

Because v is constant on the lune, each distinct-lambda block couples to the
rank-one update through a single vector: the nontrivial spectrum lives in an
r x r reduced problem (r = number of distinct lambda values).  The
``SpectralMode`` path exploits this for traces and individual matrix entries
at a cost independent of |L_k|, and is tested against the dense path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.integrate import quad_vec

from .lattice import Lune, ValidationError, lune as make_lune
from .potential import PotentialModel, v_hat

TWO_PI3 = 2.0 * (2.0 * np.pi) ** 3


class NumericalError(RuntimeError):
    """A numerical invariant failed (spurious negative eigenvalue, quadrature
    non-convergence); carries the achieved error estimate when available."""


def mode_weight(k_F: float, beta: float, model: PotentialModel, k) -> float:
    """g = V_k k_F^{-beta} / (2 (2pi)^3), the squared entry of v_k."""
    return v_hat(model, k) * float(k_F) ** (-beta) / TWO_PI3


@dataclass(frozen=True)
class ModeOperators:
    """Dense per-mode operator bundle (immutable after construction)."""

    k_F: float
    beta: float
    k: tuple[int, int, int]
    lune: Lune
    g: float
    in_S: bool
    h_diag: np.ndarray
    v: np.ndarray
    E: np.ndarray
    E_half: np.ndarray
    E_inv_half: np.ndarray
    C: np.ndarray
    S: np.ndarray
    eta: np.ndarray
    v_h_inv_v: float

    @property
    def size(self) -> int:
        return len(self.h_diag)


def _clamped_sqrt_eigh(M: np.ndarray, what: str):
    ew, U = np.linalg.eigh(M)
    scale = max(abs(ew[0]), abs(ew[-1]), 1e-300)
    if ew[0] < -1e-10 * scale:
        raise NumericalError(
            f"{what}: eigenvalue {ew[0]:.3e} below -1e-10 * {scale:.3e}")
    ew = np.clip(ew, 0.0, None)
    return ew, U


def e_components(lam: np.ndarray, g: float):
    """Eigendecomposition (ew, U) of h^2 + 2 P_w with w = h^{1/2} v."""
    lam = np.asarray(lam, dtype=np.float64)
    w = np.sqrt(lam * g)
    M = np.diag(lam * lam) + 2.0 * np.outer(w, w)
    return _clamped_sqrt_eigh(M, "E^2")


def fourth_root_rank_one(a_diag: np.ndarray, w: np.ndarray,
                         sign: str = "plus_quarter",
                         tol: float = 1e-8) -> np.ndarray:
    """(A + P_w)^{+-1/4} for diagonal positive A via the integral formulas.

    plus_quarter:
        (A + P_w)^{1/4}  = A^{1/4} + (2 sqrt2 / pi) \\int_0^inf
                           t^4 / (1 + <w, (A+t^4)^{-1} w>) P_{(A+t^4)^{-1} w} dt
    minus_quarter:
        (A + P_w)^{-1/4} = A^{-1/4} - (2 sqrt2 / pi) \\int_0^inf
                           t^4 / (1 + <w, A^{-1}(A^{-1}+t^4)^{-1} w> t^4)
                           P_{A^{-1}(A^{-1}+t^4)^{-1} w} dt

    The half-line is mapped to [0, 1) by t = u/(1-u) and integrated
    adaptively to absolute tolerance ``tol`` per entry.
    """
    a = np.asarray(a_diag, dtype=np.float64)
    if np.any(a <= 0):
        raise ValidationError("fourth_root_rank_one requires a_diag > 0")
    w = np.asarray(w, dtype=np.float64)
    if sign not in ("plus_quarter", "minus_quarter"):
        raise ValidationError(f"unknown sign {sign!r}")
    plus = sign == "plus_quarter"

    def integrand(u):
        t4 = (u / (1.0 - u)) ** 4
        jac = 1.0 / (1.0 - u) ** 2
        if plus:
            x = w / (a + t4)
            pref = t4 / (1.0 + np.dot(w, x))
        else:
            x = w / (1.0 + a * t4)          # A^{-1} (A^{-1} + t^4)^{-1} w
            pref = t4 / (1.0 + np.dot(w, x) * t4)
        return (pref * jac) * np.outer(x, x)

    I, err = quad_vec(integrand, 0.0, 1.0, epsabs=tol, norm="max")
    if err > tol * 1.01:
        raise NumericalError(f"fourth-root quadrature error estimate {err:.3e} "
                             f"exceeds tolerance {tol:.3e}")
    base = np.diag(a ** (0.25 if plus else -0.25))
    corr = (2.0 * np.sqrt(2.0) / np.pi) * I
    return base + corr if plus else base - corr


def e_matrix(lam: np.ndarray, g: float, method: str = "eigen",
             tol: float = 1e-8) -> np.ndarray:
    """E = (h^2 + 2 P_w)^{1/2} by the chosen path."""
    lam = np.asarray(lam, dtype=np.float64)
    if method == "eigen":
        ew, U = e_components(lam, g)
        return (U * np.sqrt(ew)) @ U.T
    if method == "rank_one_integral":
        w = np.sqrt(2.0 * lam * g)
        Q = fourth_root_rank_one(lam * lam, w, "plus_quarter", tol)
        return Q @ Q
    raise ValidationError(f"unknown e_matrix method {method!r}")


def build_mode(k_F: float, beta: float, model: PotentialModel, k,
               in_S: bool = False, method: str = "eigen") -> ModeOperators:
    """Construct the dense operator bundle for transfer momentum k."""
    if not 0 < beta <= 1:
        raise ValidationError(f"beta must lie in (0, 1], got {beta!r}")
    ln = make_lune(k_F, k)
    g = mode_weight(k_F, beta, model, k)
    lam = ln.lambdas
    n = len(lam)
    if n == 0:
        z = np.zeros((0, 0))
        return ModeOperators(k_F, beta, ln.k, ln, g, in_S,
                             np.zeros(0), np.zeros(0), z, z, z, z, z,
                             np.zeros(0), 0.0)
    v = np.full(n, np.sqrt(g))
    if method == "eigen":
        ew, U = e_components(lam, g)
        E = (U * np.sqrt(ew)) @ U.T
        E_half = (U * ew ** 0.25) @ U.T
        # zero coupling keeps E^2 = diag(lam^2) exactly; guard the inverse root
        ew_safe = np.where(ew > 0, ew, 1.0)
        E_inv_half = (U * ew_safe ** -0.25) @ U.T
    elif method == "rank_one_integral":
        w = np.sqrt(2.0 * lam * g)
        E_half = fourth_root_rank_one(lam * lam, w, "plus_quarter")
        E_inv_half = fourth_root_rank_one(lam * lam, w, "minus_quarter")
        E = E_half @ E_half
    else:
        raise ValidationError(f"unknown build method {method!r}")
    hs = np.sqrt(lam)
    C = 0.5 * (E_half / hs[:, None] + E_inv_half * hs[:, None])
    S = 0.5 * (E_half / hs[:, None] - E_inv_half * hs[:, None])
    v_h_inv_v = g * float(np.sum(1.0 / lam))
    if in_S:
        # eta = E^{-3/2} h^{1/2} w, w = g * ones
        ew, U = e_components(lam, g)
        ew_safe = np.where(ew > 0, ew, 1.0)
        Em32 = (U * ew_safe ** -0.75) @ U.T      # (E^2)^{-3/4} = E^{-3/2}
        eta = Em32 @ (hs * g)
    else:
        eta = np.zeros(n)
    return ModeOperators(float(k_F), float(beta), ln.k, ln, g, in_S,
                         lam.copy(), v, E, E_half, E_inv_half, C, S, eta,
                         v_h_inv_v)


def c_s_matrices(mode: ModeOperators):
    """(C, S) as stored on the mode."""
    return mode.C, mode.S


def trace_term(mode: ModeOperators) -> float:
    """tr(E - h - P) for the mode; always in [-|L_k| g, 0]."""
    n = mode.size
    if n == 0:
        return 0.0
    return float(np.trace(mode.E) - np.sum(mode.h_diag) - n * mode.g)


def eta_e_eta(mode: ModeOperators):
    """<eta, E eta> twice: direct quadratic form and the Sherman-Morrison
    closed form g * <v,h^{-1}v> / (1 + 2 <v,h^{-1}v>)."""
    if not mode.in_S:
        raise ValidationError("eta_e_eta requires a mode built with in_S=True")
    direct = float(mode.eta @ mode.E @ mode.eta)
    t = mode.v_h_inv_v
    closed = mode.g * t / (1.0 + 2.0 * t)
    return direct, closed


def sandwich_bound_matrix(lam: np.ndarray, v: np.ndarray, kind: str) -> np.ndarray:
    """Upper envelope B_ij for E^{1/2}-h^{1/2} (kind='half') or
    h^{-1/2}-E^{-1/2} (kind='inv_half'); the lower envelope is
    B / (1 + 2 <v,h^{-1}v>)."""
    lam = np.asarray(lam, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    sq = np.sqrt(lam)
    outer_v = np.outer(v, v) / np.add.outer(lam, lam)
    if kind == "half":
        return 2.0 * np.outer(sq, sq) / np.add.outer(sq, sq) * outer_v
    if kind == "inv_half":
        return 2.0 / np.add.outer(sq, sq) * outer_v
    raise ValidationError(f"unknown sandwich kind {kind!r}")


# ---------------------------------------------------------------------------
# Block-reduced spectral path
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpectralMode:
    """Distinct-lambda compression of a mode.

    With v constant on the lune, h^2 + 2 P_w leaves each lambda-block
    invariant except along the block-summed direction; collecting those
    directions gives the reduced matrix R = diag(lam_a^2) + 2 what what^T,
    what_a = sqrt(m_a lam_a g).  (mu, U) is its eigendecomposition.
    """

    k_F: float
    beta: float
    k: tuple[int, int, int]
    g: float
    lam_vals: np.ndarray    # (r,) distinct lambda values, increasing
    mults: np.ndarray       # (r,) multiplicities
    mu: np.ndarray          # (r,) eigenvalues of R (= eigenvalues of E^2)
    U: np.ndarray           # (r, r)
    size: int

    def f_of_esq_blocks(self, f) -> np.ndarray:
        """Block matrix of f(E^2) along the coupled directions."""
        return (self.U * f(self.mu)) @ self.U.T

    def entry_f_of_esq(self, f, i_block: int, j_block: int,
                       same_point: bool = False) -> float:
        """Single entry of f(E^2) between points in the given blocks."""
        F = self.f_of_esq_blocks(f)
        a, b = i_block, j_block
        val = F[a, b] / np.sqrt(self.mults[a] * self.mults[b])
        if a == b:
            diag = f(self.lam_vals[a] ** 2)
            val += ((1.0 if same_point else 0.0) - 1.0 / self.mults[a]) * diag
        return float(val)


def spectral_mode_from_multiset(k_F: float, beta: float, k, g: float,
                                two_lambdas: np.ndarray) -> SpectralMode:
    two = np.asarray(two_lambdas, dtype=np.int64)
    vals2, mults = np.unique(two, return_counts=True)
    lam_vals = vals2.astype(np.float64) / 2.0
    what = np.sqrt(mults * lam_vals * g)
    R = np.diag(lam_vals * lam_vals) + 2.0 * np.outer(what, what)
    mu, U = _clamped_sqrt_eigh(R, "reduced E^2")
    return SpectralMode(float(k_F), float(beta), tuple(int(c) for c in k),
                        g, lam_vals, mults.astype(np.int64), mu, U,
                        int(two.size))


def spectral_mode(k_F: float, beta: float, model: PotentialModel, k) -> SpectralMode:
    ln = make_lune(k_F, k)
    g = mode_weight(k_F, beta, model, k)
    return spectral_mode_from_multiset(k_F, beta, ln.k, g, ln.two_lambdas)


def secular_deltas(lam_vals: np.ndarray, mults: np.ndarray, g: float,
                   n_iter: int = 80) -> np.ndarray:
    """Eigenvalue shifts of diag(lam^2) + 2 what what^T in delta form.

    Solves the secular equation 1 - sum_b s_b / (delta + c_a - c_b) = 0,
    s_b = 2 m_b lam_b g, c_b = lam_b^2, for the shift delta_a = mu_a - c_a
    of every eigenvalue directly.  Multiplicative bisection keeps full
    relative precision even when delta is many orders below c (which is
    what defeats a plain eigendecomposition through cancellation).
    """
    lam = np.asarray(lam_vals, dtype=np.float64)
    m = np.asarray(mults, dtype=np.float64)
    c = lam * lam
    s = 2.0 * m * lam * g
    r = len(lam)
    if g == 0.0 or r == 0:
        return np.zeros(r)
    s_tot = float(np.sum(s))
    # root a lies in (c_a, c_{a+1}); the top root in (c_r, c_r + sum s]
    gap = np.empty(r)
    gap[:-1] = c[1:] - c[:-1]
    gap[-1] = np.inf
    lo = s * 1e-12
    hi = np.minimum(gap * (1.0 - 1e-14), s_tot * (1.0 + 1e-12))
    cdiff = c[:, None] - c[None, :]          # exact: lambda in (1/2)Z

    def fval(delta):
        denom = cdiff + delta[:, None]
        return 1.0 - np.sum(s[None, :] / denom, axis=1)

    for _ in range(n_iter):
        mid = np.sqrt(lo * hi)
        neg = fval(mid) < 0.0
        lo = np.where(neg, mid, lo)
        hi = np.where(neg, hi, mid)
        if np.all((hi - lo) <= 4e-16 * hi):
            break
    return np.sqrt(lo * hi)


def trace_term_from_multiset(lam_vals: np.ndarray, mults: np.ndarray,
                             g: float, size: int) -> float:
    """tr(E - h - P) via the secular shifts (cancellation-free).

    Untouched block directions cancel between E and h exactly, so
    tr(E - h) = sum_a (sqrt(c_a + delta_a) - lam_a)
              = sum_a delta_a / (sqrt(c_a + delta_a) + lam_a),
    and tr P = |L_k| g.
    """
    if size == 0 or g == 0.0:
        return 0.0
    lam = np.asarray(lam_vals, dtype=np.float64)
    delta = secular_deltas(lam, np.asarray(mults, dtype=np.float64), g)
    c = lam * lam
    shifts = delta / (np.sqrt(c + delta) + lam)
    return float(math.fsum(shifts.tolist()) - size * g)


def spectral_trace_term(sm: SpectralMode) -> float:
    return trace_term_from_multiset(sm.lam_vals, sm.mults.astype(np.float64),
                                    sm.g, sm.size)


# ---------------------------------------------------------------------------
# Fixed-grid rank-one integral tables for individual C/S entries
# ---------------------------------------------------------------------------

@lru_cache(maxsize=4)
def entry_grid(n_panels: int = 48, n_gauss: int = 12):
    """Composite Gauss-Legendre nodes/weights on a geometric t-grid.

    Used to evaluate the one-body integral representations
        (E^{1/2} - h^{1/2})_pq     = (4 sqrt2/pi) \\int t^4/beta1(t) *
                                     g sqrt(l_p l_q) /((l_p^2+t^4)(l_q^2+t^4)) dt
        (h^{-1/2} - E^{-1/2})_pq   = (4 sqrt2/pi) \\int t^4/beta2(t) *
                                     g sqrt(l_p l_q) /((1+l_p^2 t^4)(1+l_q^2 t^4)) dt
    on a grid fixed per (span of lambda); accuracy is pinned by tests against
    the dense eigendecomposition.
    """
    x, w = np.polynomial.legendre.leggauss(n_gauss)
    return x, w, n_panels


def _panel_nodes(t_lo: float, t_hi: float, n_panels: int, x, w):
    edges = np.geomspace(t_lo, t_hi, n_panels + 1)
    a = edges[:-1][:, None]
    b = edges[1:][:, None]
    t = (0.5 * (b - a) * x[None, :] + 0.5 * (b + a)).ravel()
    wt = (0.5 * (b - a) * w[None, :]).ravel()
    return t, wt


@dataclass(frozen=True)
class EntryTables:
    """Per-mode scalar prefactors on the shared quadrature grid."""

    g: float
    t: np.ndarray
    w_over_beta1: np.ndarray   # weights * t^4 / beta1(t)
    w_over_beta2: np.ndarray   # weights * t^4 / beta2(t)
    t4: np.ndarray
    tail_t: float
    beta2_inf: float           # 1 + 2 <v, h^{-1} v>


def entry_tables(sm: SpectralMode) -> EntryTables:
    lam = sm.lam_vals
    m = sm.mults.astype(np.float64)
    x, w, n_panels = entry_grid()
    t_lo = 1e-3 * np.sqrt(float(lam[0]))
    t_hi = 1e3 * np.sqrt(float(lam[-1]))
    t, wt = _panel_nodes(t_lo, t_hi, n_panels, x, w)
    # leading [0, t_lo] panel on a linear grid
    t0 = 0.5 * t_lo * (x + 1.0)
    w0 = 0.5 * t_lo * w
    t = np.concatenate([t0, t])
    wt = np.concatenate([w0, wt])
    t4 = t ** 4
    beta1 = 1.0 + 2.0 * sm.g * np.sum(
        m[:, None] * lam[:, None] / (lam[:, None] ** 2 + t4[None, :]), axis=0)
    beta2 = 1.0 + 2.0 * sm.g * np.sum(
        m[:, None] * lam[:, None] * t4[None, :]
        / (1.0 + lam[:, None] ** 2 * t4[None, :]), axis=0)
    beta2_inf = 1.0 + 2.0 * sm.g * float(np.sum(m / lam))
    return EntryTables(g=sm.g, t=t, w_over_beta1=wt * t4 / beta1,
                       w_over_beta2=wt * t4 / beta2, t4=t4, tail_t=float(t[-1]),
                       beta2_inf=beta2_inf)


_PREF = 4.0 * np.sqrt(2.0) / np.pi


def s_entries(tab: EntryTables, lam_row, lam_col) -> np.ndarray:
    """S[p, q] for arrays of row/column lambda values (broadcasting)."""
    lr = np.asarray(lam_row, dtype=np.float64)
    lc = np.asarray(lam_col, dtype=np.float64)
    G, H = _gh_entries(tab, lr, lc)
    return 0.5 * (G / np.sqrt(lr) + H * np.sqrt(lr))


def c_minus_one_entries(tab: EntryTables, lam_row, lam_col) -> np.ndarray:
    """(C - 1)[p, q]; the integral form is valid on the diagonal as well."""
    lr = np.asarray(lam_row, dtype=np.float64)
    lc = np.asarray(lam_col, dtype=np.float64)
    G, H = _gh_entries(tab, lr, lc)
    return 0.5 * (G / np.sqrt(lr) - H * np.sqrt(lr))


def _gh_entries(tab: EntryTables, lr: np.ndarray, lc: np.ndarray):
    t4 = tab.t4
    shape = np.broadcast_shapes(lr.shape, lc.shape)
    lr_f = np.broadcast_to(lr, shape).ravel()[:, None]
    lc_f = np.broadcast_to(lc, shape).ravel()[:, None]
    root = tab.g * np.sqrt(lr_f * lc_f)
    G = _PREF * np.sum(tab.w_over_beta1[None, :] * root
                       / ((lr_f ** 2 + t4[None, :]) * (lc_f ** 2 + t4[None, :])),
                       axis=1)
    H = _PREF * np.sum(tab.w_over_beta2[None, :] * root
                       / ((1.0 + lr_f ** 2 * t4[None, :])
                          * (1.0 + lc_f ** 2 * t4[None, :])), axis=1)
    # analytic tails beyond the last node (integrands ~ t^{-4})
    T3 = 3.0 * tab.tail_t ** 3
    G = G + _PREF * (root[:, 0] / T3)
    H = H + _PREF * (root[:, 0] / (lr_f[:, 0] ** 2 * lc_f[:, 0] ** 2 * T3
                                   * tab.beta2_inf))
    return G.reshape(shape), H.reshape(shape)
