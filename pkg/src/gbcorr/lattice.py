"""Lattice geometry on Z^3: Fermi ball, lunes, spherical shells, octahedral orbits.

Everything here is exact integer arithmetic.  The Fermi momentum k_F is
restricted to values whose square is exactly representable (integers and
half-integers), so that the closed-ball membership test ``|p|^2 <= k_F^2``
can be carried out on integers (``4|p|^2 <= 4 k_F^2``) and is immune to
rounding.  All point lists are returned in the canonical order
(|p|^2, x, y, z), which fixes every downstream summation order.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


class ValidationError(ValueError):
    """A precondition on user-supplied input failed."""


def _as_ivec(k) -> tuple[int, int, int]:
    kx, ky, kz = (int(c) for c in k)
    return (kx, ky, kz)


def norm_sq(k) -> int:
    kx, ky, kz = _as_ivec(k)
    return kx * kx + ky * ky + kz * kz


def four_kf_sq(k_F: float) -> int:
    """Return 4*k_F^2 as an exact integer, rejecting unrepresentable grids.

    Admissible k_F are positive integers or half-integers (their squares are
    exact binary floats), which keeps all ball/lune membership tests exact.
    """
    if not np.isfinite(k_F) or k_F <= 0:
        raise ValidationError(f"k_F must be positive and finite, got {k_F!r}")
    q = 4.0 * float(k_F) * float(k_F)
    qi = round(q)
    if abs(q - qi) > 1e-9:
        raise ValidationError(
            f"k_F={k_F!r} does not lie on the exact grid (k_F^2 must be an "
            "integer or a half-integer squared)")
    return int(qi)


def canonical_order(points: np.ndarray) -> np.ndarray:
    """Sort lattice points by (|p|^2, x, y, z); returns a new array."""
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 3)
    n2 = np.einsum("ij,ij->i", pts, pts)
    idx = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0], n2))
    return pts[idx]


@dataclass(frozen=True)
class FermiBall:
    """All integer momenta with |p| <= k_F (boundary included)."""

    k_F: float
    points: np.ndarray   # (N, 3) int64, canonical order
    N: int

    def contains(self, p) -> bool:
        return 4 * norm_sq(p) <= four_kf_sq(self.k_F)


@dataclass(frozen=True)
class Lune:
    """The set L_k = (B_F + k) \\ B_F with the pair excitation energies.

    lambdas[i] = (|p_i|^2 - |p_i - k|^2)/2 > 0; stored alongside as exact
    integers two_lambdas = 2*lambda.
    """

    k_F: float
    k: tuple[int, int, int]
    points: np.ndarray        # (n, 3) int64, canonical order
    lambdas: np.ndarray       # (n,) float64, exact half-integers
    two_lambdas: np.ndarray   # (n,) int64

    @property
    def size(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class OrbitTable:
    """Octahedral orbits of the nonzero lattice vectors with |k| <= K_max.

    Representatives are the lexicographic minimum of each orbit, i.e.
    (-c, -b, -a) for sorted absolute values a <= b <= c; multiplicities are
    48 / |stabilizer|.  Summing any orbit-invariant function over
    representatives weighted by multiplicity equals the full lattice sum.
    """

    K_max: float
    representatives: np.ndarray   # (m, 3) int64, canonical order
    multiplicities: np.ndarray    # (m,) int64


@lru_cache(maxsize=32)
def _fermi_ball_cached(q4: int) -> FermiBall:
    r = int(np.floor(np.sqrt(q4) / 2.0 + 1e-12))
    axis = np.arange(-r, r + 1, dtype=np.int64)
    X, Y, Z = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    mask = 4 * np.einsum("ij,ij->i", pts, pts) <= q4
    pts = canonical_order(pts[mask])
    pts.flags.writeable = False
    return FermiBall(k_F=float(np.sqrt(q4) / 2.0), points=pts, N=len(pts))


def fermi_ball(k_F: float) -> FermiBall:
    """Enumerate B_F = closed ball of radius k_F intersected with Z^3."""
    q4 = four_kf_sq(k_F)
    ball = _fermi_ball_cached(q4)
    if ball.k_F == float(k_F):
        return ball
    return FermiBall(k_F=float(k_F), points=ball.points, N=ball.N)


def lune(k_F: float, k) -> Lune:
    """Enumerate L_k = {p : |p-k| <= k_F < |p|} with its lambda values."""
    kv = _as_ivec(k)
    if kv == (0, 0, 0):
        raise ValidationError("lune requires k != 0")
    q4 = four_kf_sq(k_F)
    ball = fermi_ball(k_F).points
    shifted = ball + np.asarray(kv, dtype=np.int64)
    outside = 4 * np.einsum("ij,ij->i", shifted, shifted) > q4
    pts = canonical_order(shifted[outside])
    holes = pts - np.asarray(kv, dtype=np.int64)
    two_lam = (np.einsum("ij,ij->i", pts, pts)
               - np.einsum("ij,ij->i", holes, holes))
    return Lune(k_F=float(k_F), k=kv, points=pts,
                lambdas=two_lam.astype(np.float64) / 2.0,
                two_lambdas=two_lam)


def lune_lambda_multiset(k_F: float, k):
    """Distinct lune lambda values with multiplicities, without building the
    point set.  2*lambda_{k, q+k} = 2 q.k + |k|^2 over the ball points q
    with q + k outside B_F; returns (lam_vals, counts, lune_size)."""
    kv = _as_ivec(k)
    if kv == (0, 0, 0):
        raise ValidationError("lune requires k != 0")
    q4 = four_kf_sq(k_F)
    ball = fermi_ball(k_F).points
    k_arr = np.asarray(kv, dtype=np.int64)
    k2 = int(k_arr @ k_arr)
    qk = ball @ k_arr
    two_lam = 2 * qk + k2
    n2_shift = 4 * (np.einsum("ij,ij->i", ball, ball) + two_lam)
    two_lam = two_lam[n2_shift > q4]
    lo = int(two_lam.min())
    counts = np.bincount(two_lam - lo)
    nz = np.nonzero(counts)[0]
    lam_vals = (nz + lo).astype(np.float64) / 2.0
    return lam_vals, counts[nz].astype(np.float64), int(two_lam.size)


def zeta(k_F: float) -> float:
    """Spectral midpoint between occupied and unoccupied kinetic levels.

    zeta = (inf_{p not in B_F} |p|^2 + sup_{q in B_F} |q|^2) / 2; every
    realized |p|^2 then satisfies ||p|^2 - zeta| >= 1/2.
    """
    if k_F < 1:
        raise ValidationError("zeta requires k_F >= 1")
    q4 = four_kf_sq(k_F)
    m = int(q4 // 4)                       # candidate sup |q|^2 over B_F
    while r3(m) == 0:
        m -= 1
    mp = int(q4 // 4) + 1                  # candidate inf |p|^2 over complement
    while 4 * mp <= q4 or r3(mp) == 0:
        mp += 1
    return (m + mp) / 2.0


@lru_cache(maxsize=None)
def _r3_table(n_max: int) -> np.ndarray:
    r = int(np.floor(np.sqrt(n_max)))
    axis = np.arange(-r, r + 1, dtype=np.int64)
    X, Y, Z = np.meshgrid(axis, axis, axis, indexing="ij")
    n = (X * X + Y * Y + Z * Z).ravel()
    return np.bincount(n[n <= n_max], minlength=n_max + 1)


def r3(n: int) -> int:
    """Number of lattice points on the sphere |p|^2 = n (exact count)."""
    if n < 0:
        return 0
    if n <= 16:
        return int(_r3_table(16)[n])
    return int(_r3_table(1 << (int(n).bit_length()))[n])


def orbit_representative(k) -> tuple[int, int, int]:
    """Lexicographic minimum of the 48 signed-permutation images of k."""
    a, b, c = sorted(abs(int(x)) for x in k)
    return (-c, -b, -a)


def orbit_multiplicity(k) -> int:
    """Size of the octahedral orbit of k (= 48 / |stabilizer|)."""
    a, b, c = sorted(abs(int(x)) for x in k)
    if a == b == c:
        perms = 1
    elif a == b or b == c:
        perms = 3
    else:
        perms = 6
    nonzero = sum(1 for x in (a, b, c) if x != 0)
    return perms * (1 << nonzero)


def octahedral_images(k) -> np.ndarray:
    """All 48 signed coordinate permutations of k (with repeats removed)."""
    from itertools import permutations, product
    kv = _as_ivec(k)
    imgs = set()
    for perm in permutations(kv):
        for signs in product((1, -1), repeat=3):
            imgs.add((perm[0] * signs[0], perm[1] * signs[1], perm[2] * signs[2]))
    return canonical_order(np.array(sorted(imgs), dtype=np.int64))


def orbits(K_max: float) -> OrbitTable:
    """Partition {k in Z^3, k != 0, |k| <= K_max} into octahedral orbits."""
    if not np.isfinite(K_max) or K_max <= 0:
        raise ValidationError(f"K_max must be positive and finite, got {K_max!r}")
    K2 = float(K_max) * float(K_max)
    c_max = int(np.floor(np.sqrt(K2) + 1e-12))
    reps = []
    mults = []
    for c in range(c_max + 1):
        for b in range(c + 1):
            if c * c + b * b > K2 + 1e-9:
                break
            for a in range(b + 1):
                n2 = a * a + b * b + c * c
                if n2 > K2 + 1e-9:
                    break
                if n2 == 0:
                    continue
                reps.append((-c, -b, -a))
                mults.append(orbit_multiplicity((a, b, c)))
    reps = np.array(reps, dtype=np.int64)
    mults = np.array(mults, dtype=np.int64)
    n2 = np.einsum("ij,ij->i", reps, reps)
    idx = np.lexsort((reps[:, 2], reps[:, 1], reps[:, 0], n2))
    return OrbitTable(K_max=float(K_max), representatives=reps[idx],
                      multiplicities=mults[idx])


def lune_brute_force(k_F: float, k) -> np.ndarray:
    """Independent lune enumeration by box scan (test oracle)."""
    kv = np.asarray(_as_ivec(k), dtype=np.int64)
    q4 = four_kf_sq(k_F)
    r = int(np.ceil(k_F)) + int(np.max(np.abs(kv)))
    axis = np.arange(-r, r + 1, dtype=np.int64)
    X, Y, Z = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    d = pts - kv
    inside_shift = 4 * np.einsum("ij,ij->i", d, d) <= q4
    outside = 4 * np.einsum("ij,ij->i", pts, pts) > q4
    return canonical_order(pts[inside_shift & outside])
