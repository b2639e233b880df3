"""Independent reference computations used only by the tests."""
import itertools
import math

import numpy as np


def charpoly(A):
    """Monic characteristic polynomial coefficients (highest first) by Faddeev-LeVerrier."""
    n = A.shape[0]
    coeffs = [1.0 + 0j]
    M = np.zeros_like(A)
    I = np.eye(n)
    for k in range(1, n + 1):
        M = A @ M + coeffs[-1] * I
        coeffs.append(-np.trace(A @ M) / k)
    return np.real_if_close(np.array(coeffs), tol=1e6).real


def _bisect(p, lo, hi, iters=200):
    flo = np.polyval(p, lo)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        fm = np.polyval(p, mid)
        if fm == 0:
            return mid
        if (fm < 0) == (flo < 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def real_roots_by_bisection(p, bound):
    """All roots of a real polynomial with only real roots, bracketed by its derivative's roots."""
    deg = len(p) - 1
    if deg == 1:
        return [-p[1] / p[0]]
    crit = real_roots_by_bisection(np.polyder(p), bound)
    edges = [-bound] + sorted(crit) + [bound]
    roots = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        flo, fhi = np.polyval(p, lo), np.polyval(p, hi)
        if flo == 0:
            roots.append(lo)
        elif (flo < 0) != (fhi < 0):
            roots.append(_bisect(p, lo, hi))
        else:  # tangent (double) root: the critical point closest to it
            roots.append(lo if abs(flo) < abs(fhi) else hi)
    return sorted(roots)[:deg]


def eigenvalues_by_bisection(A):
    bound = 1.0 + np.abs(A).sum(axis=1).max()  # Gershgorin
    return np.array(real_roots_by_bisection(charpoly(A), bound))


def principal_angles_grid(U1, U2, n_grid=721, refine=6):
    """Angles of two real 2-D subspaces from the variational definition.

    theta_1 maximises |<u, v>| over unit u in span(U1), v in span(U2) by grid
    search with successive zoom; theta_2 uses the orthogonal complements of the
    maximisers within each plane (deflation).
    """
    def objective(a, b):
        u = U1 @ np.array([np.cos(a), np.sin(a)])
        v = U2 @ np.array([np.cos(b), np.sin(b)])
        return abs(u @ v)

    lo_a, hi_a, lo_b, hi_b = 0.0, math.pi, 0.0, math.pi
    best = (0.0, 0.0, -1.0)
    for _ in range(refine):
        ga = np.linspace(lo_a, hi_a, n_grid if best[2] < 0 else 41)
        gb = np.linspace(lo_b, hi_b, n_grid if best[2] < 0 else 41)
        A, B = np.meshgrid(ga, gb, indexing="ij")
        ua = np.stack([np.cos(A), np.sin(A)], -1)
        vb = np.stack([np.cos(B), np.sin(B)], -1)
        C = U1.T @ U2
        vals = np.abs(np.einsum("...i,ij,...j->...", ua, C, vb))
        i, j = np.unravel_index(np.argmax(vals), vals.shape)
        best = (ga[i], gb[j], vals[i, j])
        da, db = (ga[1] - ga[0]) * 2, (gb[1] - gb[0]) * 2
        lo_a, hi_a, lo_b, hi_b = best[0] - da, best[0] + da, best[1] - db, best[1] + db
    a, b, c1 = best
    u2 = U1 @ np.array([-np.sin(a), np.cos(a)])
    v2 = U2 @ np.array([-np.sin(b), np.cos(b)])
    c2 = abs(u2 @ v2)
    return np.sort(np.arccos(np.clip([c1, c2], 0, 1)))


def brute_force_best_mask(score, n, k):
    best, arg = -np.inf, None
    for combo in itertools.combinations(range(n), k):
        m = np.zeros(n, dtype=np.int8)
        m[list(combo)] = 1
        s = score(m)
        if s > best + 1e-12:
            best, arg = s, combo
    return list(arg), best
