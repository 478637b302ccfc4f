"""Matrix-ellipsoid core: representation, membership, measure, and the
one-parameter S-lemma inclusion certificate.

A matrix ellipsoid is the set {Z : Z'EZ + Z'F + F'Z + G <= 0} with E > 0
and F'E^-1 F - G > 0.  Z is p x q, E is p x p, G is q x q.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateSet, NotPositiveDefinite, SlaterViolated


@dataclass(frozen=True)
class PsdTolerance:
    """Numerical slack for PSD checks and objective optimality."""

    tol_psd: float = 1e-8
    tol_obj: float = 1e-6

    def __post_init__(self):
        if self.tol_psd <= 0 or self.tol_obj <= 0:
            raise ValueError("tolerances must be strictly positive")


DEFAULT_TOL = PsdTolerance()


def _sym(M):
    return 0.5 * (M + M.T)


def _spectral_scale(M):
    # relative-tolerance anchor; never below 1 so tiny matrices are not
    # held to an impossible absolute standard
    return max(1.0, float(np.linalg.norm(M, 2)))


def _psd_sqrt(M):
    """Symmetric PSD square root via eigendecomposition."""
    w, V = np.linalg.eigh(_sym(M))
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


class MatrixEllipsoid:
    """Validated (E, F, G) set with cached center and Gram matrix.

    Instances are immutable; the stored arrays are write-protected copies.
    """

    def __init__(self, E, F, G, Zc, Gc):
        self.E = E
        self.F = F
        self.G = G
        self.p = E.shape[0]
        self.q = G.shape[0]
        self.Zc = Zc          # center -E^-1 F, p x q
        self.Gc = Gc          # F'E^-1 F - G, q x q
        for a in (E, F, G, Zc, Gc):
            a.setflags(write=False)
        self._Ei_sqrt = None
        self._Gc_sqrt = None

    @property
    def Ei_sqrt(self):
        """E^{-1/2}, computed lazily."""
        if self._Ei_sqrt is None:
            w, V = np.linalg.eigh(self.E)
            self._Ei_sqrt = (V / np.sqrt(w)) @ V.T
        return self._Ei_sqrt

    @property
    def Gc_sqrt(self):
        """Gc^{1/2}, computed lazily."""
        if self._Gc_sqrt is None:
            self._Gc_sqrt = _psd_sqrt(self.Gc)
        return self._Gc_sqrt


def make_ellipsoid(E, F, G, tol=None):
    """Validate (E, F, G) and construct a MatrixEllipsoid.

    Raises NotPositiveDefinite if E fails strict positive definiteness, and
    DegenerateSet if F'E^-1 F - G does (boundedness / non-degeneracy).
    """
    tol = tol or DEFAULT_TOL
    E = _sym(np.atleast_2d(np.asarray(E, dtype=float)).copy())
    F = np.atleast_2d(np.asarray(F, dtype=float)).copy()
    G = _sym(np.atleast_2d(np.asarray(G, dtype=float)).copy())
    p = E.shape[0]
    q = G.shape[0]
    if p == 0 or q == 0:
        raise DegenerateSet("zero-dimensional ellipsoid")
    if E.shape != (p, p) or G.shape != (q, q) or F.shape != (p, q):
        raise ValueError(f"shape mismatch: E {E.shape}, F {F.shape}, G {G.shape}")
    if np.linalg.eigvalsh(E)[0] <= tol.tol_psd * _spectral_scale(E):
        raise NotPositiveDefinite("E is not positive definite")
    Zc = -np.linalg.solve(E, F)
    Gc = _sym(-F.T @ Zc - G)   # F'E^-1 F - G
    if np.linalg.eigvalsh(Gc)[0] <= tol.tol_psd * _spectral_scale(Gc):
        raise DegenerateSet("F'E^-1F - G is not positive definite")
    return MatrixEllipsoid(E, F, G, Zc, Gc)


def center(ell):
    """Center Z_c = -E^-1 F; always a member of the set."""
    return ell.Zc


def contains(ell, Z, tol=None):
    """Membership test: lambda_max(Z'EZ + Z'F + F'Z + G) <= tol."""
    tol = tol or DEFAULT_TOL
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if Z.shape != (ell.p, ell.q):
        raise ValueError(f"Z must be {ell.p}x{ell.q}, got {Z.shape}")
    M = _sym(Z.T @ ell.E @ Z + Z.T @ ell.F + ell.F.T @ Z + ell.G)
    return bool(np.linalg.eigvalsh(M)[-1] <= tol.tol_psd * _spectral_scale(M))


def volume(ell, beta=1.0):
    """Measure beta * det(Gc)^(p/2) * det(E^-1)^(q/2).

    beta is a convention constant; only ratios matter in the pipeline, so
    the default is 1.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    s_gc, ld_gc = np.linalg.slogdet(ell.Gc)
    s_e, ld_e = np.linalg.slogdet(ell.E)
    if s_gc <= 0 or s_e <= 0:
        raise DegenerateSet("non-positive determinant in measure")
    return beta * np.exp(0.5 * ell.p * ld_gc - 0.5 * ell.q * ld_e)


def qmi_form(ell):
    """The S-lemma matrix M with membership equivalent to
    [I; Z]' M [I; Z] >= 0, namely M = [[-G, -F'], [-F, -E]]."""
    top = np.hstack([-ell.G, -ell.F.T])
    bot = np.hstack([-ell.F, -ell.E])
    return _sym(np.vstack([top, bot]))


def sample_member(ell, rng, boundary=False):
    """Draw a member Z = Zc + E^{-1/2} Y Gc^{1/2} with ||Y||_2 <= 1.

    boundary=True places Y on the unit spectral sphere, so the sample sits
    on the ellipsoid boundary.
    """
    Y = rng.standard_normal((ell.p, ell.q))
    s = np.linalg.norm(Y, 2)
    if s > 0:
        Y = Y / s
    if not boundary:
        Y = Y * rng.uniform() ** (1.0 / (ell.p * ell.q))
    return ell.Zc + ell.Ei_sqrt @ Y @ ell.Gc_sqrt


def _alpha_objective(outer_M, inner_M, alpha):
    return np.linalg.eigvalsh(outer_M - alpha * inner_M)[0]


def concave_alpha_search(inner_M, outer_M, tol=None, max_doublings=60, gs_iters=120):
    """Find alpha >= 0 with outer_M - alpha*inner_M >= -tol, or None.

    g(alpha) = lambda_min(outer - alpha*inner) is concave in alpha; the
    bracket [0, hi] doubles from 1 while g keeps increasing, then a
    golden-section search locates the maximizer.
    """
    tol = tol or DEFAULT_TOL
    inner_M = _sym(np.asarray(inner_M, dtype=float))
    outer_M = _sym(np.asarray(outer_M, dtype=float))
    accept = -tol.tol_psd * _spectral_scale(outer_M)

    g = lambda a: _alpha_objective(outer_M, inner_M, a)
    g0 = g(0.0)
    if g0 >= accept:
        return 0.0
    g1 = g(1.0)
    if g1 >= accept:
        return 1.0
    hi = 1.0
    ghi = g1
    best_a, best_g = (0.0, g0) if g0 >= g1 else (1.0, g1)
    for _ in range(max_doublings):
        nxt = 2.0 * hi
        gn = g(nxt)
        if gn >= accept:
            return float(nxt)
        if gn <= ghi:
            # objective started decreasing; the maximizer is bracketed
            hi = nxt
            break
        hi, ghi = nxt, gn
        if gn > best_g:
            best_a, best_g = nxt, gn
    lo = 0.0
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a = hi - invphi * (hi - lo)
    b = lo + invphi * (hi - lo)
    ga, gb = g(a), g(b)
    for _ in range(gs_iters):
        if ga < gb:
            lo = a
            a, ga = b, gb
            b = lo + invphi * (hi - lo)
            gb = g(b)
        else:
            hi = b
            b, gb = a, ga
            a = hi - invphi * (hi - lo)
            ga = g(a)
    for cand, val in ((a, ga), (b, gb)):
        if val > best_g:
            best_a, best_g = cand, val
    if best_g >= accept:
        return float(best_a)
    return None


def inclusion_certificate(inner_M, outer_M, slater_point, tol=None):
    """S-lemma certificate: alpha >= 0 with outer_M - alpha*inner_M psd.

    slater_point is a matrix Z with [I; Z]'*inner_M*[I; Z] > 0 strictly;
    SlaterViolated is raised otherwise.  Returns alpha or None (no
    certificate found is not proof of non-inclusion).
    """
    tol = tol or DEFAULT_TOL
    inner_M = _sym(np.asarray(inner_M, dtype=float))
    Z = np.atleast_2d(np.asarray(slater_point, dtype=float))
    na = Z.shape[1]
    if inner_M.shape[0] != na + Z.shape[0]:
        raise ValueError("slater_point shape inconsistent with inner_M")
    V = np.vstack([np.eye(na), Z])
    qf = _sym(V.T @ inner_M @ V)
    if np.linalg.eigvalsh(qf)[0] <= tol.tol_psd * _spectral_scale(qf):
        raise SlaterViolated("strict feasibility fails at the supplied point")
    return concave_alpha_search(inner_M, outer_M, tol=tol)
