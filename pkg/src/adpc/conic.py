"""Semidefinite subproblems behind the learning loop and the controller.

Three families: one-parameter PSD feasibility (the S-procedure search),
the sigma-max program that certifies how much an updated information
matrix contracts the admissible set, and the terminal-ingredient
synthesis LMIs.  Problems that recur with fixed shapes are compiled once
with cvxpy parameters and cached at module level.
"""

import warnings
from dataclasses import dataclass

import cvxpy as cp
import numpy as np

from .ase import xi_matrix, xi_single
from .ellipsoid import DEFAULT_TOL, PsdTolerance, concave_alpha_search
from .exceptions import Infeasible


def _sym(M):
    return 0.5 * (M + M.T)


def one_param_psd_feasible(M, N, tol=None):
    """Search alpha >= 0 with M - alpha*N psd (within -tol); None if not found."""
    return concave_alpha_search(N, M, tol=tol)


@dataclass(frozen=True)
class SigmaMaxResult:
    sigma_star: float
    lambda_s: np.ndarray
    residual: float


_EPAD = {}


def _epad(n_x, dim):
    if (n_x, dim) not in _EPAD:
        E = np.zeros((dim, dim))
        E[:n_x, :n_x] = np.eye(n_x)
        _EPAD[(n_x, dim)] = E
    return _EPAD[(n_x, dim)]


_SIGMA_CACHE = {}


def _sigma_problem(n_x, n_h, n):
    key = (n_x, n_h, n)
    if key not in _SIGMA_CACHE:
        dim = n_x + n_h
        lv = cp.Variable(n, nonneg=True)
        sig = cp.Variable()
        xi_prev_p = cp.Parameter((dim, dim), symmetric=True)
        block_p = [cp.Parameter((dim, dim), symmetric=True) for _ in range(n)]
        xi_new = sum(lv[j] * block_p[j] for j in range(n))
        cons = [xi_prev_p - xi_new - sig * _epad(n_x, dim) >> 0]
        prob = cp.Problem(cp.Maximize(sig), cons)
        _SIGMA_CACHE[key] = (prob, lv, sig, xi_prev_p, block_p)
    return _SIGMA_CACHE[key]


def _solve_sdp(prob, **clarabel_kwargs):
    with warnings.catch_warnings():
        # inaccurate-solution warnings are moot: every result is re-validated
        warnings.simplefilter("ignore", UserWarning)
        try:
            prob.solve(solver="CLARABEL", **clarabel_kwargs)
            if prob.status in ("optimal", "optimal_inaccurate"):
                return True
        except Exception:
            pass  # fall through to the fallback solver
        try:
            prob.solve(solver="SCS", eps=1e-7, max_iters=40_000)
        except cp.SolverError:
            return False
        return prob.status in ("optimal", "optimal_inaccurate")


def _validated_result(xi_prev, ds, lam_s, sigma, scale, tol):
    """Re-check the contraction LMI at clamped weights; None if it fails."""
    lam_s = np.maximum(np.asarray(lam_s, dtype=float), 0.0)
    sigma = max(float(sigma), 0.0)
    xi_cand = xi_matrix(ds.with_weights(lam_s))
    M = xi_prev - xi_cand - sigma * _epad(ds.n_x, xi_prev.shape[0])
    resid = float(np.linalg.eigvalsh(_sym(M))[0])
    if resid < -1e-7 * scale:
        return None
    E_new = (ds.H * lam_s) @ ds.H.T
    if np.linalg.eigvalsh(_sym(E_new))[0] <= 1e-10:
        return None
    return SigmaMaxResult(sigma, lam_s, resid)


def sigma_max(xi_prev, ds, tol=None):
    """Largest sigma with xi_prev - Xi(H, Xdot, Lambda_s) >= sigma*diag(I, 0).

    The program is a linear SDP in (sigma, Lambda_s).  The solver output is
    re-validated at clamped weights; on any numerical failure the known
    feasible point (the dataset's own weights, sigma = 0) is returned, so
    Infeasible only fires when that point violates the constraint, which
    signals a contract violation upstream.
    """
    tol = tol or DEFAULT_TOL
    xi_prev = _sym(np.asarray(xi_prev, dtype=float))
    n = ds.n
    scale = max(1.0, float(np.linalg.norm(xi_prev, 2)))
    blocks = [xi_single(ds.H[:, j], ds.Xdot[:, j], ds.delta) for j in range(n)]
    prob, lv, sig, xi_prev_p, block_p = _sigma_problem(ds.n_x, ds.n_h, n)
    xi_prev_p.value = _sym(xi_prev / scale)
    for p, blk in zip(block_p, blocks):
        p.value = _sym(blk / scale)
    if _solve_sdp(prob) and lv.value is not None and sig.value is not None:
        out = _validated_result(xi_prev, ds, lv.value, scale * sig.value, scale, tol)
        if out is not None:
            return out
    out = _validated_result(xi_prev, ds, ds.lam, 0.0, scale, tol)
    if out is None:
        raise Infeasible(
            "sigma-max has no valid point even at the dataset's own weights; "
            "xi_prev is not consistent with the dataset"
        )
    return out


def sigma_plus(xi_prev, ds_with_forced_column, tol=None):
    """sigma_max over a dataset that force-includes a skipped sample.

    Weights stay free and may vanish, so the optimum coincides with
    sigma_max up to solver tolerance; kept separate as instrumentation for
    the trigger-soundness checks.
    """
    return sigma_max(xi_prev, ds_with_forced_column, tol=tol)


def certified_sigma(xi_prev, ds, slack=None):
    """Largest sigma the dataset's own weights provably achieve.

    Bisection on lambda_min(xi_prev - Xi - sigma*diag(I, 0)): pure linear
    algebra, so the value stays trustworthy at data scales where the SDP
    solver's reported objective is floor-limited.  Returns -inf when the
    weights do not even certify nesting at the given slack.
    """
    xi_prev = _sym(np.asarray(xi_prev, dtype=float))
    M = xi_prev - xi_matrix(ds)
    scale = max(1.0, float(np.linalg.norm(xi_prev, 2)))
    acc = (1e-12 * scale) if slack is None else float(slack)
    E = _epad(ds.n_x, xi_prev.shape[0])

    def certifies(s):
        return float(np.linalg.eigvalsh(_sym(M - s * E))[0]) >= -acc

    if not certifies(0.0):
        return float("-inf")
    hi = max(float(np.linalg.eigvalsh(_sym(M[: ds.n_x, : ds.n_x]))[-1]), 0.0) + acc
    if certifies(hi):
        return hi
    lo = 0.0
    for _ in range(200):
        if hi - lo <= 1e-13 * max(1.0, hi):
            break
        mid = 0.5 * (lo + hi)
        if certifies(mid):
            lo = mid
        else:
            hi = mid
    return lo


@dataclass(frozen=True)
class SynthesisResult:
    Y: np.ndarray
    L: np.ndarray
    alpha: float
    K: np.ndarray
    P_T: np.ndarray


def _finish_synthesis(Yv, Lv, alpha):
    Y = _sym(np.asarray(Yv, dtype=float))
    P = _sym(np.linalg.inv(Y))
    K = np.asarray(Lv, dtype=float) @ P
    return SynthesisResult(Y, np.asarray(Lv, dtype=float), float(alpha), K, P)


def _synthesis_valid(out, xi0, Q, R, rho_bar=None, kcap=None):
    """Re-check every LMI at the returned point; guards inaccurate solves."""
    Y, L, alpha = out.Y, out.L, out.alpha
    n_x = Q.shape[0]
    n_u = R.shape[0]
    n_h = n_x + n_u
    dim = n_x + n_h
    z = np.zeros
    Rinv = np.linalg.inv(R)
    Qinv = np.linalg.inv(Q)
    if np.linalg.eigvalsh(Y)[0] <= 0:
        return False
    lmi35 = np.block([
        [Rinv, L, z((n_u, n_x))],
        [L.T, Y, Y],
        [z((n_x, n_u)), Y, Qinv],
    ])
    if np.linalg.eigvalsh(lmi35)[0] < 1e-8:
        return False
    big = np.block([
        [Y, z((n_x, n_x)), z((n_x, n_u)), z((n_x, n_u)), z((n_x, n_x)), z((n_x, n_x))],
        [z((n_x, n_x)), z((n_x, n_x)), z((n_x, n_u)), z((n_x, n_u)), Y, z((n_x, n_x))],
        [z((n_u, n_x)), z((n_u, n_x)), z((n_u, n_u)), z((n_u, n_u)), L, z((n_u, n_x))],
        [z((n_u, n_x)), z((n_u, n_x)), z((n_u, n_u)), Rinv, L, z((n_u, n_x))],
        [z((n_x, n_x)), Y.T, L.T, L.T, Y, Y],
        [z((n_x, n_x)), z((n_x, n_x)), z((n_x, n_u)), z((n_x, n_u)), Y, Qinv],
    ])
    pad = big.shape[0] - dim
    xi_pad = np.block([
        [xi0, np.zeros((dim, pad))],
        [np.zeros((pad, dim)), np.zeros((pad, pad))],
    ])
    scale = max(1.0, float(np.linalg.norm(big, 2)))
    if np.linalg.eigvalsh(_sym(big - alpha * xi_pad))[0] < -1e-6 * scale:
        return False
    if rho_bar is not None:
        sup = contraction_sup(xi0, out.P_T, out.K)
        if sup is None or sup > rho_bar + 1e-3:
            return False
    if kcap is not None:
        w, V = np.linalg.eigh(out.P_T)
        Phi = V @ np.diag(1.0 / np.sqrt(np.maximum(w, 1e-300))) @ V.T
        if np.linalg.norm(out.K @ Phi, 2) > kcap + 1e-4:
            return False
    return True


_SYNTH_CACHE = {}


def _synth_problem(n_x, n_u, Q, R, mode):
    """Compiled synthesis LMIs; mode is 'plain', 'track' or 'track_kcap'."""
    qkey = (n_x, n_u, mode, Q.tobytes(), R.tobytes())
    if qkey in _SYNTH_CACHE:
        return _SYNTH_CACHE[qkey]
    n_h = n_x + n_u
    dim = n_x + n_h
    Z = np.zeros
    Rinv = np.linalg.inv(R)
    Qinv = np.linalg.inv(Q)
    Y = cp.Variable((n_x, n_x), symmetric=True)
    L = cp.Variable((n_u, n_x))
    al1 = cp.Variable(nonneg=True)
    t = cp.Variable(nonneg=True)
    xi_p = cp.Parameter((dim, dim), symmetric=True)
    # cost-decrease LMI with the nonlinear Y - YQY block replaced by its
    # exact three-block Schur equivalent, strict by a fixed margin
    lmi35 = cp.bmat([
        [Rinv, L, Z((n_u, n_x))],
        [L.T, Y, Y],
        [Z((n_x, n_u)), Y, Qinv],
    ])
    # robust invariance LMI, written verbatim; the multiplier al1 scales the
    # zero-padded information matrix
    big = cp.bmat([
        [Y, Z((n_x, n_x)), Z((n_x, n_u)), Z((n_x, n_u)), Z((n_x, n_x)), Z((n_x, n_x))],
        [Z((n_x, n_x)), Z((n_x, n_x)), Z((n_x, n_u)), Z((n_x, n_u)), Y, Z((n_x, n_x))],
        [Z((n_u, n_x)), Z((n_u, n_x)), Z((n_u, n_u)), Z((n_u, n_u)), L, Z((n_u, n_x))],
        [Z((n_u, n_x)), Z((n_u, n_x)), Z((n_u, n_u)), Rinv, L, Z((n_u, n_x))],
        [Z((n_x, n_x)), Y.T, L.T, L.T, Y, Y],
        [Z((n_x, n_x)), Z((n_x, n_x)), Z((n_x, n_u)), Z((n_x, n_u)), Y, Qinv],
    ])
    pad = big.shape[0] - dim
    xi_pad = cp.bmat([
        [xi_p, np.zeros((dim, pad))],
        [np.zeros((pad, dim)), np.zeros((pad, pad))],
    ])
    cons = [
        lmi35 >> 1e-7 * np.eye(2 * n_x + n_u),
        big - al1 * xi_pad >> 0,
        Y - t * np.eye(n_x) >> 0,
    ]
    params = {"xi": xi_p}
    if mode in ("track", "track_kcap"):
        al2 = cp.Variable(nonneg=True)
        rho2_p = cp.Parameter(nonneg=True)
        YL = cp.vstack([Y, L])
        topl = cp.bmat([
            [Y, Z((n_x, n_h))],
            [Z((n_h, n_x)), Z((n_h, n_h))],
        ]) - al2 * xi_p
        contr = cp.bmat([
            [topl, cp.vstack([Z((n_x, n_x)), YL])],
            [cp.hstack([Z((n_x, n_x)), YL.T]), rho2_p * Y],
        ])
        cons.append(contr >> 0)
        params["rho2"] = rho2_p
    if mode == "track_kcap":
        kcap2_p = cp.Parameter(nonneg=True)
        cons.append(cp.bmat([[kcap2_p * np.eye(n_u), L], [L.T, Y]]) >> 0)
        params["kcap2"] = kcap2_p
    prob = cp.Problem(cp.Maximize(t), cons)
    out = (prob, Y, L, al1, t, params)
    _SYNTH_CACHE[qkey] = out
    return out


def _run_synthesis(xi0, Q, R, mode, rho_bar=None, kcap=None):
    Q = _sym(np.asarray(Q, dtype=float))
    R = _sym(np.asarray(R, dtype=float))
    n_x = Q.shape[0]
    n_u = R.shape[0]
    xi0 = _sym(np.asarray(xi0, dtype=float))
    scale = max(1.0, float(np.linalg.norm(xi0, 2)))
    prob, Y, L, al1, t, params = _synth_problem(n_x, n_u, Q, R, mode)
    params["xi"].value = _sym(xi0 / scale)
    if "rho2" in params:
        params["rho2"].value = float(rho_bar) ** 2
    if "kcap2" in params:
        params["kcap2"].value = float(kcap) ** 2
    ok = _solve_sdp(prob)
    if ok and t.value is not None and t.value >= 1e-9 and Y.value is not None:
        out = _finish_synthesis(Y.value, L.value, float(al1.value) / scale)
        if _synthesis_valid(out, xi0, Q, R, rho_bar=rho_bar, kcap=kcap):
            return out
    raise Infeasible(
        "terminal-ingredient synthesis failed; the admissible set is too "
        "large for a common stabilizing design (more data needed)"
    )


def terminal_synthesis(xi0, Q, R):
    """Terminal ingredients (K, P_T) valid for every admissible system.

    Maximizes the smallest eigenvalue of Y = P_T^{-1}; raises Infeasible
    when no common design exists at the current data.
    """
    return _run_synthesis(xi0, Q, R, "plain")


def tracking_synthesis(xi0, Q, R, rho_bar, kcap=None):
    """Synthesis with a guaranteed closed-loop contraction rate rho_bar.

    Adds the rate LMI (and optionally a cap on ||K P_T^{-1/2}||) so the
    resulting error tube leaves input headroom for tracking; same
    feasibility contract as terminal_synthesis.
    """
    mode = "track_kcap" if kcap is not None else "track"
    return _run_synthesis(xi0, Q, R, mode, rho_bar=rho_bar, kcap=kcap)


def contraction_sup(xi, P, K, tol_feas=1e-9):
    """Certified upper bound on sup ||P^.5 Delta [I;K] P^-.5|| over the ASE.

    Bisection on rho; each feasibility test is a lossless one-parameter
    S-procedure on scale-normalized data.  Returns None when even rho = 64
    cannot be certified.
    """
    P = _sym(np.asarray(P, dtype=float))
    K = np.atleast_2d(np.asarray(K, dtype=float))
    n_x = P.shape[0]
    n_h = n_x + K.shape[0]
    Pn = P / np.linalg.norm(P, 2)
    Yn = np.linalg.inv(Pn)
    IK = np.vstack([np.eye(n_x), K])
    W = IK @ Yn @ IK.T
    xi_n = _sym(np.asarray(xi, dtype=float))
    xi_n = xi_n / max(1e-12, np.linalg.norm(xi_n, 2))

    def feasible(rho):
        Ms = np.block([
            [Yn, np.zeros((n_x, n_h))],
            [np.zeros((n_h, n_x)), -W / rho**2],
        ])
        t = PsdTolerance(tol_psd=tol_feas, tol_obj=DEFAULT_TOL.tol_obj)
        return one_param_psd_feasible(Ms, xi_n, tol=t) is not None

    hi = 4.0
    while not feasible(hi):
        hi *= 2.0
        if hi > 64.0:
            return None
    lo = 0.0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    return float(hi)
