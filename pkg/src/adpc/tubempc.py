"""Adaptive tube-based predictive control.

The controller runs a nominal model of the ASE center, tightens state and
input balls by a propagated error-tube radius, and applies the composite
law u = K e + u_bar.  Two tube descriptions coexist: the spec-level
Euclidean TubeParams (worst case over the whole constraint ball, used for
terminal sizing oracles) and the P-metric ErrorTube whose drift term is
evaluated along the actual planned trajectory, which is what makes the
tube non-divergent on strongly coupled plants.
"""

from dataclasses import dataclass

import cvxpy as cp
import numpy as np

from .conic import contraction_sup
from .exceptions import EmptyTerminalSet, OcpInfeasible, TubeDiverges


def _sym(M):
    return 0.5 * (M + M.T)


def _psd_sqrt_pair(P):
    w, V = np.linalg.eigh(_sym(P))
    w = np.maximum(w, 1e-300)
    Ph = V @ np.diag(np.sqrt(w)) @ V.T
    Phi = V @ np.diag(1.0 / np.sqrt(w)) @ V.T
    return Ph, Phi, float(np.sqrt(w[0])), float(np.sqrt(w[-1]))


@dataclass(frozen=True)
class TubeParams:
    """Euclidean error-ball recursion r_{i+1} = a r_i + b."""

    a: float
    b: float
    radii: tuple
    r_inf: float


def tube_params(ase, K, R_x, R_u, delta, N=0, r0=0.0):
    """Worst-case Euclidean tube coefficients for feedback K.

    a bounds the error contraction over every admissible system, b the
    per-step drift anywhere in the constraint balls.  Raises TubeDiverges
    when a >= 1 (the recursion has no finite fixed point).
    """
    K = np.atleast_2d(np.asarray(K, dtype=float))
    n_x = ase.center.shape[0]
    IK = np.vstack([np.eye(n_x), K])
    r_delta = ase.radius_bound
    a = float(np.linalg.norm(ase.center @ IK, 2) + r_delta * np.linalg.norm(IK, 2))
    b = float(r_delta * np.hypot(R_x, R_u) + np.sqrt(delta))
    if a >= 1.0:
        raise TubeDiverges(f"contraction factor {a:.4f} >= 1")
    radii = [float(r0)]
    for _ in range(int(N)):
        radii.append(a * radii[-1] + b)
    return TubeParams(a, b, tuple(radii), b / (1.0 - a))


class ErrorTube:
    """P-metric tube: certified contraction plus trajectory-dependent drift.

    For any admissible Delta, error e and planned z = [x_bar; u_bar]:
    ||e+||_P <= a ||e||_P + ||D z|| + d.  Refreshing after a learning
    update keeps the smaller of the old and new contraction certificates
    (sound, because the updated set is included in the old one).
    """

    def __init__(self, ase, P, K, delta):
        self.P = _sym(np.asarray(P, dtype=float))
        self.K = np.atleast_2d(np.asarray(K, dtype=float))
        self.Ph, self.Phi, self.sqmn, self.sqmx = _psd_sqrt_pair(self.P)
        self.kP = float(np.linalg.norm(self.K @ self.Phi, 2))
        self.d = self.sqmx * float(np.sqrt(delta))
        self.a = None
        self.refresh(ase)

    def refresh(self, ase):
        a_new = contraction_sup(ase.xi, self.P, self.K)
        if self.a is None:
            self.a = a_new
        elif a_new is not None:
            self.a = min(self.a, a_new)
        self.cd = float(np.linalg.norm(self.Ph @ ase.ellipsoid.Gc_sqrt, 2))
        self.D = self.cd * ase.ellipsoid.Ei_sqrt
        self.Abar = ase.A_hat.copy()
        self.Bbar = ase.B_hat.copy()

    @property
    def diverges(self):
        return self.a is None or self.a >= 0.999

    def steady_radius(self):
        """P-norm radius sustained under zero nominal drift."""
        if self.diverges:
            raise TubeDiverges("no certified contraction below 1")
        return self.d / (1.0 - self.a)


def terminal_level(P_T, K, R_u, tube, R_x):
    """Largest level L_T of {x : x'P_T x <= L_T} kept feasible by u = Kx.

    Input headroom after subtracting the tube's steady error ball, plus a
    state-headroom term so the terminal set itself fits inside the
    tightened state ball.
    """
    P_T = _sym(np.asarray(P_T, dtype=float))
    K = np.atleast_2d(np.asarray(K, dtype=float))
    r_inf = tube.r_inf
    Pinv = np.linalg.inv(P_T)
    num_u = R_u - np.linalg.norm(K, 2) * r_inf
    num_x = R_x - r_inf
    if num_u <= 0 or num_x <= 0:
        raise EmptyTerminalSet(
            f"tube radius {r_inf:.4f} exhausts the input or state ball"
        )
    lam_u = float(np.linalg.eigvalsh(_sym(K @ Pinv @ K.T))[-1])
    lam_x = float(np.linalg.eigvalsh(Pinv)[-1])
    return float(min(num_u**2 / lam_u, num_x**2 / lam_x))


def steady_target(ase_center, x_ref):
    """Steady pair of the center model closest to x_ref.

    Lexicographic least squares on the null space of [Abar - I, Bbar]:
    first minimize ||x_s - x_ref||, then ||u_s|| among those minimizers.
    """
    Zc = np.atleast_2d(np.asarray(ase_center, dtype=float))
    n_x = Zc.shape[0]
    x_ref = np.atleast_1d(np.asarray(x_ref, dtype=float))
    M = np.hstack([Zc[:, :n_x] - np.eye(n_x), Zc[:, n_x:]])
    U, s, Vt = np.linalg.svd(M)
    rank = int(np.sum(s > 1e-12 * max(1.0, s[0] if s.size else 1.0)))
    Ns = Vt[rank:].T
    if Ns.shape[1] == 0:
        return np.zeros(n_x), np.zeros(Zc.shape[1] - n_x)
    Nx = Ns[:n_x]
    Nu = Ns[n_x:]
    c0, *_ = np.linalg.lstsq(Nx, x_ref, rcond=None)
    U2, s2, Vt2 = np.linalg.svd(Nx)
    rank2 = int(np.sum(s2 > 1e-12 * max(1.0, s2[0] if s2.size else 1.0)))
    Kx = Vt2[rank2:].T  # directions free at the first stage
    if Kx.shape[1]:
        t, *_ = np.linalg.lstsq(Nu @ Kx, -Nu @ c0, rcond=None)
        c0 = c0 + Kx @ t
    v = Ns @ c0
    return v[:n_x], v[n_x:]


_OCP_CACHE = {}


def _ocp_problem(n_x, n_u, N, with_term, Q, R, R_x, R_u):
    key = (n_x, n_u, N, with_term, Q.tobytes(), R.tobytes(), float(R_x), float(R_u))
    if key in _OCP_CACHE:
        return _OCP_CACHE[key]
    n_h = n_x + n_u
    Qh, _, _, _ = _psd_sqrt_pair(Q)
    Rh, _, _, _ = _psd_sqrt_pair(R)
    X = cp.Variable((n_x, N + 1))
    U = cp.Variable((n_u, N))
    rv = cp.Variable(N + 1)
    pars = {
        "xbar0": cp.Parameter(n_x),
        "r0": cp.Parameter(nonneg=True),
        "Ap": cp.Parameter((n_x, n_x)),
        "Bp": cp.Parameter((n_x, n_u)),
        "Dp": cp.Parameter((n_h, n_h)),
        "xsp": cp.Parameter(n_x),
        "usp": cp.Parameter(n_u),
        "ap": cp.Parameter(nonneg=True),
        "dp": cp.Parameter(nonneg=True),
        "kp": cp.Parameter(nonneg=True),
        "invsq": cp.Parameter(nonneg=True),
        "Php": cp.Parameter((n_x, n_x)),
        "Phxs": cp.Parameter(n_x),  # Php @ xs, precomputed to stay DPP
    }
    cons = [X[:, 0] == pars["xbar0"], rv[0] == pars["r0"]]
    cost = 0
    for i in range(N):
        cons.append(X[:, i + 1] == pars["Ap"] @ X[:, i] + pars["Bp"] @ U[:, i])
        z = cp.hstack([X[:, i], U[:, i]])
        cons.append(rv[i + 1] >= pars["ap"] * rv[i] + cp.norm(pars["Dp"] @ z) + pars["dp"])
        if i >= 1:  # the current state is already realized; protect the future
            cons.append(cp.norm(X[:, i]) + rv[i] * pars["invsq"] <= R_x)
        cons.append(cp.norm(U[:, i]) + pars["kp"] * rv[i] <= R_u)
        # constant sqrt factors keep the parametrized cost DPP-compliant
        cost += cp.sum_squares(Qh @ (X[:, i] - pars["xsp"]))
        cost += cp.sum_squares(Rh @ (U[:, i] - pars["usp"]))
    cons.append(cp.norm(X[:, N]) + rv[N] * pars["invsq"] <= R_x)
    cost += cp.sum_squares(pars["Php"] @ X[:, N] - pars["Phxs"])
    if with_term:
        pars["sLT"] = cp.Parameter(nonneg=True)
        cons.append(cp.norm(pars["Php"] @ X[:, N] - pars["Phxs"]) + rv[N] <= pars["sLT"])
    prob = cp.Problem(cp.Minimize(cost), cons)
    out = (prob, pars, X, U, rv)
    _OCP_CACHE[key] = out
    return out


class ControllerState:
    """Mutable per-run controller bookkeeping.

    Holds the ASE, the synthesis result, the P-metric tube, cost weights,
    horizon and constraint radii; the previous plan backs the shifted-
    candidate fallback when a solve fails numerically.
    """

    def __init__(self, ase, gains, Q, R, N, R_x, R_u, x0, delta):
        self.ase = ase
        self.gains = gains
        self.Q = _sym(np.asarray(Q, dtype=float))
        self.R = _sym(np.asarray(R, dtype=float))
        self.horizon = int(N)
        self.R_x = float(R_x)
        self.R_u = float(R_u)
        self.delta = float(delta)
        self.tube = ErrorTube(ase, gains.P_T, gains.K, delta)
        if self.tube.diverges:
            raise TubeDiverges("synthesized gain admits no contraction certificate")
        self.nominal_x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
        self.terminal_level = None
        srad = self._shifted_terminal_radius(np.zeros(self.nominal_x.size),
                                             np.zeros(gains.K.shape[0]))
        if srad is not None:
            self.terminal_level = srad**2
        self.plan = None  # (U columns remaining, xs, us) for the fallback
        self.vs_last = None
        self.last_ubar = np.zeros(gains.K.shape[0])
        self.infeasible_events = 0
        self.shift_fallbacks = 0
        self.last_terminal_used = False

    def _shifted_terminal_radius(self, xs, us):
        """P-norm terminal radius sqrt(L_T) re-centered at (xs, us)."""
        t = self.tube
        if t.diverges:
            return None
        rP = t.steady_radius()
        head_u = self.R_u - np.linalg.norm(us) - t.kP * rP
        head_x = self.R_x - np.linalg.norm(xs) - rP / t.sqmn
        if head_u <= 0 or head_x <= 0:
            return None
        return float(min(head_u / max(t.kP, 1e-12), head_x * t.sqmn))


def _try_solve(prob):
    try:
        prob.solve(solver="CLARABEL")
    except Exception:
        return False
    return prob.status in ("optimal", "optimal_inaccurate")


def solve_ocp(state, x_now, target=None):
    """Tightened finite-horizon problem from the measured state.

    Tries the terminal-constrained problem first when the shifted terminal
    set is nonempty and reachable, then the unconstrained-terminal variant.
    Returns (u_bar_seq, V_s); raises OcpInfeasible when no variant solves.
    """
    t = state.tube
    n_x = state.nominal_x.size
    n_u = state.gains.K.shape[0]
    N = state.horizon
    if target is None:
        xs, us = np.zeros(n_x), np.zeros(n_u)
    else:
        xs, us = (np.asarray(v, dtype=float) for v in target)
    e = np.asarray(x_now, dtype=float) - state.nominal_x
    r0v = float(np.sqrt(max(e @ t.P @ e, 0.0)))
    sLT = state._shifted_terminal_radius(xs, us)
    if sLT is not None:
        # skip the terminal attempt when the radius cannot shrink inside it
        aN = t.a**N
        reach_lb = aN * r0v + t.d * (1.0 - aN) / (1.0 - t.a)
        if sLT <= reach_lb:
            sLT = None
    attempts = ([True, False] if sLT is not None else [False])
    for with_term in attempts:
        prob, pars, X, U, rv = _ocp_problem(
            n_x, n_u, N, with_term, state.Q, state.R, state.R_x, state.R_u
        )
        pars["xbar0"].value = state.nominal_x
        pars["r0"].value = r0v
        pars["Ap"].value = t.Abar
        pars["Bp"].value = t.Bbar
        pars["Dp"].value = t.D
        pars["xsp"].value = xs
        pars["usp"].value = us
        pars["ap"].value = t.a
        pars["dp"].value = t.d
        pars["kp"].value = t.kP
        pars["invsq"].value = 1.0 / t.sqmn
        pars["Php"].value = t.Ph
        pars["Phxs"].value = t.Ph @ xs
        if with_term:
            pars["sLT"].value = sLT
        if _try_solve(prob) and U.value is not None:
            state.vs_last = float(prob.value)
            state.last_terminal_used = with_term
            Useq = np.atleast_2d(U.value).reshape(n_u, N)
            state.plan = (Useq[:, 1:].copy(), xs.copy(), us.copy())
            return Useq, float(prob.value)
    raise OcpInfeasible(f"all OCP variants failed at r0 = {r0v:.4f}")


def control_step(state, x_now, target=None):
    """One closed-loop step: solve, apply u = K e + u_bar0, advance nominal.

    On solver failure the previous plan is shifted one step (feasible by
    the tube argument while the tube is unchanged); with no plan left the
    clipped pure-feedback input is applied and counted as an infeasibility.
    """
    x_now = np.asarray(x_now, dtype=float)
    K = state.gains.K
    try:
        Useq, _ = solve_ocp(state, x_now, target=target)
        ubar0 = Useq[:, 0]
    except OcpInfeasible:
        if state.plan is not None and state.plan[0].shape[1] > 0:
            tail, xs, us = state.plan
            ubar0 = tail[:, 0]
            state.plan = (tail[:, 1:], xs, us)
            state.shift_fallbacks += 1
        else:
            state.infeasible_events += 1
            state.last_ubar = np.zeros(K.shape[0])
            u = K @ (x_now - state.nominal_x)
            n = np.linalg.norm(u)
            if n > state.R_u:
                u = u * (state.R_u / n)
            # nominal holds its position under a zero nominal input
            state.nominal_x = state.tube.Abar @ state.nominal_x
            return u
    state.last_ubar = np.asarray(ubar0, dtype=float).copy()
    u = ubar0 + K @ (x_now - state.nominal_x)
    state.nominal_x = state.tube.Abar @ state.nominal_x + state.tube.Bbar @ ubar0
    return u
