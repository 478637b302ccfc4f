"""Open-loop active learning: formation and contraction input design.

The formation phase excites the plant until the stacked data matrix H is
square and invertible; the contraction phase then greedily shrinks the
volume bound of the admissible-system ellipsoid, one weighted sample at a
time.  Both phases reduce to maximizing a convex quadratic over an input
ball, solved exactly through the secular equation.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .ase import DataSet, mu_hat
from .exceptions import CriterionNotMet, FormationStalled, NotAnAse, SingularMatrix


@dataclass(frozen=True)
class InputBall:
    """Euclidean input constraint set {u : ||u|| <= radius}."""

    radius: float
    dim: int

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.dim < 1:
            raise ValueError("dim must be at least 1")


@dataclass
class OpenLoopRun:
    """Record of one open-loop experiment.

    input_log holds (step, u, accepted) for every plant interaction;
    vol_trace holds the volume bound after each accepted sample once the
    dataset is square; state_log holds the state each input was designed at.
    """

    dataset: DataSet
    input_log: list = field(default_factory=list)
    vol_trace: list = field(default_factory=list)
    state_log: list = field(default_factory=list)


def _first_top_eigvec(V, top_mask):
    """First eigenvector of the top eigenspace, first nonzero entry positive."""
    v = V[:, int(np.argmax(top_mask))].copy()
    nz = np.nonzero(np.abs(v) > 1e-14)[0]
    if nz.size and v[nz[0]] < 0:
        v = -v
    return v


def max_quadratic_over_ball(M_uu, b, radius):
    """Maximize u'M u + 2b'u over ||u|| <= radius for M psd.

    The objective is convex so the maximum sits on the sphere; there the
    stationarity system (nu I - M) u = b with nu >= lmax(M) reduces to a
    secular equation in the eigenbasis of M.  The hard case (b orthogonal
    to the top eigenspace) is completed along the first top eigenvector.
    Returns (u_star, value).
    """
    M = np.atleast_2d(np.asarray(M_uu, dtype=float))
    M = 0.5 * (M + M.T)
    b = np.atleast_1d(np.asarray(b, dtype=float))
    r = float(radius)
    lam, V = np.linalg.eigh(M)
    lam = np.maximum(lam, 0.0)  # psd up to -tol_psd gets clamped
    beta = V.T @ b
    lmax = lam[-1]
    scale = max(1.0, lmax)
    gap = lmax - lam  # >= 0, zero on the top eigenspace
    top = gap <= 1e-10 * scale
    bnorm = np.linalg.norm(beta)

    if bnorm <= 1e-15 * scale * max(r, 1.0):
        u = r * _first_top_eigvec(V, top)
        return u, float(r * r * lmax)

    bnt = np.where(top, 0.0, beta)
    btop2 = float(np.sum(np.where(top, beta**2, 0.0)))
    gap_safe = np.where(top, 1.0, gap)
    snt2 = float(np.sum((bnt / gap_safe) ** 2))

    def excess(t):
        # ||u(lmax + t)||^2 - r^2 for t >= 0
        out = btop2 / t**2 if t > 0 else (np.inf if btop2 > 0 else 0.0)
        out += np.sum(bnt**2 / (gap_safe + t) ** 2)
        return out - r * r

    if btop2 > 0 or snt2 > r * r:
        hi = bnorm / r
        lo = hi
        while excess(lo) <= 0 and lo > 1e-280:
            lo /= 8.0
        if excess(lo) > 0:
            t = brentq(excess, lo, hi * (1 + 1e-7), xtol=1e-240, rtol=8.9e-16, maxiter=300)
        else:
            t = lo
        y = np.where(top, beta / t, bnt / (gap_safe + t))
        u = V @ y
    else:
        y = bnt / gap_safe
        tau = np.sqrt(max(r * r - snt2, 0.0))
        u = V @ y + tau * _first_top_eigvec(V, top)
        y = V.T @ u
    val = float(y @ (lam * y) + 2.0 * beta @ y)
    return u, val


def _range_projector(H):
    """Orthogonal projector onto range(H); tolerant of rank deficiency."""
    if H.shape[1] == 0:
        return np.zeros((H.shape[0], H.shape[0]))
    U, s, _ = np.linalg.svd(H, full_matrices=False)
    rank = int(np.sum(s > 1e-12 * max(1.0, s[0])))
    Q = U[:, :rank]
    return Q @ Q.T


def residual_criterion_JF(H, x, u):
    """Norm of the component of [x; u] orthogonal to the columns of H."""
    h = np.concatenate([np.atleast_1d(x), np.atleast_1d(u)]).astype(float)
    H = np.asarray(H, dtype=float)
    if H.size == 0 or H.shape[1] == 0:
        return float(np.linalg.norm(h))
    P = _range_projector(H)
    return float(np.linalg.norm(h - P @ h))


def design_formation_input(H, x, ball):
    """Input maximizing the projection residual of [x; u] over the ball.

    With an empty H this is argmax ||u||, broken deterministically to
    radius * e1.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n_x = x.size
    n_u = ball.dim
    H = np.asarray(H, dtype=float).reshape(n_x + n_u, -1)
    if H.shape[1] == 0:
        u, _ = max_quadratic_over_ball(np.eye(n_u), np.zeros(n_u), ball.radius)
        return u
    W = np.eye(n_x + n_u) - _range_projector(H)
    Wuu = W[n_x:, n_x:]
    Wux = W[n_x:, :n_x]
    u, _ = max_quadratic_over_ball(Wuu, Wux @ x, ball.radius)
    return u


def _as_rng(rng_seed):
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    return np.random.default_rng(rng_seed)


def _boundary_input(rng, ball):
    v = rng.standard_normal(ball.dim)
    n = np.linalg.norm(v)
    if n == 0.0:
        v, n = np.ones(ball.dim), np.sqrt(ball.dim)
    return ball.radius * v / n


def phase_formation(plant, ball, rng_seed, log=None, states=None):
    """Collect n_h linearly independent samples (weights all one).

    Non-innovative steps apply a random boundary input without collecting.
    Raises FormationStalled after 50 * n_h plant steps.
    """
    rng = _as_rng(rng_seed)
    n_x = np.atleast_1d(plant.state).size
    n_u = ball.dim
    n_h = n_x + n_u
    H = np.zeros((n_h, 0))
    Xdot = np.zeros((n_x, 0))
    for step in range(50 * n_h):
        if H.shape[1] == n_h:
            break
        x = np.atleast_1d(plant.state).astype(float)
        u = design_formation_input(H, x, ball)
        jf = residual_criterion_JF(H, x, u)
        accepted = jf > 1e-9 * (1.0 + np.linalg.norm(x))
        if not accepted:
            u = _boundary_input(rng, ball)
        x_next = plant.apply(u)
        if accepted:
            H = np.column_stack([H, np.concatenate([x, u])])
            Xdot = np.column_stack([Xdot, x_next])
        if log is not None:
            log.append((len(log), np.array(u), bool(accepted)))
        if states is not None:
            states.append(x)
    if H.shape[1] < n_h:
        raise FormationStalled(
            f"collected {H.shape[1]} of {n_h} samples in {50 * n_h} steps"
        )
    return DataSet(H, Xdot, np.ones(n_h), plant.delta, n_x, n_u)


def contraction_gain(H, Lambda, x, u):
    """m = h' (H diag(Lambda) H')^{-1} h for h = [x; u]."""
    h = np.concatenate([np.atleast_1d(x), np.atleast_1d(u)]).astype(float)
    return _gain(np.asarray(H, dtype=float), np.asarray(Lambda, dtype=float), h)


def _weighted_gram_inv(H, Lambda):
    G = (H * Lambda) @ H.T
    try:
        c = np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        raise NotAnAse("weighted data Gram matrix is not positive definite")
    Ginv = np.linalg.inv(c.T) @ np.linalg.inv(c)
    return Ginv


def _gain(H, Lambda, h):
    return float(h @ _weighted_gram_inv(H, Lambda) @ h)


def optimal_lambda(m, Lambda_trace, n_h):
    """Volume-optimal weight for a sample with gain m (requires n_h >= 2)."""
    if n_h < 2:
        raise ValueError("n_h must be at least 2")
    if not m > n_h / Lambda_trace:
        raise CriterionNotMet(f"gain {m} does not exceed {n_h / Lambda_trace}")
    return (Lambda_trace * m - n_h) / ((n_h - 1) * m)


def contraction_ratio_fp(H, Lambda, h, lam, n_x):
    """Volume-bound ratio after appending h with weight lam.

    Uses the rank-one determinant update det(G + lam h h') = (1 + lam m) det(G),
    so only the gain m is recomputed.
    """
    H = np.asarray(H, dtype=float)
    Lambda = np.asarray(Lambda, dtype=float)
    h = np.asarray(h, dtype=float)
    n_h = H.shape[0]
    m = _gain(H, Lambda, h)
    tr = float(np.sum(Lambda))
    return ((tr + lam) / tr) ** (n_x * n_h / 2.0) * (1.0 + lam * m) ** (-n_x / 2.0)


def design_contraction_input(H, Lambda, x, ball):
    """Input maximizing the gain h' (H diag(Lambda) H')^{-1} h over the ball."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n_x = x.size
    S = _weighted_gram_inv(np.asarray(H, dtype=float), np.asarray(Lambda, dtype=float))
    Suu = S[n_x:, n_x:]
    Sux = S[n_x:, :n_x]
    u, _ = max_quadratic_over_ball(Suu, Sux @ x, ball.radius)
    return u


def phase_contraction(ds, plant, ball, T_L, rng_seed, log=None, vol_trace=None,
                      states=None, target_cols=None):
    """Run T_L contraction steps, appending weighted samples when they shrink
    the volume bound.

    Steps whose gain fails the shrink criterion apply a random boundary
    input without collecting.  When target_cols is given the phase instead
    runs until the dataset holds that many columns (capped at 50 per missing
    column).
    """
    rng = _as_rng(rng_seed)
    n_h = ds.n_h
    if target_cols is None:
        budget = int(T_L)
    else:
        budget = 50 * max(target_cols - ds.n, 0)
    for _ in range(budget):
        if target_cols is not None and ds.n >= target_cols:
            break
        x = np.atleast_1d(plant.state).astype(float)
        u = design_contraction_input(ds.H, ds.lam, x, ball)
        h = np.concatenate([x, u])
        m = _gain(ds.H, ds.lam, h)
        tr = float(np.sum(ds.lam))
        accept = m > n_h / tr + 1e-12
        if accept:
            lam_star = optimal_lambda(m, tr, n_h)
            x_next = plant.apply(u)
            ds = ds.appended(h, x_next, lam_star)
            if vol_trace is not None:
                vol_trace.append(mu_hat(ds.H, ds.lam, ds.delta, ds.n_x))
        else:
            u = _boundary_input(rng, ball)
            plant.apply(u)
        if log is not None:
            log.append((len(log), np.array(u), bool(accept)))
        if states is not None:
            states.append(x)
    if target_cols is not None and ds.n < target_cols:
        raise FormationStalled(
            f"contraction reached {ds.n} of {target_cols} columns"
        )
    return ds


def collect_openloop(plant, ball, T_L, rng_seed, target_cols=None):
    """Formation followed by contraction, with full per-step bookkeeping."""
    rng = _as_rng(rng_seed)
    log, states = [], []
    ds = phase_formation(plant, ball, rng, log=log, states=states)
    vol_trace = [mu_hat(ds.H, ds.lam, ds.delta, ds.n_x)]
    ds = phase_contraction(ds, plant, ball, T_L, rng, log=log,
                           vol_trace=vol_trace, states=states,
                           target_cols=target_cols)
    return OpenLoopRun(ds, log, vol_trace, states)


def save_openloop_run(run, path):
    """Write one CSV row per step: (step, accepted, u..., x..., mu_hat).

    x is the state each input was designed at; mu_hat is the volume bound
    once the dataset is square, carried forward across rejected steps.
    """
    n_u = run.dataset.n_u
    n_x = run.dataset.n_x
    with open(path, "w") as fh:
        ucols = ",".join(f"u{j}" for j in range(n_u))
        xcols = ",".join(f"x{j}" for j in range(n_x))
        fh.write(f"step,accepted,{ucols},{xcols},mu_hat\n")
        vol_iter = iter(run.vol_trace)
        vol = float("nan")
        collected = 0
        for idx, (step, u, accepted) in enumerate(run.input_log):
            if accepted:
                collected += 1
                if collected >= run.dataset.n_h:
                    vol = next(vol_iter, vol)
            x = run.state_log[idx] if idx < len(run.state_log) else np.full(n_x, np.nan)
            ustr = ",".join(f"{v:.12g}" for v in np.atleast_1d(u))
            xstr = ",".join(f"{v:.12g}" for v in np.atleast_1d(x))
            fh.write(f"{step},{int(accepted)},{ustr},{xstr},{vol}\n")


def det_via_projections(A, tol=1e-12):
    """|det A| as the product of successive column projection residuals.

    Equivalent to the R factor of a QR decomposition built one column at a
    time; raises SingularMatrix when a residual collapses.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("matrix must be square")
    scale = max(1.0, float(np.linalg.norm(A, "fro")))
    Q = np.zeros((n, 0))
    out = 1.0
    for i in range(n):
        a = A[:, i]
        r = a - Q @ (Q.T @ a)
        r = r - Q @ (Q.T @ r)  # second pass keeps the basis orthogonal
        nr = float(np.linalg.norm(r))
        if nr <= tol * scale:
            raise SingularMatrix(f"projection residual {nr} at column {i}")
        out *= nr
        Q = np.column_stack([Q, r / nr])
    return out
