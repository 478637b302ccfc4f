"""Admissible system ellipsoids built from data.

A weighted data set (H, Xdot, Lambda, delta) induces the information matrix
Xi whose quadratic form [I, D] Xi [I; D'] >= 0 collects every system matrix
D = [A B] consistent with the data under the disturbance bound ||w||^2 < delta.
When H Lambda H' > 0 the set is a matrix ellipsoid over Z = D'.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import ellipsoid as ell_mod
from .ellipsoid import DEFAULT_TOL, MatrixEllipsoid, _spectral_scale, _sym, make_ellipsoid
from .exceptions import NotAnAse, NotPositiveDefinite


@dataclass
class DataSet:
    """Paired regressor/response columns with diagonal weights.

    H is n_h x n with columns h(i) = [x(i); u(i)], Xdot is n_x x n with the
    successor states, lam holds the nonnegative weights, delta > 0 is the
    noise bound.
    """

    H: np.ndarray
    Xdot: np.ndarray
    lam: np.ndarray
    delta: float
    n_x: int
    n_u: int

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.Xdot = np.atleast_2d(np.asarray(self.Xdot, dtype=float))
        self.lam = np.asarray(self.lam, dtype=float).ravel()
        n_h = self.n_x + self.n_u
        if self.H.shape[0] != n_h:
            raise ValueError(f"H must have {n_h} rows, got {self.H.shape[0]}")
        if self.Xdot.shape[0] != self.n_x:
            raise ValueError(f"Xdot must have {self.n_x} rows")
        if self.H.shape[1] != self.Xdot.shape[1] or self.H.shape[1] != self.lam.size:
            raise ValueError("column counts of H, Xdot, lam must agree")
        if np.any(self.lam < 0):
            raise ValueError("weights must be nonnegative")
        if self.delta <= 0:
            raise ValueError("delta must be positive (noise-free case excluded)")

    @property
    def n(self):
        return self.H.shape[1]

    @property
    def n_h(self):
        return self.n_x + self.n_u

    def appended(self, h, xdot, weight=0.0):
        """New DataSet with one extra column."""
        return DataSet(
            np.hstack([self.H, np.asarray(h, dtype=float).reshape(-1, 1)]),
            np.hstack([self.Xdot, np.asarray(xdot, dtype=float).reshape(-1, 1)]),
            np.concatenate([self.lam, [float(weight)]]),
            self.delta,
            self.n_x,
            self.n_u,
        )

    def with_weights(self, lam):
        return DataSet(self.H, self.Xdot, lam, self.delta, self.n_x, self.n_u)


def xi_single(h, xdot, delta):
    """Per-sample information block [[dI - xx', xh'], [hx', -hh']]."""
    h = np.asarray(h, dtype=float).ravel()
    xd = np.asarray(xdot, dtype=float).ravel()
    n_x = xd.size
    top = np.hstack([delta * np.eye(n_x) - np.outer(xd, xd), np.outer(xd, h)])
    bot = np.hstack([np.outer(h, xd), -np.outer(h, h)])
    return np.vstack([top, bot])


def xi_matrix(ds):
    """Information matrix Xi of the whole weighted data set (block formula)."""
    HL = ds.H * ds.lam
    XL = ds.Xdot * ds.lam
    tr = float(np.sum(ds.lam))
    top = np.hstack([tr * ds.delta * np.eye(ds.n_x) - XL @ ds.Xdot.T, XL @ ds.H.T])
    bot = np.hstack([ds.H @ XL.T, -HL @ ds.H.T])
    return _sym(np.vstack([top, bot]))


def to_ellipsoid(ds, tol=None):
    """The ASE as a matrix ellipsoid over Z = D' (n_h x n_x)."""
    E = _sym((ds.H * ds.lam) @ ds.H.T)
    F = -(ds.H * ds.lam) @ ds.Xdot.T
    G = _sym((ds.Xdot * ds.lam) @ ds.Xdot.T - np.sum(ds.lam) * ds.delta * np.eye(ds.n_x))
    try:
        return make_ellipsoid(E, F, G, tol=tol)
    except NotPositiveDefinite as exc:
        raise NotAnAse("H Lambda H' is not positive definite") from exc


def mu_hat(H, lam, delta, n_x, beta=1.0):
    """Response-free volume bound beta (tr(L) d)^(nx nh/2) det(HLH')^(-nx/2).

    Exact for square data (n = n_h), an upper bound otherwise.  n_x must be
    passed because H alone does not determine the state dimension.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    lam = np.asarray(lam, dtype=float).ravel()
    n_h = H.shape[0]
    E = _sym((H * lam) @ H.T)
    if np.linalg.eigvalsh(E)[0] <= DEFAULT_TOL.tol_psd * _spectral_scale(E):
        raise NotAnAse("H Lambda H' is not positive definite")
    tr = float(np.sum(lam))
    sign, logdet = np.linalg.slogdet(E)
    if sign <= 0:
        raise NotAnAse("nonpositive determinant of H Lambda H'")
    return beta * np.exp(0.5 * n_x * n_h * np.log(tr * delta) - 0.5 * n_x * logdet)


def overapprox_square(ds):
    """Square-data surrogate (H_s, Xdot_s) whose ASE with weights
    (tr(Lambda)/n_h) I contains the original ASE.

    H_s = (n_h/tr)^(1/2) U (SS')^(1/2) and Xdot_s = (n_h/tr)^(1/2) X L^(1/2) V_nh
    from the SVD of H Lambda^(1/2) = U S V'.
    """
    tr = float(np.sum(ds.lam))
    if tr <= 0:
        raise NotAnAse("zero total weight")
    Hl = ds.H * np.sqrt(ds.lam)
    U, s, Vt = np.linalg.svd(Hl)
    n_h = ds.n_h
    if s.size < n_h or s[n_h - 1] <= DEFAULT_TOL.tol_psd * max(1.0, s[0]):
        raise NotAnAse("H Lambda H' is rank deficient")
    scale = np.sqrt(n_h / tr)
    S_pad = np.zeros(n_h)
    S_pad[: s.size] = s
    H_s = scale * (U * S_pad)
    Xdot_s = scale * (ds.Xdot * np.sqrt(ds.lam)) @ Vt[:n_h, :].T
    return H_s, Xdot_s


class AseState:
    """Information matrix plus its scalar summaries for one data set."""

    def __init__(self, dataset, tol=None):
        self.dataset = dataset
        self.xi = xi_matrix(dataset)
        self.ellipsoid = to_ellipsoid(dataset, tol=tol)  # raises NotAnAse
        self.center = self.ellipsoid.Zc.T                # n_x x n_h
        Gc = self.ellipsoid.Gc
        E = self.ellipsoid.E
        self.radius_bound = float(
            np.sqrt(np.linalg.eigvalsh(Gc)[-1] / np.linalg.eigvalsh(E)[0])
        )
        self.vol_bound = mu_hat(dataset.H, dataset.lam, dataset.delta, dataset.n_x)
        self.is_ase = True

    @property
    def A_hat(self):
        return self.center[:, : self.dataset.n_x]

    @property
    def B_hat(self):
        return self.center[:, self.dataset.n_x :]

    def membership_residual(self, A, B):
        """min eigenvalue of [I, D] Xi [I; D'] for D = [A B]; >= -tol when
        the pair is admissible."""
        D = np.hstack([A, B])
        V = np.vstack([np.eye(self.dataset.n_x), D.T])
        return float(np.linalg.eigvalsh(_sym(V.T @ self.xi @ V))[0])

    def slater_ok(self, tol=None):
        tol = tol or DEFAULT_TOL
        V = np.vstack([np.eye(self.dataset.n_x), self.center.T])
        qf = _sym(V.T @ self.xi @ V)
        return np.linalg.eigvalsh(qf)[0] > tol.tol_psd * _spectral_scale(qf)


def make_ase(ds, tol=None):
    """Validate the data set as an ASE and build its state."""
    return AseState(ds, tol=tol)


def save_dataset(ds, prefix):
    """Write the data set as an H/Xdot CSV pair plus a JSON sidecar."""
    np.savetxt(f"{prefix}_H.csv", ds.H.T, delimiter=",")
    np.savetxt(f"{prefix}_Xdot.csv", ds.Xdot.T, delimiter=",")
    with open(f"{prefix}_meta.json", "w") as fh:
        json.dump(
            {"lambda": ds.lam.tolist(), "delta": ds.delta, "n_x": ds.n_x, "n_u": ds.n_u},
            fh,
        )


def load_dataset(prefix):
    with open(f"{prefix}_meta.json") as fh:
        meta = json.load(fh)
    n = len(meta["lambda"])
    n_h = meta["n_x"] + meta["n_u"]
    # rows are samples in the files; 1-D loads need explicit reshaping
    H = np.loadtxt(f"{prefix}_H.csv", delimiter=",").reshape(n, n_h).T
    Xdot = np.loadtxt(f"{prefix}_Xdot.csv", delimiter=",").reshape(n, meta["n_x"]).T
    return DataSet(H, Xdot, np.asarray(meta["lambda"]), meta["delta"], meta["n_x"], meta["n_u"])
