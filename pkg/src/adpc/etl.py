"""Event-triggered learning during closed-loop operation.

Each step offers the pair (h(k-1), x(k)) to the learner.  A one-parameter
LMI decides whether the sample can exclude anything from the admissible
set; only then is the dataset grown and the weights re-optimized, which
certifies a nested, never-growing admissible set.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .ase import DataSet, make_ase, xi_single
from .conic import one_param_psd_feasible, sigma_max
from .ellipsoid import volume
from .exceptions import DegenerateSet, NotAnAse


@dataclass
class TriggerRecord:
    """Outcome of one learning opportunity."""

    k: int
    triggered: bool
    alpha: Optional[float]
    sigma_star: Optional[float]
    dataset_size: int = 0

    def __post_init__(self):
        if (self.alpha is None) == (self.sigma_star is None):
            raise ValueError("exactly one of alpha / sigma_star must be set")


def trigger_check(xi_prev, h_last, x_next, delta, tol=None):
    """Certificate that the sample carries no new exclusion power.

    Returns alpha >= 0 when xi(h_last, x_next) - alpha * Xi_prev >= 0 is
    feasible (skip learning), None when the sample is informative.
    """
    xi_new = xi_single(h_last, x_next, delta)
    return one_param_psd_feasible(xi_new, xi_prev, tol=tol)


def _prune_zero_weight(ds, cap):
    """Drop lambda = 0 columns oldest-first once the cap is exceeded.

    Zero-weight columns contribute nothing to the information matrix, so
    removing them leaves the set description unchanged.
    """
    if cap is None or ds.n <= cap:
        return ds
    zero = ds.lam <= 1e-12 * max(float(ds.lam.max()), 1.0)
    keep = np.ones(ds.n, dtype=bool)
    excess = ds.n - cap
    for i in range(ds.n):
        if excess == 0:
            break
        if zero[i]:
            keep[i] = False
            excess -= 1
    if keep.all():
        return ds
    return DataSet(
        ds.H[:, keep], ds.Xdot[:, keep], ds.lam[keep], ds.delta, ds.n_x, ds.n_u
    )


def learn_step(ase, h_last, x_next, k=0, cap=200, tol=None):
    """One learning opportunity: trigger, grow, re-weight.

    Returns (ase, record): the same state with the skip certificate alpha,
    or a rebuilt state whose information matrix lost at least sigma_star
    along the identity block.  Propagates Infeasible from the weight
    problem (a contract violation, the old weights are always feasible).
    """
    alpha = trigger_check(ase.xi, h_last, x_next, ase.dataset.delta, tol=tol)
    if alpha is not None:
        return ase, TriggerRecord(k, False, float(alpha), None, ase.dataset.n)
    grown = ase.dataset.appended(h_last, x_next, weight=0.0)
    res = sigma_max(ase.xi, grown, tol=tol)
    try:
        cand = make_ase(_prune_zero_weight(grown.with_weights(res.lambda_s), cap))
        # the weight problem certifies nesting only up to solver slack; a
        # re-weighting that inflates the exact volume is numerical noise and
        # is rejected like any other degenerate answer
        if volume(cand.ellipsoid) > volume(ase.ellipsoid) * (1.0 + 1e-9):
            raise DegenerateSet("re-weighting inflated the exact volume")
        new_ase = cand
        sigma = float(res.sigma_star)
    except (DegenerateSet, NotAnAse):
        # keep the old geometry (zero weight on the new column) rather than
        # adopt a numerically untrustworthy set
        new_ase = make_ase(_prune_zero_weight(grown, cap))
        sigma = 0.0
    return new_ase, TriggerRecord(k, True, None, sigma, new_ase.dataset.n)


def save_trigger_log(records, path):
    """One CSV row per step: k, triggered, alpha, sigma_star, dataset_size."""
    with open(path, "w") as fh:
        fh.write("k,triggered,alpha,sigma_star,dataset_size\n")
        for r in records:
            a = "" if r.alpha is None else f"{r.alpha:.12g}"
            s = "" if r.sigma_star is None else f"{r.sigma_star:.12g}"
            fh.write(f"{r.k},{int(r.triggered)},{a},{s},{r.dataset_size}\n")
