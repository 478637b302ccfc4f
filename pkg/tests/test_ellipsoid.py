import numpy as np
import pytest

from adpc.ellipsoid import (
    center,
    concave_alpha_search,
    contains,
    inclusion_certificate,
    make_ellipsoid,
    qmi_form,
    sample_member,
    volume,
)
from adpc.exceptions import DegenerateSet, NotPositiveDefinite, SlaterViolated


def random_valid(rng, p, q):
    A = rng.standard_normal((p, p))
    E = A @ A.T + p * np.eye(p)
    F = rng.standard_normal((p, q))
    # pick G so that F'E^-1F - G is comfortably positive definite
    Gc = np.eye(q) * (1.0 + rng.uniform())
    G = F.T @ np.linalg.solve(E, F) - Gc
    return make_ellipsoid(E, F, G)


def test_make_unit_interval():
    ell = make_ellipsoid([[1.0]], [[0.0]], [[-1.0]])
    assert ell.Zc == pytest.approx(0.0)
    assert ell.Gc == pytest.approx(1.0)


def test_make_singleton_is_degenerate():
    with pytest.raises(DegenerateSet):
        make_ellipsoid([[1.0]], [[0.0]], [[0.0]])


def test_make_symmetric_zero_center():
    E = np.array([[2.0, 0.0], [0.0, 2.0]])
    F = np.zeros((2, 1))
    G = np.array([[-2.0]])
    ell = make_ellipsoid(E, F, G)
    assert np.allclose(ell.Zc, 0.0)


def test_make_rejects_indefinite_E():
    with pytest.raises(NotPositiveDefinite):
        make_ellipsoid([[-1.0]], [[0.0]], [[-1.0]])


def test_center_zero_cross_term():
    ell = make_ellipsoid(np.eye(2), np.zeros((2, 2)), -np.eye(2))
    assert np.allclose(center(ell), 0.0)


def test_center_scalar_solve():
    ell = make_ellipsoid([[2.0]], [[-4.0]], [[0.0]])
    assert center(ell) == pytest.approx(2.0)


def test_center_membership_random():
    rng = np.random.default_rng(0)
    for _ in range(20):
        ell = random_valid(rng, 2, 2)
        Zc = center(ell)
        # (Z - Zc)'E(Z - Zc) <= Gc holds trivially at Z = Zc
        assert contains(ell, Zc)


def test_contains_scalar_cases():
    ell = make_ellipsoid([[1.0]], [[0.0]], [[-1.0]])
    assert contains(ell, [[0.0]])
    assert not contains(ell, [[2.0]])
    assert contains(ell, [[1.0]])  # boundary within tolerance


def test_volume_interval_oracle():
    # p=q=1 with beta=2: measure equals the root-formula interval length
    rng = np.random.default_rng(1)
    for _ in range(100):
        E = rng.uniform(0.2, 5.0)
        F = rng.uniform(-2.0, 2.0)
        G = F * F / E - rng.uniform(0.1, 4.0)  # ensures F^2/E - G > 0
        ell = make_ellipsoid([[E]], [[F]], [[G]])
        length = 2.0 * np.sqrt(F * F - E * G) / E
        assert volume(ell, beta=2.0) == pytest.approx(length, rel=1e-10)


def test_volume_specific_values():
    assert volume(make_ellipsoid([[1.0]], [[0.0]], [[-1.0]]), beta=2.0) == pytest.approx(2.0)
    assert volume(make_ellipsoid([[4.0]], [[0.0]], [[-1.0]]), beta=2.0) == pytest.approx(1.0)


def test_volume_homogeneity():
    # scaling (E,F,G) -> (cE,cF,cG) leaves the measure unchanged when p=q
    rng = np.random.default_rng(2)
    for _ in range(20):
        ell = random_valid(rng, 2, 2)
        c = rng.uniform(0.3, 7.0)
        scaled = make_ellipsoid(c * ell.E, c * ell.F, c * ell.G)
        assert volume(scaled) == pytest.approx(volume(ell), rel=1e-9)


def test_volume_orthogonal_invariance():
    rng = np.random.default_rng(3)
    for _ in range(20):
        ell = random_valid(rng, 3, 2)
        T, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        moved = make_ellipsoid(T.T @ ell.E @ T, T.T @ ell.F, ell.G)
        assert volume(moved) == pytest.approx(volume(ell), rel=1e-9)


def test_inclusion_reflexive():
    rng = np.random.default_rng(4)
    ell = random_valid(rng, 2, 2)
    M = qmi_form(ell)
    alpha = inclusion_certificate(M, M, center(ell).T)
    assert alpha is not None
    assert np.linalg.eigvalsh(M - alpha * M)[0] >= -1e-7


def test_inclusion_scaling():
    rng = np.random.default_rng(5)
    ell = random_valid(rng, 2, 2)
    M = qmi_form(ell)
    alpha = inclusion_certificate(M, 2.0 * M, center(ell).T)
    assert alpha is not None
    assert np.linalg.eigvalsh(2.0 * M - alpha * M)[0] >= -1e-7


def test_slater_violated():
    ell = make_ellipsoid([[1.0]], [[0.0]], [[-1.0]])
    M = qmi_form(ell)
    # Z = 5 is far outside the unit interval, so the form is negative there
    with pytest.raises(SlaterViolated):
        inclusion_certificate(M, M, [[5.0]])


def test_certified_inclusion_implies_sampled_membership():
    # inner (E,F,G) vs outer (E,F,G - I): shrinking G grows the set
    rng = np.random.default_rng(6)
    inner = random_valid(rng, 2, 2)
    outer = make_ellipsoid(inner.E, inner.F, inner.G - np.eye(2))
    alpha = inclusion_certificate(qmi_form(inner), qmi_form(outer), center(inner).T)
    assert alpha is not None
    for _ in range(1000):
        Z = sample_member(inner, rng)
        assert contains(outer, Z)


def test_recentred_inclusion_property():
    # certified E' in E implies members of E' recentred by center(E) stay in
    # the recentred outer set {Z - Zc : Z in E}
    rng = np.random.default_rng(7)
    inner = random_valid(rng, 2, 2)
    outer = make_ellipsoid(inner.E, inner.F, inner.G - 0.5 * np.eye(2))
    assert inclusion_certificate(qmi_form(inner), qmi_form(outer), center(inner).T) is not None
    recentred = make_ellipsoid(outer.E, np.zeros((2, 2)), -outer.Gc)
    for _ in range(500):
        Z = sample_member(inner, rng)
        assert contains(recentred, Z - center(outer))


def test_alpha_search_grid_oracle():
    # the concave search agrees with a dense grid feasibility scan
    rng = np.random.default_rng(8)
    for _ in range(25):
        n = 3
        A = rng.standard_normal((n, n))
        N = (A + A.T) / 2
        B = rng.standard_normal((n, n))
        M = (B + B.T) / 2 + 0.5 * np.eye(n)
        found = concave_alpha_search(N, M)
        grid = np.linspace(0.0, 1000.0, 10000)
        grid_ok = any(np.linalg.eigvalsh(M - a * N)[0] >= -1e-8 * max(1, np.linalg.norm(M, 2)) for a in grid)
        if found is not None:
            assert np.linalg.eigvalsh(M - found * N)[0] >= -1e-7 * max(1, np.linalg.norm(M, 2))
        elif grid_ok:
            # grid may find feasibility only past the doubling cap; tolerate
            # disagreement just when the grid alpha is enormous
            ok_alphas = [a for a in grid if np.linalg.eigvalsh(M - a * N)[0] >= -1e-8]
            assert min(ok_alphas) > 2.0 ** 60


def test_sample_member_boundary():
    rng = np.random.default_rng(9)
    ell = random_valid(rng, 2, 2)
    for _ in range(200):
        Z = sample_member(ell, rng, boundary=True)
        assert contains(ell, Z)
