import math

import numpy as np
import pytest
import scipy.linalg
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import central_fd, rel_err
from mipet.matexp import (
    FAMILIES,
    IPEUnit,
    MatrixExpError,
    commutation_probe,
    equivariance_deviation,
    ipe_apply,
    ipe_invert,
    matrix_exp,
    summarize_probe,
    symmetrize,
    write_probe_csv,
)


def t(x):
    return torch.tensor(x, dtype=torch.float64)


def long_series(a: np.ndarray, terms: int = 60) -> np.ndarray:
    out, term = np.eye(len(a)), np.eye(len(a))
    for k in range(1, terms):
        term = term @ a / k
        out = out + term
    return out


def test_symmetrize_examples():
    assert torch.equal(symmetrize(t([[1.0, 3], [1, 1]])), t([[1.0, 2], [2, 1]]))
    s = t([[2.0, -1], [-1, 5]])
    assert torch.equal(symmetrize(s), s)
    assert torch.equal(symmetrize(t([[0.0, 2], [-2, 0]])), torch.zeros(2, 2))
    with pytest.raises(ValueError, match="square"):
        symmetrize(torch.zeros(2, 3))


@given(arrays(np.float64, (4, 4), elements=st.floats(-5, 5)))
def test_symmetrize_exact(m):
    s = symmetrize(t(m))
    assert torch.equal(s, s.T)


def test_diagonal_closed_form():
    out = matrix_exp(t([[0.0, 0], [0, 1]]))
    assert torch.allclose(out, t([[1.0, 0], [0, math.e]]), atol=1e-12, rtol=0)


def test_nilpotent_closed_form():
    assert torch.allclose(matrix_exp(t([[0.0, 1], [0, 0]])), t([[1.0, 1], [0, 1]]), atol=1e-12, rtol=0)


def test_jordan_block_matches_long_series_and_is_asymmetric():
    a = np.array([[1.0, 1], [0, 1]])
    # frozen from a 60-term series; equals e * [[1, 1], [0, 1]]
    frozen = np.array([[2.718281828459045, 2.718281828459045], [0.0, 2.718281828459045]])
    assert np.allclose(long_series(a), frozen, atol=1e-14)
    out = matrix_exp(t(a)).numpy()
    assert np.allclose(out, frozen, atol=1e-12)
    assert abs(out[0, 1] - out[1, 0]) > 1.0


@given(arrays(np.float64, (5, 5), elements=st.floats(-3, 3)))
def test_matches_scipy_expm(a):
    assert np.allclose(matrix_exp(t(a)).numpy(), scipy.linalg.expm(a), rtol=1e-10, atol=1e-10)


@given(arrays(np.float64, (4, 4), elements=st.floats(-2, 2)))
def test_symmetry_preserved_and_positive_det(m):
    s = m + m.T
    e = matrix_exp(t(s))
    assert torch.allclose(e, e.T, atol=1e-12, rtol=0)
    assert float(torch.linalg.det(matrix_exp(t(m)))) > 0


@given(arrays(np.float64, (4, 4), elements=st.floats(-2, 2)))
def test_inverse_product_identity(m):
    prod = matrix_exp(t(m)) @ matrix_exp(-t(m))
    assert torch.allclose(prod, torch.eye(4), atol=1e-8, rtol=0)


def test_max_terms_error_carries_residual():
    with pytest.raises(MatrixExpError) as info:
        matrix_exp(t([[0.3, 0.1], [0.2, 0.4]]), max_terms=2)
    assert info.value.residual > 1e-12
    assert info.value.terms == 2


def test_invalid_inputs():
    with pytest.raises(ValueError):
        matrix_exp(torch.zeros(2, 3))
    with pytest.raises(ValueError):
        matrix_exp(torch.eye(2), tol=0)


def test_matrix_exp_gradient_vs_fd():
    g = np.random.default_rng(3)
    a = t(g.standard_normal((3, 3))).requires_grad_(True)
    w = t(g.standard_normal((3, 3)))

    def f(x):
        return (matrix_exp(x) * w).sum()

    (auto,) = torch.autograd.grad(f(a), a)
    assert rel_err(auto, central_fd(f, a.detach())) < 1e-6


def _unit(n=3, mode="symmetric", gen=None):
    u = IPEUnit(n, mode)
    if gen is not None:
        with torch.no_grad():
            u.generator.copy_(t(gen))
    return u


@pytest.mark.parametrize("mode", ["symmetric", "asymmetric"])
def test_zero_generator_is_identity(mode):
    z = t(np.random.default_rng(0).standard_normal((4, 3)))
    u = _unit(mode=mode, gen=np.zeros((3, 3)))
    assert torch.equal(ipe_apply(u, z), z)
    assert torch.equal(ipe_invert(u, z), z)


def test_linear_mode():
    z = t(np.ones((2, 3)))
    u = _unit(mode="linear", gen=np.zeros((3, 3)))
    assert torch.equal(ipe_apply(u, z), torch.zeros(2, 3))
    with pytest.raises(ValueError, match="linear"):
        ipe_invert(u, z)


def test_symmetric_mode_generator_is_symmetric():
    u = _unit(gen=np.arange(9.0).reshape(3, 3))
    gen = u.effective_generator()
    assert torch.equal(gen, gen.T)


def test_width_mismatch():
    with pytest.raises(ValueError, match="width"):
        ipe_apply(_unit(), torch.zeros(2, 4))


def test_bad_mode():
    with pytest.raises(ValueError):
        IPEUnit(3, "orthogonal")


@pytest.mark.parametrize("seed", range(20))
def test_roundtrip_inverse(seed):
    g = np.random.default_rng(seed)
    m = g.standard_normal((4, 4))
    m *= 2 / np.linalg.norm(m, 2)
    u = _unit(4, gen=m)
    z = t(g.standard_normal((8, 4)))
    assert torch.allclose(ipe_invert(u, ipe_apply(u, z)), z, atol=1e-8, rtol=0)
    assert torch.allclose(u.matrix() @ u.inverse_matrix(), torch.eye(4), atol=1e-8, rtol=0)


def test_diag_exact_inverse():
    u = _unit(2, gen=np.diag([0.5, -1.0]))
    assert torch.allclose(u.inverse_matrix(), torch.diag(t([math.exp(-0.5), math.e])), atol=1e-14)


def test_ipe_apply_gradient_vs_fd():
    g = np.random.default_rng(5)
    u = _unit(3, gen=g.standard_normal((3, 3)) * 0.5)
    z = t(g.standard_normal((5, 3)))
    w = t(g.standard_normal((5, 3)))
    loss = (ipe_apply(u, z) * w).sum()
    (auto,) = torch.autograd.grad(loss, u.generator)

    def f(gen):
        with torch.no_grad():
            old = u.generator.detach().clone()
            u.generator.copy_(gen)
            val = (ipe_apply(u, z) * w).sum()
            u.generator.copy_(old)
        return val

    assert rel_err(auto, central_fd(f, u.generator.detach().clone())) < 1e-5


def test_equivariance_identity_group_element():
    u = _unit(3, gen=np.random.default_rng(0).standard_normal((3, 3)))
    z = np.random.default_rng(1).standard_normal((6, 3))
    assert equivariance_deviation(u, np.eye(3), z) == 0.0


def test_equivariance_commuting_exponentials():
    g = np.random.default_rng(2)
    s = g.standard_normal((4, 4))
    s = s + s.T
    u = _unit(4, gen=0.3 * s)
    elem = scipy.linalg.expm(0.7 * s)
    z = g.standard_normal((10, 4))
    assert equivariance_deviation(u, elem, z) < 1e-8


def test_equivariance_independent_generators_deviate():
    g = np.random.default_rng(4)
    a, b = g.standard_normal((2, 4, 4))
    u = _unit(4, gen=a + a.T)
    elem = scipy.linalg.expm(0.5 * (b + b.T))
    assert equivariance_deviation(u, elem, g.standard_normal((10, 4))) > 1e-3


def test_commutation_probe_rows_and_shared_direction():
    rows = commutation_probe(4, 25, seed=1, shared_direction=True)
    assert len(rows) == 75
    for r in rows:
        if r["family"] in ("E_S", "E_M"):
            assert r["comm_dev"] < 1e-12
        if r["family"] == "E_S":
            assert r["asym"] < 1e-12


@pytest.mark.parametrize("n", [4, 6, 10])
def test_commutation_probe_ordering(n):
    rows = commutation_probe(n, 300, seed=0)
    s = summarize_probe(rows)
    assert s["E_S"]["asym_max"] < 1e-12
    assert s["E_S"]["asym_mean"] < s["E_M"]["asym_mean"] < s["M_n"]["asym_mean"]


def test_commutation_probe_csv(tmp_path):
    rows = commutation_probe(3, 4)
    write_probe_csv(rows, tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "family,trial,comm_dev,asym"
    assert len(lines) == 1 + 4 * len(FAMILIES)
    with pytest.raises(ValueError):
        commutation_probe(3, 0)
