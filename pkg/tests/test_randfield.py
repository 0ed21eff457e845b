import struct

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from monodomain_uq.errors import (ArgumentError, ConfigurationError, DegenerateFiberError,
                                  EllipticityError, NumericalError)
from monodomain_uq.fem import assemble_mass
from monodomain_uq.randfield import (ANISOTROPIC, CovarianceSpec, DenseAccessor, KernelAccessor,
                                     blockdiag_mass, build_kl, conductivity_tensor, conductivity_tensors,
                                     cov_entry, evaluate_kl, load_kl, pivoted_cholesky, reduced_eig,
                                     safe_amplitude, sample_conductivity, save_kl)


def _spd(rng, n, rank=None):
    X = rng.standard_normal((n, rank or n))
    return X @ X.T + (1e-3 * np.eye(n) if rank is None else 0)


@pytest.fixture(scope="module")
def fine(hierarchy3):
    return hierarchy3[1]


@pytest.fixture(scope="module")
def iso_kl(fine):
    spec = CovarianceSpec(theta=0.3, sigma_kl=0.25)
    return spec, build_kl(spec, fine, assemble_mass(fine))


def test_cov_entry_examples():
    spec = CovarianceSpec(theta=0.3, sigma_kl=0.25)
    assert cov_entry(spec, [0.1, 0.2, 0.3], [0.1, 0.2, 0.3]) == pytest.approx(0.09)
    assert cov_entry(spec, [0, 0, 0], [100, 0, 0]) == 0.0
    aniso = CovarianceSpec(theta=0.3, sigma_kl=0.25, mode=ANISOTROPIC, mean=(1e-2, 0, 0), g=1e-3)
    assert cov_entry(aniso, [0, 0, 0], [0, 0, 0], 0, 1) == 0.0
    assert cov_entry(aniso, [0, 0, 0], [0.5, 0, 0], 2, 2) == pytest.approx(0.09 * np.exp(-1.0))


def test_covariance_spec_validation():
    with pytest.raises(ConfigurationError):
        CovarianceSpec(theta=0.0, sigma_kl=0.25)
    with pytest.raises(ConfigurationError):
        CovarianceSpec(theta=0.3, sigma_kl=-1)
    with pytest.raises(ConfigurationError):
        CovarianceSpec(theta=0.3, sigma_kl=0.25, eps=0)
    with pytest.raises(ConfigurationError):
        CovarianceSpec(theta=0.3, sigma_kl=0.25, mode=ANISOTROPIC)
    with pytest.raises(ConfigurationError):
        CovarianceSpec(theta=0.3, sigma_kl=0.25, mode="other")


def test_pivoted_cholesky_hand_example():
    f = pivoted_cholesky(DenseAccessor(np.diag([4.0, 1.0])), 2, 0.3)
    assert f.rank == 1
    assert f.pivots.tolist() == [0]
    assert f.columns[:, 0] == pytest.approx([2.0, 0.0])
    assert f.trace_residual == pytest.approx(1.0)
    assert f.trace_residual / f.initial_trace == pytest.approx(0.2)


def test_pivoted_cholesky_identity():
    f = pivoted_cholesky(DenseAccessor(np.eye(2)), 2, 1e-12)
    assert f.rank == 2
    assert np.allclose(f.columns.T @ f.columns, np.eye(2))


def test_pivoted_cholesky_rejects_indefinite():
    C = np.array([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(NumericalError):
        pivoted_cholesky(DenseAccessor(C), 2, 1e-12)
    with pytest.raises(NumericalError):
        pivoted_cholesky(DenseAccessor(np.diag([1.0, -1.0])), 2, 1e-3)


@given(st.integers(2, 30), st.floats(1e-6, 0.5), st.integers(0, 2**31))
def test_pivoted_cholesky_trace_bound(n, eps, seed):
    rng = np.random.default_rng(seed)
    C = _spd(rng, n)
    f = pivoted_cholesky(DenseAccessor(C), n, eps)
    L = f.columns
    assert np.trace(C - L @ L.T) <= eps * np.trace(C) * (1 + 1e-10) + 1e-12
    assert np.diag(C - L @ L.T).min() >= -1e-10 * np.abs(C).max()
    piv = np.array([L[j, k] ** 2 for k, j in enumerate(f.pivots)])
    assert np.all(np.diff(piv) <= 1e-10 * piv[0])


def test_kernel_accessor_columns_match_dense(fine):
    acc = KernelAccessor(fine.vertices[:30], 0.25, d=2, variance=0.09)
    dense = np.zeros((60, 60))
    for j in range(60):
        dense[:, j] = acc.column(j)
    spec = CovarianceSpec(theta=0.3, sigma_kl=0.25, mode=ANISOTROPIC, mean=(1, 0, 0), g=0.5)
    for i, j in [(0, 0), (3, 17), (31, 45), (5, 40)]:
        ci, cj = divmod(i, 30)[0], divmod(j, 30)[0]
        assert dense[i, j] == pytest.approx(cov_entry(spec, fine.vertices[i % 30], fine.vertices[j % 30], ci, cj))
    assert np.allclose(dense, dense.T)
    assert np.allclose(acc.diagonal(), np.diag(dense))


def test_reduced_eig_trivial():
    lam, V = reduced_eig(np.array([[1.0], [0.0]]), np.eye(2))
    assert lam == pytest.approx([1.0])
    assert np.abs(V[:, 0]) == pytest.approx([1.0, 0.0])


@given(st.integers(2, 10), st.integers(0, 2**31))
def test_reduced_eig_matches_dense_generalized_problem(n, seed):
    rng = np.random.default_rng(seed)
    L = rng.standard_normal((n, max(1, n - 2)))
    B = _spd(rng, n)
    lam, V = reduced_eig(L, B)
    # (B L L^T B) v = lam B v
    dense = sla.eigh(B @ L @ L.T @ B, B, eigvals_only=True)[::-1][:len(lam)]
    assert np.allclose(lam, dense, rtol=1e-8, atol=1e-10 * dense[0])
    res = B @ L @ L.T @ B @ V - (B @ V) * lam
    assert np.abs(res).max() <= 1e-8 * max(1.0, np.abs(B @ V * lam).max())
    gram = V.T @ B @ V
    assert np.allclose(gram, np.diag(lam), rtol=1e-8, atol=1e-8 * lam[0])


def test_kl_modes_mass_orthogonal(iso_kl, fine):
    spec, kl = iso_kl
    mass = assemble_mass(fine)
    V = kl.coeffs.T * np.sqrt(kl.lambdas)
    gram = V.T @ (mass @ V)
    assert np.abs(gram - np.diag(kl.lambdas)).max() <= 1e-8 * kl.lambdas[0]
    assert np.all(kl.lambdas > 0) and np.all(np.diff(kl.lambdas) <= 0)


def test_kl_default_amplitude_keeps_every_corner_elliptic(iso_kl, fine):
    spec, kl = iso_kl
    b_min, b_max = spec.bounds(kl.mean)
    worst = kl.theta * (kl.sigmas[:, None] * np.abs(kl.coeffs)).sum(axis=0)
    assert (kl.mean - worst).min() >= b_min - 1e-15
    assert (kl.mean + worst).max() <= b_max
    rng = np.random.default_rng(0)
    for omega in rng.choice([-1.0, 1.0], size=(20, kl.M)):
        field = evaluate_kl(kl, omega)
        assert b_min <= field.min() and field.max() <= b_max


def test_safe_amplitude_requires_mean_inside_band():
    spec = CovarianceSpec(theta=0.3, sigma_kl=0.25, mean=1.0, b_min=2.0)
    with pytest.raises(EllipticityError):
        safe_amplitude(spec, np.ones(3), np.ones(1), np.ones((1, 3)))


def test_evaluate_kl_examples(iso_kl):
    _, kl = iso_kl
    assert np.array_equal(evaluate_kl(kl, np.zeros(kl.M)), kl.mean)
    e1 = np.zeros(kl.M)
    e1[0] = 1.0
    diff = evaluate_kl(kl, e1) - evaluate_kl(kl, np.zeros(kl.M))
    assert np.abs(diff - kl.theta * kl.sigmas[0] * kl.coeffs[0]).max() <= 1e-15 + 1e-12 * np.abs(diff).max()
    with pytest.raises(ArgumentError):
        evaluate_kl(kl, np.zeros(kl.M + 1))


@given(st.integers(0, 2**31))
def test_evaluate_kl_affine(seed):
    rng = np.random.default_rng(seed)
    lam = np.sort(rng.uniform(0.1, 1, 5))[::-1]
    from monodomain_uq.randfield import KLExpansion
    kl = KLExpansion(mean=rng.standard_normal(12), lambdas=lam, coeffs=rng.standard_normal((5, 12)),
                     theta=0.4, d=1)
    a, b = rng.uniform(-0.5, 0.5, (2, 5))
    lhs = evaluate_kl(kl, a) + evaluate_kl(kl, b) - evaluate_kl(kl, np.zeros(5))
    assert np.allclose(lhs, evaluate_kl(kl, a + b), atol=1e-12)


def test_theta_to_zero_gives_mean(fine):
    spec = CovarianceSpec(theta=1e-14, sigma_kl=0.25)
    kl = build_kl(spec, fine, assemble_mass(fine))
    omega = np.random.default_rng(1).uniform(-1, 1, kl.M)
    assert np.abs(evaluate_kl(kl, omega) - kl.mean).max() < 1e-15


def test_conductivity_tensor_examples():
    assert np.allclose(conductivity_tensor([2.0, 0, 0], 1.0), np.diag([2.0, 1.0, 1.0]))
    v = np.array([0.6, 0.0, 0.8])
    assert np.allclose(conductivity_tensor(v, 1.0), np.eye(3))
    with pytest.raises(DegenerateFiberError):
        conductivity_tensor([0.0, 0.0, 1e-15], 1.0)


@given(arrays(np.float64, 3, elements=st.floats(-10, 10)).filter(lambda v: np.linalg.norm(v) > 1e-3),
       st.floats(1e-3, 10))
def test_conductivity_tensor_eigenstructure(v, g):
    G = conductivity_tensor(v, g)
    nv = np.linalg.norm(v)
    assert np.allclose(G, G.T, atol=0)
    assert np.allclose(G @ v, nv * v, rtol=1e-12, atol=1e-12 * nv * nv)
    u = np.cross(v, [1.0, 0.0, 0.0] if abs(v[0]) < 0.9 * nv else [0.0, 1.0, 0.0])
    assert np.allclose(G @ u, g * u, rtol=1e-12, atol=1e-12 * max(g, nv) * np.linalg.norm(u))
    assert np.allclose(np.sort(np.linalg.eigvalsh(G)), np.sort([nv, g, g]), atol=1e-10 * max(nv, g, 1))


def test_sample_conductivity_at_mean(iso_kl, hierarchy3):
    spec, kl = iso_kl
    s = sample_conductivity(kl, np.zeros(kl.M), hierarchy3[0], spec)
    assert np.allclose(s.tensors, 3.325e-3 * np.eye(3), rtol=1e-14, atol=0)
    assert s.level == 0


def test_sample_conductivity_fine_target_is_barycenter_average(iso_kl, fine):
    spec, kl = iso_kl
    omega = np.random.default_rng(7).uniform(-1, 1, kl.M)
    s = sample_conductivity(kl, omega, fine, spec)
    nodal = evaluate_kl(kl, omega)
    assert np.allclose(s.scalar, nodal[fine.tets].mean(axis=1), rtol=1e-14)


def test_sample_conductivity_rejects_out_of_band(fine):
    spec = CovarianceSpec(theta=1.0, sigma_kl=0.25, amplitude=1e-2)
    kl = build_kl(spec, fine, assemble_mass(fine))
    with pytest.raises(EllipticityError):
        sample_conductivity(kl, np.ones(kl.M), fine, spec)


def test_anisotropic_samples(fine):
    mean = (3.325e-3, 0.0, 0.0)
    spec = CovarianceSpec(theta=0.3, sigma_kl=0.25, mode=ANISOTROPIC, mean=mean, g=1.625e-3)
    mass = assemble_mass(fine)
    kl = build_kl(spec, fine, mass)
    bd = blockdiag_mass(mass, 3)
    V = kl.coeffs.T * np.sqrt(kl.lambdas)
    assert np.abs(V.T @ (bd @ V) - np.diag(kl.lambdas)).max() <= 1e-8 * kl.lambdas[0]
    omega = np.random.default_rng(2).uniform(-1, 1, kl.M)
    s = sample_conductivity(kl, omega, fine, spec)
    vecs = evaluate_kl(kl, omega)[fine.tets].mean(axis=1)
    eig = np.sort(np.linalg.eigvalsh(s.tensors), axis=1)
    expected = np.sort(np.column_stack([np.linalg.norm(vecs, axis=1), np.full((len(vecs), 2), 1.625e-3)]), axis=1)
    assert np.allclose(eig, expected, rtol=1e-10, atol=1e-16)
    assert s.scalar is None


def test_conductivity_tensors_vectorized_matches_single():
    V = np.random.default_rng(9).standard_normal((8, 3))
    G = conductivity_tensors(V, 0.7)
    for v, g in zip(V, G):
        assert np.allclose(g, conductivity_tensor(v, 0.7))


def test_klx1_roundtrip_and_header(tmp_path, iso_kl, fine):
    _, kl = iso_kl
    path = save_kl(tmp_path / "kl.klx", kl)
    raw = path.read_bytes()
    assert raw[:4] == b"KLX1"
    assert struct.unpack_from("<III", raw, 4) == (kl.M, 1, fine.n)
    back = load_kl(path, mesh=fine)
    assert np.array_equal(back.mean, kl.mean)
    assert np.array_equal(back.lambdas, kl.lambdas)
    assert np.array_equal(back.coeffs, kl.coeffs)
    assert back.theta == kl.theta
    (tmp_path / "bad.klx").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ConfigurationError):
        load_kl(tmp_path / "bad.klx")
    (tmp_path / "short.klx").write_bytes(raw[:-8])
    with pytest.raises(ConfigurationError):
        load_kl(tmp_path / "short.klx")


def test_klx1_roundtrip_vector(tmp_path, fine):
    spec = CovarianceSpec(theta=0.3, sigma_kl=0.25, mode=ANISOTROPIC, mean=(3e-3, 1e-3, 0), g=1e-3)
    kl = build_kl(spec, fine, assemble_mass(fine))
    back = load_kl(save_kl(tmp_path / "v.klx", kl))
    assert back.d == 3 and np.array_equal(back.mean, kl.mean)
    omega = np.linspace(-1, 1, kl.M)
    assert np.array_equal(evaluate_kl(back, omega), evaluate_kl(kl, omega))
