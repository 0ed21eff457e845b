import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from monodomain_uq import _kernels_py, kernels
from monodomain_uq.mesh import BoxDomain, build_nested_hierarchy

compiled = pytest.importorskip("monodomain_uq._kernels", reason="Cython extension not built")


@pytest.mark.skipif(os.environ.get("MONODOMAIN_UQ_PURE_PYTHON", "") not in ("", "0"),
                    reason="fallback forced by the environment")
def test_compiled_backend_selected_by_default():
    assert kernels.BACKEND == "cython"


def test_environment_forces_fallback():
    env = dict(os.environ, MONODOMAIN_UQ_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from monodomain_uq import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@pytest.fixture(scope="module")
def level():
    box = BoxDomain((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))
    return build_nested_hierarchy(box, 2, 0.5, 0.16, 0.32)[1]


def _locate(mod, lvl, pts):
    lo, hi = lvl._boxes
    origin = np.ascontiguousarray(lvl.vertices[lvl.tets[:, 0]])
    return mod.locate_points(np.ascontiguousarray(pts), lvl.inverse_maps, origin, lo, hi, 1e-10)


def test_locate_points_backends_agree(level):
    rng = np.random.default_rng(3)
    pts = np.vstack([rng.uniform(-0.5, 0.5, (200, 3)), level.vertices[:20], [[0.7, 0, 0]]])
    e1, b1 = _locate(compiled, level, pts)
    e2, b2 = _locate(_kernels_py, level, pts)
    assert np.array_equal(np.asarray(e1), e2)
    assert np.abs(np.asarray(b1) - b2).max() < 1e-13
    assert e2[-1] == -1


def test_located_barycentrics_reproduce_points(level):
    pts = np.random.default_rng(4).uniform(-0.5, 0.5, (50, 3))
    elem, bary = _locate(compiled, level, pts)
    elem, bary = np.asarray(elem), np.asarray(bary)
    rebuilt = np.einsum("pi,pij->pj", bary, level.vertices[level.tets[elem]])
    assert np.abs(rebuilt - pts).max() < 1e-12


@given(st.integers(1, 5000), st.integers(1, 40), st.integers(1, 6))
def test_radical_inverse_backends_agree(start, count, dim):
    bases = np.array([2, 3, 5, 7, 11, 13][:dim], dtype=np.int64)
    a = np.asarray(compiled.radical_inverse_block(start, count, bases))
    b = _kernels_py.radical_inverse_block(start, count, bases)
    assert np.array_equal(a, b)


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 12)),
              elements=st.floats(-50, 150, allow_nan=False)),
       st.floats(-10, 120))
def test_first_crossing_backends_agree(series, threshold):
    a = np.asarray(compiled.first_crossing(np.ascontiguousarray(series), threshold))
    b = _kernels_py.first_crossing(series, threshold)
    assert np.array_equal(a, b)
    for row, k in zip(series, b):
        brute = next((i for i, v in enumerate(row) if v >= threshold), -1)
        assert k == brute


def test_element_stiffness_backends_agree(level):
    rng = np.random.default_rng(5)
    X = rng.standard_normal((level.n_elements, 3, 3))
    G = np.einsum("eij,ekj->eik", X, X) + np.eye(3)
    vol = np.ascontiguousarray(level.volumes)
    a = np.asarray(compiled.element_stiffness(level.gradients, vol, G))
    b = _kernels_py.element_stiffness(level.gradients, vol, G)
    assert np.abs(a - b).max() < 1e-13 * np.abs(b).max()
