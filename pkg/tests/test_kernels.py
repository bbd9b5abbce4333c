import os
import subprocess
import sys

import numpy as np
import pytest

from clotvc import _fallback, kernels

from oracles import brute_dtw

try:
    from clotvc import _kernels as compiled
except ImportError:  # extension not built
    compiled = None

needs_ext = pytest.mark.skipif(compiled is None, reason="compiled extension not built")


def test_backend_is_selected_at_import():
    assert kernels.BACKEND in ("cython", "python")
    if compiled is not None:
        assert kernels.BACKEND == "cython"


def test_pure_python_override():
    env = dict(os.environ, CLOTVC_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from clotvc import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_get_backend_rejects_unknown():
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


@needs_ext
@pytest.mark.parametrize("reg", [0.1, 0.01])
def test_sinkhorn_backends_agree(reg):
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = rng.integers(2, 6)
        C = rng.uniform(0, 2, (n, n))
        a = compiled.sinkhorn_log(C, reg, 200, 1e-6)
        b = _fallback.sinkhorn_log(C, reg, 200, 1e-6)
        # the Newton solves round differently (LAPACK vs hand-rolled elimination), so the
        # plans agree to well inside the 1e-6 stopping tolerance rather than bitwise
        np.testing.assert_allclose(a[0], b[0], atol=1e-7)
        assert a[1] == b[1] and a[3] == b[3]


@needs_ext
def test_dtw_backends_agree():
    rng = np.random.default_rng(2)
    for _ in range(200):
        D = rng.uniform(0, 1, rng.integers(1, 12, size=2))
        ca, pa = compiled.dtw(D)
        cb, pb = _fallback.dtw(D)
        assert ca == pytest.approx(cb, abs=1e-12)
        np.testing.assert_array_equal(pa, pb)


@pytest.mark.parametrize("impl", [_fallback, compiled], ids=["python", "cython"])
def test_dtw_path_is_monotone_and_costed(impl):
    if impl is None:
        pytest.skip("compiled extension not built")
    rng = np.random.default_rng(3)
    D = rng.uniform(0, 1, (5, 4))
    total, path = impl.dtw(D)
    assert tuple(path[0]) == (0, 0) and tuple(path[-1]) == (4, 3)
    steps = np.diff(path, axis=0)
    assert np.all((steps >= 0) & (steps <= 1)) and np.all(steps.sum(axis=1) >= 1)
    assert total == pytest.approx(D[path[:, 0], path[:, 1]].sum())
    assert total == pytest.approx(brute_dtw(D))


def test_sinkhorn_reports_nonconvergence():
    C = np.random.default_rng(4).uniform(0, 2, (4, 4))
    M, n_iter, err, ok = kernels.sinkhorn_log(C, 0.001, 1, 1e-14)
    assert not ok and n_iter == 1 and err > 1e-14
    assert np.all(np.isfinite(M))
