import numpy as np
import pytest

from nfcnn import backend, bench, kernels_numba, kernels_numpy


def random_case(rng, n=2, c=3, h=6, w=5, f=4, k=3, dtype=np.float32):
    pad = (k - 1) // 2
    xp = rng.standard_normal((n, c, h + 2 * pad, w + 2 * pad)).astype(dtype)
    weight = rng.standard_normal((f, c, k, k)).astype(dtype)
    bias = rng.standard_normal(f).astype(dtype)
    up = rng.standard_normal((n, f, h, w)).astype(dtype)
    return xp, weight, bias, up


class TestKernelAgreement:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_forward_agreement(self, rng, dtype, k):
        xp, weight, bias, _ = random_case(rng, k=k, dtype=dtype)
        a = kernels_numpy.conv2d_forward(xp, weight, bias)
        b = kernels_numba.conv2d_forward(xp, weight, bias)
        np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-5)

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    @pytest.mark.parametrize("k", [1, 3])
    def test_backward_agreement(self, rng, dtype, k):
        xp, weight, _, up = random_case(rng, k=k, dtype=dtype)
        for a, b in zip(kernels_numpy.conv2d_backward(up, xp, weight),
                        kernels_numba.conv2d_backward(up, xp, weight)):
            np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-5)

    def test_numba_bit_deterministic(self, rng):
        xp, weight, bias, up = random_case(rng)
        f1 = kernels_numba.conv2d_forward(xp, weight, bias)
        f2 = kernels_numba.conv2d_forward(xp, weight, bias)
        np.testing.assert_array_equal(f1, f2)
        for a, b in zip(kernels_numba.conv2d_backward(up, xp, weight),
                        kernels_numba.conv2d_backward(up, xp, weight)):
            np.testing.assert_array_equal(a, b)


class TestBackendSelection:
    def teardown_method(self):
        backend.set_backend("auto")

    def test_auto_prefers_numba(self):
        assert backend.set_backend("auto") == "numba"

    def test_numpy_forced(self, rng):
        backend.set_backend("numpy")
        assert backend.backend_name() == "numpy"
        xp, weight, bias, _ = random_case(rng)
        out = backend.conv2d_forward(xp, weight, bias)
        np.testing.assert_array_equal(
            out, kernels_numpy.conv2d_forward(xp, weight, bias))

    def test_unknown_rejected(self):
        with pytest.raises(ValueError, match="unknown backend"):
            backend.set_backend("cuda")

    def test_ops_work_on_numpy_backend(self, rng):
        import nfcnn.tensor as T
        backend.set_backend("numpy")
        x = T.Tensor(rng.standard_normal((1, 2, 5, 5)).astype(np.float32))
        w = T.Tensor(rng.standard_normal((3, 2, 3, 3)).astype(np.float32),
                     requires_grad=True)
        out = T.conv2d(x, w)
        T.backward(T.mean_of_squares(out))
        assert w.grad is not None and w.grad.shape == w.shape


class TestBench:
    def test_runs_and_reports_both(self):
        rows = bench.run_benchmark(cases=((1, 2, 8, 8, 3, 3),), repeats=2)
        assert {r["op"] for r in rows} == {"forward", "backward"}
        for r in rows:
            assert r["numpy_ms"] > 0
            assert r["numba_ms"] is not None and r["numba_ms"] > 0
        table = bench.format_table(rows)
        assert "speedup" in table and "forward" in table
