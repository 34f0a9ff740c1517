import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flowdps.operators import (
    AvgPoolOperator,
    BlurOperator,
    ConjugateGradient,
    DenseOperator,
    GradientDescent,
    IdentityOperator,
    MaskOperator,
    Measurement,
    OptimizationError,
    apply,
    apply_adjoint,
    data_consistency_solve,
    gaussian_blur_kernel,
    likelihood_grad,
    log_likelihood,
    make_measurement,
)


def _ops(seed):
    r = np.random.default_rng(seed)
    k = r.uniform(0.1, 1.0, (3, 5))
    return [
        DenseOperator(r.standard_normal((4, 9))),
        AvgPoolOperator(6, 4, 2),
        AvgPoolOperator(9, 6, 3),
        BlurOperator(5, 7, gaussian_blur_kernel(5, 1.0)),
        BlurOperator(6, 8, k / k.sum()),
        MaskOperator(11, [10, 0, 4]),
        IdentityOperator(3),
    ]


def test_avgpool_example():
    assert AvgPoolOperator(2, 2, 2)(np.array([1.0, 3.0, 5.0, 7.0])) == pytest.approx([4.0])


def test_avgpool_matches_materialised_matrix(rng):
    op = AvgPoolOperator(4, 4, 2)
    dense = DenseOperator(op.to_dense())
    for _ in range(10):
        x = rng.standard_normal(16)
        assert np.max(np.abs(op(x) - dense(x))) < 1e-12
    m = op.to_dense()
    assert m.shape == (4, 16) and np.allclose(m.sum(1), 1.0) and set(np.unique(m)) == {0.0, 0.25}


def test_gaussian_kernel_values():
    # oracle: exp(-r^2 / (2 std^2)) on the 3x3 offsets, normalised
    k = gaussian_blur_kernel(3, 0.5)
    assert k[1, 1] == pytest.approx(0.6193470305571772, abs=1e-12)
    assert k[0, 1] == pytest.approx(0.0838195058022106, abs=1e-12)
    assert k[0, 0] == pytest.approx(0.011343736558495073, abs=1e-12)
    assert k.sum() == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("size, std", [(4, 1.0), (0, 1.0), (3, 0.0)])
def test_gaussian_kernel_errors(size, std):
    with pytest.raises(ValueError):
        gaussian_blur_kernel(size, std)


def test_blur_is_convolution_not_correlation():
    k = np.zeros((3, 3))
    k[0, 1], k[1, 1] = 0.25, 0.75  # asymmetric: mass above the centre
    op = BlurOperator(5, 5, k)
    x = np.zeros((5, 5))
    x[2, 2] = 1.0
    out = op(x.ravel()).reshape(5, 5)
    # convolving a delta reproduces the kernel around it
    assert out[1, 2] == 0.25 and out[2, 2] == 0.75 and out[3, 2] == 0.0


def test_blur_edges_zero_padded():
    op = BlurOperator(5, 5, gaussian_blur_kernel(3, 1.0))
    assert op(np.ones(25)).reshape(5, 5)[0, 0] < op(np.ones(25)).reshape(5, 5)[2, 2] == pytest.approx(1.0)


@given(seed=st.integers(0, 2**31))
def test_adjoint_dot_identity(seed):
    r = np.random.default_rng(seed)
    for op in _ops(seed):
        x, y = r.standard_normal(op.input_dim), r.standard_normal(op.output_dim)
        lhs, rhs = op(x) @ y, x @ op.adjoint(y)
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_batch_shapes(rng):
    for op in _ops(1):
        xb = rng.standard_normal((3, op.input_dim))
        yb = op(xb)
        assert yb.shape == (3, op.output_dim)
        assert np.allclose(yb[1], op(xb[1]))
        assert op.adjoint(yb).shape == xb.shape
        assert np.array_equal(apply(op, xb), yb) and np.array_equal(apply_adjoint(op, yb), op.adjoint(yb))


def test_construction_errors():
    with pytest.raises(ValueError):
        AvgPoolOperator(5, 4, 2)
    with pytest.raises(ValueError):
        BlurOperator(4, 4, np.ones((2, 2)) / 4)
    with pytest.raises(ValueError):
        BlurOperator(4, 4, np.ones((3, 3)))
    with pytest.raises(ValueError):
        MaskOperator(4, [0, 4])
    with pytest.raises(ValueError):
        MaskOperator(4, [1, 1])
    with pytest.raises(ValueError):
        DenseOperator(np.ones((2, 3)))(np.ones(4))


def test_measurement_noise_level():
    op = IdentityOperator(1000)
    x0 = np.random.default_rng(0).standard_normal((100, 1000))
    meas = make_measurement(op, x0, 0.03, 1)
    assert abs(np.std(meas.y - x0) / 0.03 - 1.0) < 0.05


def test_measurement_validation():
    with pytest.raises(ValueError):
        Measurement(np.zeros(3), IdentityOperator(2), 0.1)
    with pytest.raises(ValueError):
        Measurement(np.zeros(2), IdentityOperator(2), -0.1)


def test_likelihood_grad_example():
    assert likelihood_grad(DenseOperator([[2.0]]), np.array([1.0]), np.array([1.0]), 1.0) == pytest.approx([-2.0])
    with pytest.raises(ValueError):
        likelihood_grad(IdentityOperator(1), [0.0], [0.0], 0.0)


def test_likelihood_grad_finite_difference(rng):
    op = BlurOperator(4, 4, gaussian_blur_kernel(3, 0.8))
    x, y = rng.standard_normal(16), rng.standard_normal(16)
    h = 1e-6
    fd = np.array([
        (log_likelihood(op, y, x + h * e, 0.5) - log_likelihood(op, y, x - h * e, 0.5)) / (2 * h)
        for e in np.eye(16)
    ])
    assert np.max(np.abs(fd - likelihood_grad(op, y, x, 0.5))) < 1e-5


def test_cg_matches_normal_equations():
    A = np.array([[1.0, 2.0], [0.5, -1.0], [3.0, 0.2]])
    y = np.array([1.0, -2.0, 0.5])
    ref = np.linalg.solve(A.T @ A, A.T @ y)
    got = data_consistency_solve(DenseOperator(A), y, np.zeros(2), ConjugateGradient(steps=2))
    assert np.max(np.abs(got - ref)) < 1e-8


def test_cg_never_increases_objective(rng):
    op = BlurOperator(8, 8, gaussian_blur_kernel(5, 1.0))
    y, x0 = rng.standard_normal(64), rng.standard_normal(64)
    objs = [np.sum((y - op(data_consistency_solve(op, y, x0, ConjugateGradient(k)))) ** 2) for k in range(8)]
    assert all(b <= a + 1e-12 for a, b in zip(objs, objs[1:]))


def test_cg_batched_rows_independent(rng):
    op = AvgPoolOperator(4, 4, 2)
    x0 = rng.standard_normal((3, 16))
    y = rng.standard_normal(4)
    batch = data_consistency_solve(op, y, x0, ConjugateGradient(3))
    for i in range(3):
        assert np.allclose(batch[i], data_consistency_solve(op, y, x0[i], ConjugateGradient(3)), atol=1e-14)


def test_gd_defaults_reduce_residual(rng):
    # block-mean downsampling: A A^T = I/4, perfectly conditioned
    op = AvgPoolOperator(8, 8, 2)
    y = op(rng.standard_normal(64))
    x = data_consistency_solve(op, y, np.zeros(64), GradientDescent())
    assert np.linalg.norm(y - op(x)) < 0.5 * np.linalg.norm(y)


def test_gd_reductions_scale():
    op, y = IdentityOperator(4), np.ones(4)
    mean = data_consistency_solve(op, y, np.zeros(4), GradientDescent(1, 1.0, "mean"))
    total = data_consistency_solve(op, y, np.zeros(4), GradientDescent(1, 1.0, "sum"))
    assert mean == pytest.approx(np.full(4, 0.5)) and total == pytest.approx(np.ones(4))


def test_gd_divergence_raises():
    op = BlurOperator(6, 6, gaussian_blur_kernel(3, 1.0))
    with pytest.raises(OptimizationError, match="iteration"):
        data_consistency_solve(op, np.ones(36), np.zeros(36), GradientDescent(50, 1e300, "sum"))


def test_unknown_method():
    with pytest.raises(TypeError):
        data_consistency_solve(IdentityOperator(2), np.zeros(2), np.zeros(2), "cg")
