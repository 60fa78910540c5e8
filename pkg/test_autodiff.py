"""
Tests for the reverse-mode autodiff engine and its matrix operations.
"""

import logging

import numpy as np
import pytest

from conftest import gradients_agree
from dtgp.core import autodiff as ad
from dtgp.core.errors import (
    ContractError,
    DecompositionError,
    DimensionError,
    DomainError,
    SingularityError,
)


def leaf(value):
    return ad.Var(np.array(value, dtype=np.float64), op="param", requires_grad=True)


def grad_and_fd(fn, x, h=1e-5):
    """Analytic gradient of fn(Var) -> scalar Var at x, and its finite-difference twin."""
    v = leaf(x)
    ad.backward(fn(v))
    numeric = ad.finite_diff_grad(lambda value: fn(ad.constant(value)).item(), np.array(x, dtype=np.float64), h)
    return v.grad, numeric


def random_spd(rng, n):
    b = rng.standard_normal((n, n))
    return b @ b.T + 1e-3 * np.eye(n)


def well_conditioned_lower(rng, n):
    l = np.tril(0.3 * rng.standard_normal((n, n)), k=-1)
    return l + np.diag(1.0 + rng.uniform(0.0, 1.0, n))


class TestMatmul:
    def test_identity_and_hand_values(self, rng):
        a = rng.standard_normal((2, 2))
        np.testing.assert_array_equal((ad.eye(2) @ ad.constant(a)).value, a)
        out = ad.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.value, [[3.0], [7.0]])

    def test_gradient_matches_finite_differences(self, rng):
        b = rng.standard_normal((3, 3))
        analytic, numeric = grad_and_fd(lambda a: ad.vsum(a @ ad.constant(b)), rng.standard_normal((3, 3)))
        np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-9)

    def test_inner_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestCholesky:
    def test_hand_example(self):
        l = ad.cholesky(np.array([[4.0, 2.0], [2.0, 3.0]]))
        np.testing.assert_allclose(l.value, [[2.0, 0.0], [1.0, np.sqrt(2.0)]], atol=1e-15)

    def test_identity(self):
        np.testing.assert_array_equal(ad.cholesky(np.eye(5)).value, np.eye(5))

    @pytest.mark.parametrize("n", [1, 3, 8, 16])
    def test_reconstruction(self, rng, n):
        a = random_spd(rng, n)
        l = ad.cholesky(a).value
        assert np.allclose(l, np.tril(l))
        assert np.max(np.abs(l @ l.T - a)) < 1e-10

    def test_gradient_matches_finite_differences(self, rng):
        a = random_spd(rng, 4) + np.eye(4)
        analytic, numeric = grad_and_fd(lambda v: ad.vsum(ad.cholesky(v)), a)
        assert np.all(gradients_agree(analytic, numeric, rtol=1e-4, atol=1e-7))

    def test_jitter_rescues_semidefinite_matrix(self, caplog):
        a = np.ones((2, 2))
        with caplog.at_level(logging.WARNING, logger="dtgp.core.autodiff"):
            l = ad.cholesky(a).value
        assert "jitter" in caplog.text
        np.testing.assert_allclose(l @ l.T, a + 1e-6 * np.eye(2), atol=1e-12)

    def test_indefinite_matrix_reports_pivot(self):
        with pytest.raises(DecompositionError) as excinfo:
            ad.cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert excinfo.value.pivot == 1
        assert excinfo.value.jitter == pytest.approx(1e-2)

    def test_non_finite_entries(self):
        with pytest.raises(DecompositionError):
            ad.cholesky(np.array([[1.0, np.nan], [np.nan, 1.0]]))

    def test_non_square(self):
        with pytest.raises(DimensionError):
            ad.cholesky(np.ones((2, 3)))


class TestTriSolve:
    def test_identity_and_hand_values(self, rng):
        b = rng.standard_normal((3, 2))
        np.testing.assert_array_equal(ad.tri_solve(np.eye(3), b).value, b)
        l = np.array([[2.0, 0.0], [1.0, 1.0]])
        np.testing.assert_allclose(ad.tri_solve(l, np.array([[2.0], [2.0]])).value, [[1.0], [1.0]])
        np.testing.assert_allclose(
            ad.tri_solve(l, np.array([[2.0], [2.0]]), side="lower_transposed").value, [[0.0], [2.0]]
        )

    def test_recovers_solution(self, rng):
        l = well_conditioned_lower(rng, 6)
        x = rng.standard_normal((6, 3))
        assert np.max(np.abs(ad.tri_solve(l, l @ x).value - x)) < 1e-10
        assert np.max(np.abs(ad.tri_solve(l, l.T @ x, side="lower_transposed").value - x)) < 1e-10

    @pytest.mark.parametrize("side", ["lower", "lower_transposed"])
    def test_gradients_match_finite_differences(self, rng, side):
        l = well_conditioned_lower(rng, 4)
        b = rng.standard_normal((4, 2))
        weights = rng.standard_normal((4, 2))

        def loss_l(v):
            return ad.vsum(ad.tri_solve(v, ad.constant(b), side=side) * ad.constant(weights))

        def loss_b(v):
            return ad.vsum(ad.square(ad.tri_solve(ad.constant(l), v, side=side)))

        for fn, x in ((loss_l, l), (loss_b, b)):
            analytic, numeric = grad_and_fd(fn, x)
            assert np.all(gradients_agree(analytic, numeric))

    def test_zero_diagonal(self):
        with pytest.raises(SingularityError) as excinfo:
            ad.tri_solve(np.array([[1.0, 0.0], [3.0, 0.0]]), np.ones((2, 1)))
        assert excinfo.value.index == 1

    def test_unknown_side(self):
        with pytest.raises(ContractError):
            ad.tri_solve(np.eye(2), np.ones((2, 1)), side="upper")


class TestElementwise:
    def test_asinh_at_zero(self):
        v = leaf(0.0)
        out = ad.asinh(v)
        ad.backward(out)
        assert out.item() == 0.0
        assert float(v.grad) == pytest.approx(1.0)

    def test_softplus_at_zero(self):
        assert ad.softplus(0.0).item() == pytest.approx(np.log(2.0), abs=1e-15)

    def test_tanh_gradient_on_grid(self):
        grid = np.linspace(-3.0, 3.0, 61)
        analytic, numeric = grad_and_fd(lambda v: ad.vsum(ad.tanh(v)), grid)
        assert np.all(gradients_agree(analytic, numeric, rtol=1e-6, atol=1e-9))

    @pytest.mark.parametrize("op,low,high", [
        ("exp", -2.0, 2.0),
        ("log", 0.5, 2.5),
        ("tanh", -2.0, 2.0),
        ("asinh", -2.0, 2.0),
        ("softplus", -2.0, 2.0),
        ("square", -2.0, 2.0),
        ("sqrt", 0.5, 2.5),
        ("neg", -2.0, 2.0),
    ])
    def test_unary_gradients_at_random_points(self, rng, op, low, high):
        x = rng.uniform(low, high, size=20)
        analytic, numeric = grad_and_fd(lambda v: ad.vsum(ad.elementwise(op, v)), x)
        assert np.all(gradients_agree(analytic, numeric))

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
    def test_binary_gradients_with_scalar_operand(self, rng, op):
        x = rng.uniform(0.5, 2.0, size=(4, 3))
        scalar = 1.7
        analytic, numeric = grad_and_fd(lambda v: ad.vsum(ad.elementwise(op, v, scalar)), x)
        assert np.all(gradients_agree(analytic, numeric))
        analytic, numeric = grad_and_fd(lambda v: ad.vsum(ad.elementwise(op, ad.constant(x), v)), np.array(scalar))
        assert np.all(gradients_agree(analytic, numeric))

    def test_log_of_nonpositive(self):
        with pytest.raises(DomainError):
            ad.log(np.array([1.0, 0.0]))

    def test_restricted_broadcasting(self):
        with pytest.raises(DimensionError):
            ad.add(np.ones((2, 3)), np.ones(3))
        assert ad.add(np.ones((2, 3)), 2.0).shape == (2, 3)

    def test_unknown_op(self):
        with pytest.raises(ContractError):
            ad.elementwise("cosh", 1.0)

    def test_clamp_blocks_gradient_below_floor(self):
        v = leaf([1e-10, 0.5])
        ad.backward(ad.vsum(ad.clamp_min(v, 1e-8)))
        np.testing.assert_array_equal(v.grad, [0.0, 1.0])


class TestStructural:
    def test_gradients_match_finite_differences(self, rng):
        x = rng.standard_normal((3, 2))
        weights = rng.standard_normal((6, 2))

        def loss(v):
            tiled = ad.tile_rows(v, 2) * ad.constant(weights)
            stacked = ad.concat([v, ad.square(v)], axis=1)
            picked = v[1:, :1]
            spread = ad.broadcast_to(ad.reshape(ad.vsum(v, axis=0), (1, 2)), (4, 2))
            return (ad.vsum(tiled) + ad.vsum(ad.tanh(stacked)) + ad.vsum(ad.exp(picked))
                    + ad.vsum(ad.square(spread)) + ad.vsum(ad.diag_part(v @ v.T)))

        analytic, numeric = grad_and_fd(loss, x)
        assert np.all(gradients_agree(analytic, numeric))

    def test_scaled_sqdist(self, rng):
        x1 = rng.standard_normal((4, 3))
        x2 = rng.standard_normal((5, 3))
        ls = rng.uniform(0.5, 2.0, 3)
        expected = (((x1[:, None, :] - x2[None, :, :]) / ls) ** 2).sum(axis=2)
        np.testing.assert_allclose(ad.scaled_sqdist(x1, x2, ls).value, expected, atol=1e-12)

        weights = rng.standard_normal((4, 5))
        for index, x in enumerate((x1, x2, ls)):
            def loss(v, index=index):
                args = [ad.constant(x1), ad.constant(x2), ad.constant(ls)]
                args[index] = v
                return ad.vsum(ad.scaled_sqdist(*args) * ad.constant(weights))

            analytic, numeric = grad_and_fd(loss, x)
            assert np.all(gradients_agree(analytic, numeric))

    def test_scaled_sqdist_width_mismatch(self):
        with pytest.raises(DimensionError):
            ad.scaled_sqdist(np.ones((2, 2)), np.ones((2, 3)), np.ones(2))


class TestLogdet:
    def test_values(self):
        assert ad.logdet_from_chol(np.eye(3)).item() == 0.0
        assert ad.logdet_from_chol(np.diag([2.0, 3.0])).item() == pytest.approx(np.log(36.0), abs=1e-12)

    def test_gradient(self, rng):
        l = well_conditioned_lower(rng, 4)
        analytic, numeric = grad_and_fd(ad.logdet_from_chol, l)
        assert np.all(gradients_agree(analytic, numeric))

    def test_nonpositive_diagonal(self):
        with pytest.raises(DomainError):
            ad.logdet_from_chol(np.diag([1.0, -1.0]))


class TestBackward:
    def test_constant_root_leaves_params_untouched(self):
        p = ad.Param(np.ones(3), name="p")
        assert ad.backward(ad.constant(3.0)) == {}
        np.testing.assert_array_equal(p.grad, np.zeros(3))

    def test_sum_gives_ones(self):
        p = ad.Param(np.arange(4.0), name="p")
        leaves = ad.backward(ad.vsum(p.constrained()))
        np.testing.assert_array_equal(p.grad, np.ones(4))
        assert p.raw in leaves

    def test_gradients_accumulate_until_reset(self):
        p = ad.Param(np.array([1.0, 2.0]), name="p")
        root = ad.vsum(ad.square(p.constrained()))
        ad.backward(root)
        ad.backward(root)
        np.testing.assert_allclose(p.grad, 2.0 * 2.0 * np.array([1.0, 2.0]))
        ad.zero_grads([p])
        np.testing.assert_array_equal(p.grad, np.zeros(2))

    def test_non_scalar_root(self):
        with pytest.raises(ContractError):
            ad.backward(leaf(np.ones(2)))

    def test_deterministic_values(self, rng):
        a = random_spd(rng, 6)
        first = ad.logdet_from_chol(ad.cholesky(a)).value
        second = ad.logdet_from_chol(ad.cholesky(a)).value
        assert first.tobytes() == second.tobytes()


class TestFiniteDiff:
    def test_square(self):
        assert float(ad.finite_diff_grad(lambda x: float(x ** 2), 3.0)) == pytest.approx(6.0, abs=1e-8)

    def test_sine(self):
        assert float(ad.finite_diff_grad(lambda x: float(np.sin(x)), 0.0)) == pytest.approx(1.0, abs=1e-9)

    def test_restores_input(self):
        x = np.array([1.0, 2.0])
        ad.finite_diff_grad(lambda v: float(np.sum(v ** 2)), x)
        np.testing.assert_array_equal(x, [1.0, 2.0])


class TestTape:
    def test_records_and_dumps(self):
        with ad.Tape(name="t") as tape:
            x = ad.constant(np.eye(2))
            ad.matmul(x, x)
        ad.constant(1.0)
        assert len(tape) == 2
        assert "matmul" in tape.dump()
        assert ad.current_tape() is None


class TestParam:
    def test_transforms(self):
        assert ad.Param(0.5, transform="softplus").constrained().item() == pytest.approx(0.5)
        assert ad.Param(0.5, transform="exp").raw.item() == pytest.approx(np.log(0.5))
        np.testing.assert_allclose(ad.Param([1.0, 2.0], transform="exp").numpy(), [1.0, 2.0])

    def test_positive_transforms_reject_nonpositive(self):
        with pytest.raises(DomainError):
            ad.Param(0.0, transform="exp")
        with pytest.raises(ContractError):
            ad.Param(1.0, transform="sigmoid")

    def test_assign(self):
        p = ad.Param(np.ones(2), transform="exp", name="p")
        p.assign(np.zeros(2), raw=True)
        np.testing.assert_array_equal(p.numpy(), np.ones(2))
        with pytest.raises(DimensionError):
            p.assign(np.ones(3))
