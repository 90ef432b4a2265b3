"""Test suite for the tensor primitives."""

import math

import pytest
import torch

from app.core import tensor_ops as ops
from app.core.errors import ContractViolation, NumericError, ShapeError, TokenIndexError
from app.core.tensor_ops import Rng


def test_matmul_small_example():
    """Test a hand-computed 2x2 product."""
    a = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    b = torch.tensor([[5.0, 6.0], [7.0, 8.0]])
    assert torch.equal(ops.matmul(a, b), torch.tensor([[19.0, 22.0], [43.0, 50.0]]))


def test_matmul_identity_and_mismatch():
    x = Rng(0).normal((3, 4))
    assert torch.equal(ops.matmul(x, torch.eye(4)), x)
    with pytest.raises(ShapeError):
        ops.matmul(torch.ones(2, 3), torch.ones(2, 3))


def test_softmax_uniform_and_extreme():
    """Test equal logits and a logit gap that underflows."""
    uniform = ops.softmax_rows(torch.zeros(1, 3, dtype=torch.float64))
    assert torch.allclose(uniform, torch.full((1, 3), 1 / 3, dtype=torch.float64))

    extreme = ops.softmax_rows(torch.tensor([[1000.0, 0.0]], dtype=torch.float64))
    assert extreme[0, 0].item() == pytest.approx(1.0)
    assert extreme[0, 1].item() < 1e-30
    assert torch.isfinite(extreme).all()


def test_softmax_all_ones_mask_is_bit_identical():
    x = Rng(1).normal((2, 5, 7)) * 10
    assert torch.equal(ops.softmax_rows(x), ops.softmax_rows(x, torch.ones_like(x)))


def test_softmax_mask_zeroes_blocked_columns():
    """Test that blocked columns get weight 0 even when their logits dominate."""
    x = torch.tensor([[0.0, 500.0, 1.0], [2.0, 900.0, 0.5]])
    mask = torch.tensor([[1.0, 0.0, 1.0], [1.0, 0.0, 1.0]])
    y = ops.softmax_rows(x, mask)
    assert torch.isfinite(y).all()
    assert torch.equal(y[:, 1], torch.zeros(2))
    assert torch.allclose(y.sum(dim=-1), torch.ones(2))


def test_layer_norm_constant_rows_and_shape_check():
    x = torch.full((2, 6), 3.5, dtype=torch.float64)
    out = ops.layer_norm(x, torch.ones(6, dtype=torch.float64), torch.zeros(6, dtype=torch.float64))
    assert torch.allclose(out, torch.zeros_like(out))
    with pytest.raises(ShapeError):
        ops.layer_norm(x, torch.ones(5, dtype=torch.float64), torch.zeros(6, dtype=torch.float64))


def test_elementwise_identities():
    x = Rng(2).normal((4, 3))
    assert torch.equal(ops.mul(x, torch.ones_like(x)), x)
    assert ops.gelu(torch.zeros(1)).item() == 0.0
    assert torch.equal(ops.relu(torch.tensor([-1.0, 2.0])), torch.tensor([0.0, 2.0]))
    with pytest.raises(ShapeError):
        ops.add(torch.ones(2, 3), torch.ones(4, 3))


def test_gather_scatter_inverse():
    """Test that scatter over a permutation exactly undoes gather."""
    rng = Rng(3)
    x = rng.normal((2, 9, 4))
    perm = torch.from_numpy(rng.permutation(9))
    gathered = ops.gather_rows(x, perm)
    restored = ops.scatter_rows(torch.zeros_like(x), perm, gathered)
    assert torch.equal(restored, x)


def test_gather_rejects_out_of_range_and_scatter_rejects_duplicates():
    x = torch.zeros(1, 4, 2)
    with pytest.raises(TokenIndexError):
        ops.gather_rows(x, torch.tensor([0, 4]))
    with pytest.raises(ContractViolation):
        ops.scatter_rows(x, torch.tensor([1, 1]), torch.ones(1, 2, 2))


def test_backward_basic_gradients():
    x = torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64, requires_grad=True)
    ops.backward(ops.sum_all(x))
    assert torch.equal(x.grad, torch.ones(3, dtype=torch.float64))

    y = torch.tensor([1.5, -0.5], dtype=torch.float64, requires_grad=True)
    ops.backward(ops.sum_all(ops.mul(y, y)))
    assert torch.allclose(y.grad, 2 * y.detach())


def test_backward_accumulates_and_needs_scalar():
    x = torch.ones(3, requires_grad=True)
    ops.backward(ops.sum_all(x))
    ops.backward(ops.sum_all(x))
    assert torch.equal(x.grad, torch.full((3,), 2.0))
    with pytest.raises(ContractViolation):
        ops.backward(x * 2)


@pytest.mark.parametrize("name", ["matmul", "softmax", "masked_softmax", "layer_norm", "gelu"])
def test_gradient_check_primitives(name):
    """Test analytic gradients against central differences in float64."""
    rng = Rng(4)
    x = rng.normal((3, 5), dtype=torch.float64).requires_grad_()
    if name == "matmul":
        w = rng.normal((5, 2), dtype=torch.float64).requires_grad_()
        assert ops.gradient_check(ops.matmul, [x, w])
    elif name == "softmax":
        assert ops.gradient_check(ops.softmax_rows, [x])
    elif name == "masked_softmax":
        mask = torch.tensor([1.0, 0.0, 1.0, 1.0, 0.0], dtype=torch.float64).expand(3, 5)
        assert ops.gradient_check(lambda t: ops.softmax_rows(t, mask), [x])
    elif name == "layer_norm":
        gain = rng.normal((5,), dtype=torch.float64).requires_grad_()
        bias = rng.normal((5,), dtype=torch.float64).requires_grad_()
        assert ops.gradient_check(ops.layer_norm, [x, gain, bias])
    else:
        assert ops.gradient_check(ops.gelu, [x])


def test_gradient_check_needs_float64():
    with pytest.raises(ContractViolation):
        ops.gradient_check(ops.gelu, [torch.ones(2, requires_grad=True)])


def test_rng_reproducible_and_children_independent():
    assert torch.equal(Rng(11).uniform((5,)), Rng(11).uniform((5,)))
    first, second = Rng(11).child(1), Rng(11).child(2)
    assert not torch.equal(first.uniform((5,)), second.uniform((5,)))
    assert torch.equal(Rng(11).child(1).normal((4,)), Rng(11).child(1).normal((4,)))


def test_gumbel_noise_statistics():
    """Test that the sample mean matches the Euler-Mascheroni constant."""
    samples = ops.gumbel_noise(Rng(6), (1_000_000,), torch.float64)
    assert torch.isfinite(samples).all()
    assert samples.mean().item() == pytest.approx(0.5772156649, abs=0.01)
    assert torch.equal(ops.gumbel_noise(Rng(6), (3,)), ops.gumbel_noise(Rng(6), (3,)))


def test_debug_checks_raise_on_non_finite():
    ops.set_debug_checks(True)
    try:
        with pytest.raises(NumericError):
            ops.add(torch.tensor([math.inf]), torch.tensor([0.0]))
    finally:
        ops.set_debug_checks(False)
    assert torch.isinf(ops.add(torch.tensor([math.inf]), torch.tensor([0.0]))).all()


def test_resolve_dtype():
    assert ops.resolve_dtype("float64") is torch.float64
    with pytest.raises(ContractViolation):
        ops.resolve_dtype("float16")


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
