import math

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from collatz_lab import autograd as ag
from collatz_lab.model import ModelConfig, Transformer
from collatz_lab.tasks import ExampleCache


def leaf(*shape, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=dtype).requires_grad_(True)


class TestPrimitives:
    def test_softmax_of_equal_logits(self):
        assert torch.allclose(ag.softmax(torch.zeros(4)), torch.full((4,), 0.25))

    @given(st.floats(-1e3, 1e3), st.integers(1, 16))
    def test_softmax_rows_sum_to_one_even_for_large_logits(self, shift, width):
        x = torch.randn(5, width, dtype=torch.float64) * 30 + shift
        s = ag.softmax(x)
        assert torch.all(torch.isfinite(s))
        assert torch.allclose(s.sum(-1), torch.ones(5, dtype=torch.float64), atol=1e-6)

    def test_cross_entropy_perfect_row_goes_to_zero(self):
        losses = []
        for gap in (1.0, 10.0, 100.0, 1000.0):
            logits = torch.tensor([[gap, 0.0, 0.0]])
            losses.append(float(ag.cross_entropy(logits, torch.tensor([0]))))
        assert losses == sorted(losses, reverse=True) and losses[-1] < 1e-12

    def test_cross_entropy_matches_direct_formula(self):
        logits = torch.randn(3, 5, 7, dtype=torch.float64)
        labels = torch.randint(0, 7, (3, 5))
        want = -torch.log_softmax(logits, -1).gather(-1, labels[..., None]).mean()
        assert torch.allclose(ag.cross_entropy(logits, labels), want)

    def test_pad_positions_get_exactly_zero_gradient(self):
        logits = leaf(2, 4, 6)
        labels = torch.tensor([[1, 2, 5, 5], [3, 5, 5, 5]])
        loss = ag.cross_entropy(logits, labels, ignore_index=5)
        ag.backward(loss)
        pad = labels == 5
        assert torch.count_nonzero(logits.grad[pad]) == 0
        assert torch.count_nonzero(logits.grad[~pad]) > 0

    @given(st.floats(0.5, 1.0))
    def test_cross_entropy_nonnegative(self, scale):
        logits = torch.randn(4, 9) * scale * 10
        assert float(ag.cross_entropy(logits, torch.randint(0, 9, (4,)))) >= 0

    def test_layer_norm_of_constant_is_zero(self):
        out = ag.layer_norm(torch.full((3, 8), 2.5))
        assert torch.count_nonzero(out) == 0

    def test_layer_norm_statistics(self):
        out = ag.layer_norm(torch.randn(6, 32, dtype=torch.float64) * 4 + 3)
        assert torch.allclose(out.mean(-1), torch.zeros(6, dtype=torch.float64), atol=1e-12)
        assert torch.allclose(out.var(-1, unbiased=False), torch.ones(6, dtype=torch.float64), atol=1e-4)

    def test_gelu_is_exact_erf_form(self):
        x = torch.linspace(-4, 4, 17, dtype=torch.float64)
        want = 0.5 * x * (1 + torch.erf(x / math.sqrt(2)))
        assert torch.allclose(ag.gelu(x), want, atol=1e-15)
        assert torch.equal(ag.relu(x), torch.clamp(x, min=0))

    def test_shape_errors_are_structured(self):
        with pytest.raises(ag.ShapeError):
            ag.matmul(torch.zeros(2, 3), torch.zeros(4, 2))
        with pytest.raises(ag.ShapeError):
            ag.add(torch.zeros(3), torch.zeros(2, 3))  # no silent broadcast of the left operand
        with pytest.raises(ag.ShapeError):
            ag.concat([torch.zeros(2, 3), torch.zeros(3, 3)], dim=1)
        with pytest.raises(ag.ShapeError):
            ag.cross_entropy(torch.zeros(2, 3), torch.zeros(3, dtype=torch.long))
        with pytest.raises(ag.ShapeError):
            ag.slice_(torch.zeros(4), 0, 2, 6)
        with pytest.raises(IndexError):
            ag.embedding(torch.tensor([5]), torch.zeros(5, 2))

    def test_concat_slice_transpose(self):
        a, b = torch.arange(6.0).view(2, 3), torch.arange(4.0).view(2, 2)
        c = ag.concat([a, b], dim=1)
        assert c.shape == (2, 5) and torch.equal(ag.slice_(c, 1, 3, 5), b)
        assert torch.equal(ag.transpose(a), a.T)

    def test_attention_matches_naive(self):
        q, k, v = (torch.randn(2, 3, 4, 8, dtype=torch.float64) for _ in range(3))
        bias = torch.zeros(2, 1, 1, 4, dtype=torch.float64)
        bias[0, ..., 0] = -1e9
        naive = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(8) + bias, -1) @ v
        assert torch.allclose(ag.attention(q, k, v, bias), naive, atol=1e-12)


class TestBackward:
    def test_product_rule(self):
        x = torch.tensor(3.0, requires_grad=True)
        y = torch.tensor(4.0, requires_grad=True)
        ag.backward(x * y)
        assert x.grad.item() == 4.0 and y.grad.item() == 3.0

    def test_sum_of_softmax_has_zero_gradient(self):
        z = leaf(7)
        ag.backward(ag.softmax(z).sum())
        assert torch.allclose(z.grad, torch.zeros(7, dtype=torch.float64), atol=1e-15)

    def test_rejects_non_scalar_and_repeat(self):
        x = leaf(3)
        with pytest.raises(ag.BackwardError):
            ag.backward(x * 2)
        loss = (x * x).sum()
        ag.backward(loss)
        with pytest.raises(ag.BackwardError):
            ag.backward(loss)

    def test_deterministic(self):
        grads = []
        for _ in range(2):
            w = leaf(16, 16, seed=3)
            x = torch.randn(8, 16, generator=torch.Generator().manual_seed(4), dtype=torch.float64)
            ag.backward(ag.gelu(ag.linear(x, w)).pow(2).sum())
            grads.append(w.grad.clone())
        assert torch.equal(grads[0], grads[1])


class TestFiniteDifference:
    def test_quadratic_form(self):
        a = torch.randn(6, 6, dtype=torch.float64)
        a = a @ a.T
        x = leaf(6, seed=1)
        rep = ag.finite_diff_check(lambda: x @ a @ x, {"x": x}, n_coords=6, step=1e-4)
        assert rep.n_checked == 6 and rep.max_rel_err < 1e-9
        # analytic gradient 2Ax
        assert torch.allclose(x.grad, 2 * a @ x.detach())

    def test_empty_params(self):
        rep = ag.finite_diff_check(lambda: torch.tensor(1.0), {})
        assert rep.empty and rep.max_rel_err == 0.0

    @staticmethod
    def _two_layer(seed):
        w1, b1, w2 = leaf(5, 8, seed=seed), leaf(8, seed=seed + 1), leaf(8, 3, seed=seed + 2)
        g = torch.Generator().manual_seed(seed + 3)
        x = torch.randn(10, 5, generator=g, dtype=torch.float64)
        y = torch.randint(0, 3, (10,), generator=g)
        fn = lambda: ag.cross_entropy(ag.matmul(ag.gelu(ag.linear(x, w1, b1)), w2), y)  # noqa: E731
        return fn, {"w1": w1, "b1": b1, "w2": w2}

    def test_two_layer_network(self):
        fn, params = self._two_layer(1)
        rep = ag.finite_diff_check(fn, params, n_coords=72, step=1e-3)
        assert rep.n_checked == 72 and rep.max_rel_err < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_two_layer_network_small_step(self, seed):
        fn, params = self._two_layer(10 * seed)
        assert ag.finite_diff_check(fn, params, n_coords=72, step=1e-5).max_rel_err < 1e-6

    def test_detects_a_wrong_gradient(self):
        class Wrong(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                ctx.save_for_backward(x)
                return x**3

            @staticmethod
            def backward(ctx, g):
                (x,) = ctx.saved_tensors
                return g * 2 * x  # should be 3x^2

        x = leaf(4, seed=5)
        rep = ag.finite_diff_check(lambda: Wrong.apply(x).sum(), {"x": x}, n_coords=4)
        assert rep.max_rel_err > 0.1


def test_tiny_transformer_gradients_float64():
    cfg = ModelConfig(base=8, d_model=16, n_heads=2, d_ff=32, n_enc_layers=1, n_dec_layers=1)
    model = Transformer(cfg, seed=0).to(torch.float64).requires_grad_(True)
    b = ExampleCache("collatz", 8).batch([3, 80, 511, 6])
    rep = ag.finite_diff_check(lambda: model.loss(b.enc, b.dec_in, b.labels), model.params, n_coords=200,
                               step=1e-5, seed=1)
    assert rep.n_checked == 200 and rep.max_rel_err < 1e-4
