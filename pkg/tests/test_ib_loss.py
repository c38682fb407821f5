import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from semdistill.errors import ShapeError
from semdistill.ib_loss import (StochasticEncoderDensity, distillation_loss, gaussian_log_density,
                                mi_upper_bound, soft_cross_entropy, soft_cross_entropy_logits)

LOG2PI = math.log(2 * math.pi)


def brute_force_bound(means, samples, log_var):
    """Literal double loop over all (n, j) pairs with full log densities."""
    n = means.shape[0]
    lv = float(log_var)
    def logp(x, m):
        total = 0.0
        for a, b in zip(x.flatten().tolist(), m.flatten().tolist()):
            total += -0.5 * (LOG2PI + lv + (a - b) ** 2 / math.exp(lv))
        return total
    pos = sum(logp(samples[i], means[i]) for i in range(n)) / n
    allp = sum(logp(samples[i], means[j]) for i in range(n) for j in range(n)) / n ** 2
    return pos - allp


def test_log_density_at_mean():
    d = 2 * 3 * 4
    m = torch.randn(2, 3, 4, dtype=torch.float64)
    val = gaussian_log_density(m, StochasticEncoderDensity(m, 0.0))
    assert val.item() == pytest.approx(-d / 2 * LOG2PI, abs=1e-12)


def test_log_density_offset_one():
    d = 24
    m = torch.randn(2, 3, 4, dtype=torch.float64)
    val = gaussian_log_density(m + 1, StochasticEncoderDensity(m, 0.0))
    assert val.item() == pytest.approx(-d / 2 * LOG2PI - d / 2, abs=1e-12)


def test_log_density_symmetry_and_channel_variance():
    m = torch.randn(3, 2, 2, dtype=torch.float64)
    delta = torch.randn(3, 2, 2, dtype=torch.float64)
    dens = StochasticEncoderDensity(m, torch.tensor([0.1, -0.3, 0.7], dtype=torch.float64))
    assert gaussian_log_density(m + delta, dens).item() == pytest.approx(
        gaussian_log_density(m - delta, dens).item(), abs=1e-12)


def test_log_density_rejects_bad_variance():
    m = torch.zeros(1, 2, 2)
    with pytest.raises(ValueError):
        gaussian_log_density(m, StochasticEncoderDensity(m, float("-inf")))
    with pytest.raises(ShapeError):
        gaussian_log_density(torch.zeros(1, 3, 2), StochasticEncoderDensity(m, 0.0))


def test_bound_single_sample_is_zero():
    m = torch.randn(1, 2, 3, 3)
    x = m + torch.randn_like(m)
    assert mi_upper_bound(m, x, 0.3).item() == 0.0


def test_bound_identical_means_is_exactly_zero():
    g = torch.Generator().manual_seed(0)
    m = torch.randn(1, 4, 3, 3, generator=g).expand(7, -1, -1, -1).clone()
    x = m + torch.randn(m.shape, generator=g)
    assert mi_upper_bound(m, x, -0.4).item() == 0.0


@pytest.mark.parametrize("n", range(1, 9))
def test_bound_matches_brute_force(n):
    g = torch.Generator().manual_seed(n)
    m = torch.randn(n, 2, 2, 2, generator=g, dtype=torch.float64)
    lv = 0.5 * torch.randn((), generator=g, dtype=torch.float64)
    x = m + torch.exp(0.5 * lv) * torch.randn(m.shape, generator=g, dtype=torch.float64)
    assert mi_upper_bound(m, x, lv).item() == pytest.approx(brute_force_bound(m, x, lv), abs=1e-6)


def test_bound_per_channel_variance_matches_density():
    g = torch.Generator().manual_seed(11)
    m = torch.randn(4, 3, 2, 2, generator=g, dtype=torch.float64)
    x = m + torch.randn(m.shape, generator=g, dtype=torch.float64)
    lv = torch.tensor([0.2, -0.5, 1.0], dtype=torch.float64)
    ref = np.zeros((4, 4))
    for i, j in itertools.product(range(4), range(4)):
        ref[i, j] = gaussian_log_density(x[i], StochasticEncoderDensity(m[j], lv)).item()
    expected = np.trace(ref) / 4 - ref.mean()
    assert mi_upper_bound(m, x, lv).item() == pytest.approx(expected, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 10), st.integers(0, 10_000))
def test_bound_permutation_invariant(n, seed):
    g = torch.Generator().manual_seed(seed)
    m = torch.randn(n, 3, 2, 2, generator=g, dtype=torch.float64)
    x = m + torch.randn(m.shape, generator=g, dtype=torch.float64)
    perm = torch.randperm(n, generator=g)
    a = mi_upper_bound(m, x, 0.1).item()
    b = mi_upper_bound(m[perm], x[perm], 0.1).item()
    assert a == pytest.approx(b, rel=1e-10, abs=1e-10)


def test_bound_rejects_empty():
    with pytest.raises(ValueError):
        mi_upper_bound(torch.zeros(0, 1, 1, 1), torch.zeros(0, 1, 1, 1), 0.0)


def test_soft_ce_one_hot():
    p = torch.tensor([0.2, 0.5, 0.3])
    y = torch.tensor([0.0, 1.0, 0.0])
    assert soft_cross_entropy(p, y).item() == pytest.approx(math.log(2), rel=1e-6)


def test_soft_ce_uniform_entropy():
    u = torch.full((4,), 0.25, dtype=torch.float64)
    assert soft_cross_entropy(u, u).item() == pytest.approx(math.log(4), rel=1e-12)


def test_soft_ce_uniform_target_minimized_at_uniform():
    grid = np.linspace(0.01, 0.99, 99)
    y = torch.tensor([0.5, 0.5], dtype=torch.float64)
    vals = [soft_cross_entropy(torch.tensor([a, 1 - a], dtype=torch.float64), y).item() for a in grid]
    assert grid[int(np.argmin(vals))] == pytest.approx(0.5)
    a = 0.3
    assert vals[29] == pytest.approx(0.5 * (-math.log(a) - math.log(1 - a)), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 20), st.integers(0, 10_000))
def test_soft_ce_gibbs_inequality(c, seed):
    rng = np.random.default_rng(seed)
    p = torch.tensor(rng.dirichlet(np.ones(c)))
    y = torch.tensor(rng.dirichlet(np.ones(c)))
    entropy = soft_cross_entropy(y, y).item()
    assert soft_cross_entropy(p, y).item() >= entropy - 1e-8


def test_soft_ce_logits_matches_probs():
    logits = torch.randn(5, 7, dtype=torch.float64)
    y = torch.softmax(torch.randn(5, 7, dtype=torch.float64), -1)
    assert torch.allclose(soft_cross_entropy_logits(logits, y), soft_cross_entropy(logits.softmax(-1), y))


def test_soft_ce_shape_mismatch():
    with pytest.raises(ShapeError):
        soft_cross_entropy(torch.ones(3) / 3, torch.ones(4) / 4)


def _loss_inputs(seed=0, n=4):
    g = torch.Generator().manual_seed(seed)
    m = torch.randn(n, 3, 2, 2, generator=g, dtype=torch.float64)
    x = m + torch.randn(m.shape, generator=g, dtype=torch.float64)
    p = torch.softmax(torch.randn(n, 5, generator=g, dtype=torch.float64), -1)
    y = torch.softmax(torch.randn(n, 5, generator=g, dtype=torch.float64), -1)
    return m, x, p, y


def test_loss_beta_zero_is_rate():
    m, x, p, y = _loss_inputs()
    out = distillation_loss(m, x, 0.0, y, 0.0, probs=p)
    assert out.total.item() == out.rate.item() == mi_upper_bound(m, x, 0.0).item()


def test_loss_zero_rate_is_scaled_ce():
    _, _, p, y = _loss_inputs()
    m = torch.zeros(4, 3, 2, 2, dtype=torch.float64)
    x = torch.randn(4, 3, 2, 2, dtype=torch.float64)
    out = distillation_loss(m, x, 0.0, y, 32.0, probs=p)
    assert out.rate.item() == 0.0
    assert out.total.item() == pytest.approx(32.0 * soft_cross_entropy(p, y).mean().item(), rel=1e-14)


def test_loss_breakdown_composition():
    m, x, p, y = _loss_inputs(1)
    out = distillation_loss(m, x, 0.2, y, 512.0, probs=p)
    assert out.total.item() == pytest.approx(out.rate.item() + 512.0 * out.distortion.item(), rel=1e-14)
    d = out.as_dict()
    assert set(d) == {"rate", "distortion", "total", "beta"}


def test_loss_distortion_gradient_scales_with_beta():
    m, x, _, y = _loss_inputs(2)
    logits = torch.randn(4, 5, dtype=torch.float64, requires_grad=True)
    grads = []
    for beta in (1.0, 32.0, 512.0):
        logits.grad = None
        distillation_loss(m, x, 0.0, y, beta, logits=logits).total.backward()
        grads.append(logits.grad.norm().item())
    assert grads[0] < grads[1] < grads[2]
    assert grads[2] / grads[0] == pytest.approx(512.0, rel=1e-10)


def test_loss_gradient_finite_difference():
    m, _, _, y = _loss_inputs(3)
    lv = torch.tensor(0.3, dtype=torch.float64)
    logits = torch.randn(4, 5, dtype=torch.float64)
    # reparameterized draw with the noise held fixed
    eps = torch.randn_like(m)

    def f(means, log_var, lg):
        xs = means + torch.exp(0.5 * log_var) * eps
        return distillation_loss(means, xs, log_var, y, 7.0, logits=lg).total

    inputs = tuple(t.clone().requires_grad_() for t in (m, lv, logits))
    assert torch.autograd.gradcheck(f, inputs, eps=1e-6, atol=1e-6)


def test_loss_requires_one_prediction():
    m, x, p, y = _loss_inputs()
    with pytest.raises(ValueError):
        distillation_loss(m, x, 0.0, y, 1.0)
    with pytest.raises(ShapeError):
        distillation_loss(m, x, 0.0, y[:3], 1.0, probs=p[:3])
