import math

import numpy as np
import pytest
import torch

from motiondiff import diffusion as dm
from motiondiff.errors import NumericError, ParameterError


def test_default_schedule_tables():
    s = dm.make_schedule()
    assert s.T == 1000
    assert s.betas[0] == 1e-4 and s.betas[-1] == 0.02
    prod = 1.0
    for b in s.betas:
        prod *= 1.0 - b
    assert abs(s.alpha_bars[-1] - prod) <= 1e-15
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert np.all((s.alpha_bars > 0) & (s.alpha_bars < 1))
    assert np.array_equal(s.alphas, 1.0 - s.betas)


def test_single_step_schedule():
    s = dm.make_schedule(1, 0.3, 0.3)
    assert s.alpha_bars[0] == 1.0 - 0.3


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_schedule_rejects_bad_ranges(args):
    with pytest.raises(ParameterError):
        dm.make_schedule(*args)


def test_q_sample_closed_forms():
    s = dm.make_schedule()
    x0 = torch.randn(4, 5, dtype=torch.float64)
    t = 321
    abar = s.alpha_bars[t - 1]
    out = dm.q_sample(x0, t, torch.zeros_like(x0), s)
    assert torch.equal(out, math.sqrt(abar) * x0)
    eps = torch.randn_like(x0)
    assert torch.allclose(dm.q_sample(torch.zeros_like(x0), t, eps, s), math.sqrt(1 - abar) * eps,
                          rtol=0, atol=1e-15)
    with pytest.raises(ParameterError):
        dm.q_sample(x0, t, torch.zeros(3), s)
    with pytest.raises(ParameterError):
        dm.q_sample(x0, 0, eps, s)


def test_q_sample_moments_monte_carlo():
    s = dm.make_schedule()
    gen = torch.Generator().manual_seed(0)
    for t, x0 in [(1, 1.5), (250, 2.0), (1000, -1.0)]:
        eps = torch.randn(100_000, generator=gen, dtype=torch.float64)
        x = dm.q_sample(torch.full_like(eps, x0), t, eps, s)
        mean, std = math.sqrt(s.alpha_bars[t - 1]) * x0, math.sqrt(1 - s.alpha_bars[t - 1])
        assert abs(x.mean().item() - mean) <= 0.01 * max(abs(mean), std)
        assert abs(x.std().item() - std) <= 0.01 * std


def _zero_net(x, t, cond):
    return torch.zeros_like(x)


def test_p_step_zero_net_formula_and_final_step():
    s = dm.make_schedule()
    x = torch.randn(3, 4, dtype=torch.float64)
    out = dm.p_step(_zero_net, x, 1, None, s, torch.Generator().manual_seed(0))
    assert torch.equal(out, x / math.sqrt(1 - s.betas[0]))
    again = dm.p_step(_zero_net, x, 1, None, s, torch.Generator().manual_seed(99))
    assert torch.equal(out, again)
    # t > 1 adds sqrt(beta_t) * z with z drawn from the generator
    g1, g2 = torch.Generator().manual_seed(5), torch.Generator().manual_seed(5)
    noisy = dm.p_step(_zero_net, x, 10, None, s, g1)
    z = torch.randn(x.shape, generator=g2, dtype=x.dtype)
    assert torch.allclose(noisy, x / math.sqrt(1 - s.betas[9]) + math.sqrt(s.betas[9]) * z, atol=1e-15)


def test_p_step_non_finite_raises_with_step():
    s = dm.make_schedule(10)
    bad = lambda x, t, c: torch.full_like(x, float("nan"))  # noqa: E731
    with pytest.raises(NumericError, match="t=7"):
        dm.p_step(bad, torch.zeros(2, 3), 7, None, s)


def _oracle_for_delta(mu, sched):
    def net(x, t, cond):
        abar = sched.table("alpha_bars", t, x)
        return (x - abar.sqrt() * mu) / (1 - abar).sqrt()
    return net


def test_oracle_sampling_recovers_delta():
    s = dm.make_schedule()
    mu = torch.linspace(-2, 2, 6, dtype=torch.float64)
    x = dm.sample_loop(_oracle_for_delta(mu, s), (8, 6), s, generator=torch.Generator().manual_seed(0),
                       dtype=torch.float64)
    assert torch.allclose(x, mu.expand(8, 6), atol=1e-6)
    x = dm.sample_loop(_oracle_for_delta(mu, s), (8, 6), s, generator=torch.Generator().manual_seed(0),
                       ddim_stride=50, dtype=torch.float64)
    assert torch.allclose(x, mu.expand(8, 6), atol=1e-6)


def test_sample_loop_is_seeded_and_runs_all_steps():
    s = dm.make_schedule(25)
    calls = []

    def net(x, t, cond):
        calls.append(int(t[0]))
        return 0.1 * x

    a = dm.sample_loop(net, (2, 3), s, generator=torch.Generator().manual_seed(1))
    assert calls == list(range(25, 0, -1))
    b = dm.sample_loop(net, (2, 3), s, generator=torch.Generator().manual_seed(1))
    assert torch.equal(a, b)
    calls.clear()
    dm.sample_loop(net, (2, 3), s, generator=torch.Generator().manual_seed(1), ddim_stride=10)
    assert calls == [25, 15, 5]


def test_training_loss_oracle_zero_and_zero_net_one():
    s = dm.make_schedule()
    gen = torch.Generator().manual_seed(0)
    x0 = torch.randn(512, 20, generator=gen)
    eps = torch.randn(512, 20, generator=gen)
    t = dm.sample_steps(512, s, gen)

    def oracle(x, tt, cond):
        return eps

    assert dm.training_loss(oracle, x0, t, eps, None, s).item() == 0.0
    loss = dm.training_loss(_zero_net, x0, t, eps, None, s).item()
    assert abs(loss - 1.0) < 4 * math.sqrt(2 / eps.numel())
    mask = torch.zeros(1, 20)
    mask[0, :5] = 1
    masked = dm.training_loss(_zero_net, x0, t, eps, None, s, mask)
    assert torch.allclose(masked, (eps[:, :5] ** 2).mean())


def test_sample_steps_range():
    s = dm.make_schedule(7)
    t = dm.sample_steps(10_000, s, torch.Generator().manual_seed(0))
    assert t.min().item() == 1 and t.max().item() == 7


class _FourParamNet(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.w = torch.nn.Parameter(torch.tensor([0.3, -0.2, 0.5, 0.1], dtype=torch.float64))

    def forward(self, x, t, cond):
        w = self.w
        return w[0] * x + w[1] * torch.tanh(x) + w[2] * x * t[:, None] / 1000 + w[3]


def test_diffusion_loss_gradient_matches_finite_differences():
    s = dm.make_schedule()
    gen = torch.Generator().manual_seed(3)
    x0 = torch.randn(16, 5, generator=gen, dtype=torch.float64)
    eps = torch.randn(16, 5, generator=gen, dtype=torch.float64)
    t = dm.sample_steps(16, s, gen)
    net = _FourParamNet()
    loss = dm.training_loss(net, x0, t, eps, None, s)
    (grad,) = torch.autograd.grad(loss, net.w)
    h = 1e-6
    fd = torch.zeros(4, dtype=torch.float64)
    with torch.no_grad():
        for i in range(4):
            net.w[i] += h
            up = dm.training_loss(net, x0, t, eps, None, s)
            net.w[i] -= 2 * h
            down = dm.training_loss(net, x0, t, eps, None, s)
            net.w[i] += h
            fd[i] = (up - down) / (2 * h)
    rel = (grad - fd).norm() / fd.norm()
    assert rel <= 1e-4


def test_timestep_embedding_shape_and_range():
    e = dm.timestep_embedding(torch.tensor([1.0, 500.0, 1000.0]), 15)
    assert e.shape == (3, 15)
    assert e.abs().max() <= 1.0
    assert torch.all(e[:, -1] == 0)


def test_safe_std_replaces_constant_columns():
    x = np.stack([np.ones(10), np.arange(10.0)], 1)
    s = dm.safe_std(x)
    assert s[0] == 1.0 and s[1] == np.arange(10.0).std()
