import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from reconvat.audio import InvalidInputError
from reconvat.model import (Reconstructor, RelativeLocalAttention, Transcriber, TranscriberConfig, build_models,
                            count_parameters, frozen_batch_stats)
from reconvat.training import supervised_loss

from gradcheck import central_difference, close

SMALL = TranscriberConfig(depth=2, base_channels=4, attention_window=5, n_mels=32, recon_depth=1)
MINI = TranscriberConfig(depth=1, base_channels=4, attention_window=3, n_mels=16, recon_depth=1)


def spec(T, F, seed=0, dtype=torch.float32):
    return torch.rand(2, T, F, generator=torch.Generator().manual_seed(seed), dtype=dtype)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            TranscriberConfig(attention_window=4)
        with pytest.raises(ValueError):
            TranscriberConfig(depth=0)

    def test_no_dropout(self):
        t, r = build_models(TranscriberConfig())
        kinds = {type(m).__name__ for m in list(t.modules()) + list(r.modules())}
        assert not any("Dropout" in k for k in kinds)
        assert not any("LSTM" in k or "GRU" in k for k in kinds)

    def test_parameter_count_is_modest(self):
        t, _ = build_models(TranscriberConfig())
        assert count_parameters(t) < 2_000_000


class TestTranscriber:
    def test_full_scale_shapes(self):
        t, r = build_models(TranscriberConfig(), seed=0)
        x = torch.rand(1, 640, 229)
        with torch.no_grad():
            out = t(x)
            recon = r(out.post)
        assert out.post.shape == out.onset.shape == out.frame.shape == (1, 640, 88)
        assert recon.shape == (1, 640, 229)
        assert 0 < out.post.min() and out.post.max() < 1

    def test_one_channel(self):
        t = Transcriber(TranscriberConfig(depth=1, base_channels=4, attention_window=3, two_channel=False, n_mels=16))
        out = t(torch.rand(1, 8, 16))
        assert out.onset is None and out.post.shape == (1, 8, 88)
        with pytest.raises(ValueError):
            out.probabilities(include_onset=True)

    def test_deterministic(self):
        x = spec(16, 32)
        a, _ = build_models(SMALL, seed=3)
        b, _ = build_models(SMALL, seed=3)
        torch.testing.assert_close(a(x).post, b(x).post, rtol=0, atol=0)
        torch.testing.assert_close(a(x).post, a(x).post, rtol=0, atol=0)

    def test_second_pass_is_forward(self):
        t, _ = build_models(SMALL)
        x = spec(16, 32)
        torch.testing.assert_close(t.second_pass(x).post, t(x).post, rtol=0, atol=0)

    def test_errors(self):
        t, _ = build_models(SMALL)
        with pytest.raises(InvalidInputError):
            t(torch.rand(1, 4, 32))  # shorter than the attention window
        with pytest.raises(InvalidInputError):
            t(torch.rand(1, 16, 31))
        bad = torch.rand(1, 16, 32)
        bad[0, 3, 3] = float("nan")
        with pytest.raises(InvalidInputError):
            t(bad)

    @given(T=st.integers(5, 40), seed=st.integers(0, 1000))
    @settings(max_examples=15, deadline=None)
    def test_shape_covariance_and_finite(self, T, seed):
        t, r = build_models(SMALL, seed=1)
        with torch.no_grad():
            x = torch.rand(1, T, 32, generator=torch.Generator().manual_seed(seed)) * 3 - 1
            out = t(x)
            recon = r(out.post)
        assert out.post.shape == (1, T, 88) and recon.shape == (1, T, 32)
        for v in (out.onset, out.frame, out.post, recon):
            assert torch.isfinite(v).all()
        assert ((recon >= 0) & (recon <= 1)).all()

    def test_receptive_field(self):
        t, _ = build_models(SMALL, seed=2)
        t.eval()
        radius = 3 * SMALL.depth + 1 + SMALL.attention_window // 2
        assert t.receptive_radius() == radius
        x = spec(64, 32, dtype=torch.float64)[:1]
        t = t.double()
        t0 = 30
        y = x.clone()
        y[0, t0] += 0.5
        with torch.no_grad():
            diff = (t(y).post - t(x).post).abs()[0].amax(dim=1)
        changed = torch.nonzero(diff > 0).flatten().tolist()
        assert min(changed) >= t0 - radius and max(changed) <= t0 + radius
        # the bound is tight: the farthest rows do move
        assert min(changed) == t0 - radius and max(changed) == t0 + radius


class TestAttention:
    def test_edges_masked(self):
        att = RelativeLocalAttention(4, 4, 5).double()
        x = torch.randn(1, 7, 4, dtype=torch.float64)
        y = att(x)
        # padding must not leak: appending frames far away leaves early outputs alone
        z = att(torch.cat([x, torch.randn(1, 6, 4, dtype=torch.float64)], dim=1))
        torch.testing.assert_close(y[:, :5], z[:, :5])


class TestGradients:
    def test_transcriber_input_and_parameter_gradients(self):
        torch.manual_seed(0)
        t, _ = build_models(MINI, seed=0, dtype=torch.float64)
        x = torch.rand(1, 8, 16, dtype=torch.float64, requires_grad=True)
        target = torch.rand(1, 8, 88, dtype=torch.float64)

        def loss():
            out = t(x)
            return ((out.post - target) ** 2).mean() + out.onset.mean()

        loss().backward()
        rng = np.random.default_rng(0)
        for _ in range(10):
            idx = (0, int(rng.integers(8)), int(rng.integers(16)))
            assert close(x.grad[idx].item(), central_difference(loss, x.detach(), idx))
        params = [p for p in t.parameters()]
        sizes = np.array([p.numel() for p in params], dtype=float)
        for _ in range(20):
            p = params[rng.choice(len(params), p=sizes / sizes.sum())]
            flat = int(rng.integers(p.numel()))
            idx = np.unravel_index(flat, p.shape)
            numeric = central_difference(loss, p.data, idx)
            assert close(p.grad[idx].item(), numeric), (idx, p.grad[idx].item(), numeric)

    def test_reconstructor_gradient(self):
        _, r = build_models(MINI, seed=1, dtype=torch.float64)
        post = torch.rand(1, 8, 88, dtype=torch.float64, requires_grad=True)
        r(post).mean().backward()
        rng = np.random.default_rng(1)
        for _ in range(20):
            idx = (0, int(rng.integers(8)), int(rng.integers(88)))
            numeric = central_difference(lambda: r(post).mean(), post.detach(), idx)
            assert close(post.grad[idx].item(), numeric)

    def test_second_pass_loss_reaches_reconstructor(self):
        t, r = build_models(MINI, seed=2, dtype=torch.float64)
        x = torch.rand(1, 8, 16, dtype=torch.float64)
        labels = {"onset": torch.randint(0, 2, (1, 8, 88)).double(), "post": torch.randint(0, 2, (1, 8, 88)).double()}

        def loss():
            first = t(x)
            return supervised_loss(first, t.second_pass(r(first.post)), labels, use_onset=True)

        loss().backward()
        weight = r.head.weight
        idx = (3, 5)
        numeric = central_difference(loss, weight.data, idx)
        assert abs(numeric) > 0
        assert close(weight.grad[idx].item(), numeric)
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in t.parameters())

    def test_reconstructor_rejects_bad_shape(self):
        _, r = build_models(MINI)
        with pytest.raises(InvalidInputError):
            r(torch.rand(1, 8, 80))


def test_frozen_batch_stats_leaves_running_estimates():
    t, _ = build_models(SMALL)
    t.train()
    before = {k: v.clone() for k, v in t.state_dict().items() if "running" in k}
    with frozen_batch_stats(t):
        t(spec(16, 32))
    after = {k: v for k, v in t.state_dict().items() if "running" in k}
    assert all(torch.equal(before[k], after[k]) for k in before)
    t(spec(16, 32))
    assert not all(torch.equal(before[k], t.state_dict()[k]) for k in before)
