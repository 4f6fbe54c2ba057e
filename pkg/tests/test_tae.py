import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from posestream.motion import POSE_DIM
from posestream.tae import (
    CausalConv1d,
    CausalTAE,
    GaussianParams,
    TaeConfig,
    causal_pad_amount,
    load_tae,
    reparameterize,
    save_tae,
    sigma_star_sq,
    tae_loss,
)

# every conv layer of the reference architecture: (kernel, stride, dilation, padding)
ARCH_TABLE = (
    # encoder
    [(3, 1, 1, 2)]
    + 2 * [(4, 2, 1, 2), (3, 1, 9, 18), (1, 1, 1, 0), (3, 1, 3, 6), (1, 1, 1, 0), (3, 1, 1, 2), (1, 1, 1, 0)]
    + [(3, 1, 1, 2)]
    # decoder
    + [(3, 1, 1, 2)]
    + 2 * [(3, 1, 9, 18), (1, 1, 1, 0), (3, 1, 3, 6), (1, 1, 1, 0), (3, 1, 1, 2), (1, 1, 1, 0), (3, 1, 1, 2)]
    + [(3, 1, 1, 2), (3, 1, 1, 2)]
)


def tiny_tae(latent_dim=8, hidden=32, seed=0) -> CausalTAE:
    torch.manual_seed(seed)
    return CausalTAE(TaeConfig(latent_dim=latent_dim, hidden=hidden))


class TestPaddingLaw:
    def test_reference_values(self):
        assert causal_pad_amount(3, 1, 1) == 2
        assert causal_pad_amount(4, 2, 1) == 2
        assert causal_pad_amount(3, 1, 9) == 18
        assert causal_pad_amount(1, 1, 1) == 0

    def test_whole_architecture_table(self):
        for k, s, d, pad in ARCH_TABLE:
            assert causal_pad_amount(k, s, d) == pad, (k, s, d)

    def test_model_layers_match_formula(self):
        model = tiny_tae()
        convs = [m for m in model.modules() if isinstance(m, CausalConv1d)]
        assert len(convs) == len(ARCH_TABLE)
        for conv in convs:
            k = conv.conv.kernel_size[0]
            s = conv.conv.stride[0]
            d = conv.conv.dilation[0]
            assert conv.left_pad == causal_pad_amount(k, s, d)

    def test_negative_padding_rejected(self):
        with pytest.raises(ValueError):
            causal_pad_amount(1, 2, 1)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 4), st.integers(1, 16))
    def test_formula(self, k, s, d):
        if (k - 1) * d + (1 - s) < 0:
            with pytest.raises(ValueError):
                causal_pad_amount(k, s, d)
        else:
            assert causal_pad_amount(k, s, d) == (k - 1) * d + (1 - s)


class TestCausalConv:
    def test_pointwise_kernel_is_linear_map(self):
        torch.manual_seed(0)
        conv = CausalConv1d(3, 2, 1)
        x = torch.randn(1, 3, 10)
        y = conv(x)
        w = conv.conv.weight.squeeze(-1)
        expected = torch.einsum("oc,bct->bot", w, x) + conv.conv.bias.view(1, -1, 1)
        assert torch.allclose(y, expected, atol=1e-6)
        assert y.shape == (1, 2, 10)

    def test_impulse_support(self):
        conv = CausalConv1d(1, 1, 3)
        with torch.no_grad():
            conv.conv.weight.fill_(1.0)
            conv.conv.bias.zero_()
        x = torch.zeros(1, 1, 16)
        x[0, 0, 5] = 1.0
        y = conv(x)[0, 0]
        assert set(torch.nonzero(y).flatten().tolist()) == {5, 6, 7}

    @pytest.mark.parametrize("kernel,stride,dilation", [(3, 1, 1), (4, 2, 1), (3, 1, 3)])
    def test_perturbation_never_leaks_backward(self, kernel, stride, dilation):
        torch.manual_seed(1)
        conv = CausalConv1d(2, 2, kernel, stride=stride, dilation=dilation)
        x = torch.randn(1, 2, 16)
        base = conv(x)
        for t0 in range(16):
            pert = x.clone()
            pert[0, :, t0] += 1.0
            diff = (conv(pert) - base).abs().sum(dim=1)[0]
            first_affected = t0 // stride
            assert torch.all(diff[:first_affected] < 1e-6), f"t0={t0}"

    def test_stream_matches_batch_for_stride1(self):
        torch.manual_seed(2)
        conv = CausalConv1d(3, 3, 3, dilation=2)
        x = torch.randn(1, 3, 12)
        full = conv(x)
        state = conv.init_state(1)
        outs = []
        for chunk in torch.split(x, [3, 1, 5, 3], dim=2):
            y, state = conv.forward_stream(chunk, state)
            outs.append(y)
        assert torch.allclose(torch.cat(outs, dim=2), full, atol=1e-6)


class TestEncoder:
    def test_64_frames_give_16_latents(self):
        model = tiny_tae()
        params = model.encode(torch.randn(2, 64, POSE_DIM))
        assert params.mu.shape == (2, 16, 8)
        assert params.log_var.shape == (2, 16, 8)

    def test_zero_weights_give_standard_normal_params(self):
        model = tiny_tae()
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
        params = model.encode(torch.randn(1, 16, POSE_DIM))
        assert torch.all(params.mu == 0)
        assert torch.all(params.log_var == 0)

    def test_appending_frames_preserves_earlier_latents(self):
        model = tiny_tae()
        x = torch.randn(1, 64, POSE_DIM)
        extra = torch.randn(1, 4, POSE_DIM)
        base = model.encode(x)
        extended = model.encode(torch.cat([x, extra], dim=1))
        assert extended.mu.shape[1] == 17
        assert torch.allclose(extended.mu[:, :16], base.mu, atol=1e-6)
        assert torch.allclose(extended.log_var[:, :16], base.log_var, atol=1e-6)

    def test_indivisible_length_needs_padding_flag(self):
        model = tiny_tae()
        x = torch.randn(1, 10, POSE_DIM)
        with pytest.raises(ValueError):
            model.encode(x)
        params = model.encode(x, pad_partial=True)
        assert params.mu.shape[1] == math.ceil(10 / 4)

    def test_causality_random_future_perturbations(self):
        model = tiny_tae()
        rng = np.random.default_rng(0)
        x = torch.randn(1, 32, POSE_DIM)
        base = model.encode(x)
        for _ in range(20):
            i = int(rng.integers(0, 7))  # latent index to protect
            t = int(rng.integers((i + 1) * 4, 32))  # a strictly-future frame
            pert = x.clone()
            pert[0, t] += torch.from_numpy(rng.normal(size=POSE_DIM)).float()
            new = model.encode(pert)
            assert torch.allclose(new.mu[0, : i + 1], base.mu[0, : i + 1], atol=1e-6)


class TestReparameterize:
    def test_zero_sigma_returns_mu(self):
        mu = torch.randn(4, 8)
        params = GaussianParams(mu, torch.full((4, 8), -1e9))
        z = reparameterize(params, torch.Generator().manual_seed(0))
        assert torch.allclose(z, mu, atol=1e-5)

    def test_seeded_determinism(self):
        params = GaussianParams(torch.randn(4, 8), torch.randn(4, 8))
        z1 = reparameterize(params, torch.Generator().manual_seed(7))
        z2 = reparameterize(params, torch.Generator().manual_seed(7))
        assert torch.equal(z1, z2)

    def test_monte_carlo_mean(self):
        n = 100_000
        params = GaussianParams(torch.ones(n, 1), torch.zeros(n, 1))
        z = reparameterize(params, torch.Generator().manual_seed(1))
        assert abs(z.mean().item() - 1.0) < 0.02


class TestDecoder:
    def test_16_latents_give_64_frames(self):
        model = tiny_tae()
        frames = model.decode_full(torch.randn(1, 16, 8))
        assert frames.shape == (1, 64, POSE_DIM)

    def test_perturbing_latent_preserves_earlier_frames(self):
        model = tiny_tae()
        z = torch.randn(1, 8, 8)
        base = model.decode_full(z)
        for i in range(8):
            pert = z.clone()
            pert[0, i] += 1.0
            out = model.decode_full(pert)
            assert torch.allclose(out[0, : i * 4], base[0, : i * 4], atol=1e-6), f"latent {i}"

    def test_incremental_equals_full(self):
        model = tiny_tae()
        z = torch.randn(16, 8)
        full = model.decode_full(z)
        state = model.init_decoder_state()
        chunks = []
        for i in range(16):
            frames, state = model.decode_step(z[i], state, index=i)
            chunks.append(frames)
        inc = torch.cat(chunks)
        assert (inc - full).abs().max().item() < 1e-5

    def test_single_latent_gives_downsample_frames(self):
        model = tiny_tae()
        frames, state = model.decode_step(torch.randn(8), model.init_decoder_state())
        assert frames.shape == (4, POSE_DIM)
        assert state.index == 1

    def test_reset_state_is_independent(self):
        model = tiny_tae()
        z = torch.randn(4, 8)
        state = model.init_decoder_state()
        for i in range(4):
            _, state = model.decode_step(z[i], state)
        fresh = model.init_decoder_state()
        again, _ = model.decode_step(z[0], fresh)
        direct = model.decode_full(z[:1])
        assert torch.allclose(again, direct, atol=1e-6)

    def test_out_of_order_latent_rejected(self):
        model = tiny_tae()
        state = model.init_decoder_state()
        _, state = model.decode_step(torch.randn(8), state, index=0)
        with pytest.raises(ValueError, match="out-of-order"):
            model.decode_step(torch.randn(8), state, index=3)


class TestSigmaStar:
    def test_zero_error_clamped(self):
        x = torch.randn(4, 16)
        assert sigma_star_sq(x, x).item() == pytest.approx(1e-8)

    def test_constant_offset(self):
        x = torch.zeros(3, 5)
        assert sigma_star_sq(x, x + 2.0).item() == pytest.approx(4.0)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(272, 64))
        y = rng.normal(size=(272, 64))
        total = 0.0
        for d in range(272):
            for i in range(64):
                total += (x[d, i] - y[d, i]) ** 2
        expected = total / (272 * 64)
        got = sigma_star_sq(torch.from_numpy(x), torch.from_numpy(y)).item()
        assert abs(got - expected) / expected < 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sigma_star_sq(torch.zeros(2, 2), torch.zeros(2, 3))


def brute_force_loss(x, x_hat, mu, log_var, lam, root_dims=8):
    """Literal per-element evaluation of the training objective."""
    var_star = max(((x - x_hat) ** 2).mean(), 1e-8)
    log_sigma = 0.5 * np.log(var_star)
    recon = root = 0.0
    n_frames, dims = x.shape
    for i in range(n_frames):
        for d in range(dims):
            term = (x[i, d] - x_hat[i, d]) ** 2 / (2 * var_star) + log_sigma
            recon += term
            if d < root_dims:
                root += term
    kl = 0.0
    for i in range(mu.shape[0]):
        for d in range(mu.shape[1]):
            kl += 0.5 * (mu[i, d] ** 2 + np.exp(log_var[i, d]) - log_var[i, d] - 1)
    return recon + kl + lam * root, recon, kl, root


class TestTaeLoss:
    def test_kl_zero_at_prior(self):
        x = torch.randn(1, 4, 6)
        params = GaussianParams(torch.zeros(1, 1, 3), torch.zeros(1, 1, 3))
        _, parts = tae_loss(x, torch.randn_like(x), params, 7.0)
        assert parts["kl"].item() == pytest.approx(0.0, abs=1e-9)

    def test_kl_half_for_unit_mean(self):
        x = torch.randn(1, 4, 6)
        params = GaussianParams(torch.ones(1, 1, 1), torch.zeros(1, 1, 1))
        _, parts = tae_loss(x, torch.randn_like(x), params, 7.0)
        assert parts["kl"].item() == pytest.approx(0.5)

    def test_perfect_reconstruction_hits_clamp(self):
        x = torch.randn(1, 10, POSE_DIM)
        params = GaussianParams(torch.zeros(1, 2, 4), torch.zeros(1, 2, 4))
        total, parts = tae_loss(x, x.clone(), params, 7.0)
        expected_recon = POSE_DIM * 10 * math.log(1e-4)
        expected_root = 8 * 10 * math.log(1e-4)
        assert parts["recon"].item() == pytest.approx(expected_recon, rel=1e-6)
        assert parts["root"].item() == pytest.approx(expected_root, rel=1e-6)
        assert total.item() == pytest.approx(expected_recon + 7.0 * expected_root, rel=1e-6)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(12, 20))
        x_hat = rng.normal(size=(12, 20))
        mu = rng.normal(size=(3, 5))
        log_var = rng.normal(size=(3, 5))
        lam = 7.0
        expected, e_recon, e_kl, e_root = brute_force_loss(x, x_hat, mu, log_var, lam)
        total, parts = tae_loss(
            torch.from_numpy(x),
            torch.from_numpy(x_hat),
            GaussianParams(torch.from_numpy(mu), torch.from_numpy(log_var)),
            lam,
        )
        assert abs(total.item() - expected) / abs(expected) < 1e-9
        assert abs(parts["recon"].item() - e_recon) / abs(e_recon) < 1e-9
        assert abs(parts["kl"].item() - e_kl) / abs(e_kl) < 1e-9
        assert abs(parts["root"].item() - e_root) / abs(e_root) < 1e-9

    def test_decomposition_identity(self):
        rng = torch.Generator().manual_seed(3)
        x = torch.randn(2, 8, 16, generator=rng)
        x_hat = torch.randn(2, 8, 16, generator=rng)
        params = GaussianParams(torch.randn(2, 2, 4, generator=rng), torch.randn(2, 2, 4, generator=rng))
        lam = 5.5
        total, parts = tae_loss(x, x_hat, params, lam, root_dims=8)
        assert total.item() == pytest.approx(
            (parts["recon"] + parts["kl"] + lam * parts["root"]).item()
        )
        assert parts["kl"].item() >= 0.0

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(0)
        x = torch.randn(4, 10, dtype=torch.float64)
        x_hat = torch.randn(4, 10, dtype=torch.float64, requires_grad=True)
        params = GaussianParams(
            torch.randn(1, 3, dtype=torch.float64), torch.randn(1, 3, dtype=torch.float64)
        )
        var = sigma_star_sq(x, x_hat.detach())
        total, _ = tae_loss(x, x_hat, params, 7.0, var_star=var)
        total.backward()
        grad = x_hat.grad.clone()
        eps = 1e-6
        for idx in [(0, 0), (1, 5), (3, 9), (2, 3)]:
            plus = x_hat.detach().clone()
            plus[idx] += eps
            minus = x_hat.detach().clone()
            minus[idx] -= eps
            lp, _ = tae_loss(x, plus, params, 7.0, var_star=var)
            lm, _ = tae_loss(x, minus, params, 7.0, var_star=var)
            fd = (lp - lm).item() / (2 * eps)
            assert abs(fd - grad[idx].item()) / max(abs(fd), 1e-12) < 1e-4


class TestCheckpoint:
    def test_save_load_roundtrip(self, tmp_path):
        model = tiny_tae(seed=5)
        path = tmp_path / "tae.mstc"
        save_tae(path, model, extra={"stop_threshold": 0.5})
        back, config = load_tae(path)
        assert config["stop_threshold"] == 0.5
        x = torch.randn(1, 16, POSE_DIM)
        a = model.encode(x)
        b = back.encode(x)
        assert torch.allclose(a.mu, b.mu)
        assert torch.allclose(a.log_var, b.log_var)
