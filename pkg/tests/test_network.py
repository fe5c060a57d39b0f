import numpy as np
import pytest
import torch

from pairmae import losses
from pairmae.network import (
    ModelConfig,
    PairModel,
    inflate_to_video,
    init_parameters,
    load_checkpoint,
    pool,
    save_checkpoint,
    sincos_posembed,
)
from pairmae.patches import PatchConfig, make_mask_plan, patchify

TINY = ModelConfig(
    patch=PatchConfig(image_side=16, patch_side=8),
    enc_depth=2,
    enc_width=32,
    enc_heads=2,
    dec_depth=1,
    dec_width=16,
    dec_heads=2,
    head_hidden=24,
    head_out=8,
)


def tiny_model(seed=0, **overrides) -> PairModel:
    cfg = TINY if not overrides else ModelConfig(**{**TINY.__dict__, **overrides})
    return PairModel(cfg, init_seed=seed)


def masked_views(model, n, seed=0):
    cfg = model.cfg.patch
    rng = np.random.default_rng(seed)
    imgs = torch.from_numpy(rng.random((n, cfg.image_side, cfg.image_side, 3)).astype(np.float32))
    tokens = patchify(imgs, cfg)
    plan = make_mask_plan(n, cfg.num_tokens, 0.5, rng)
    vis = torch.gather(
        tokens, 1, plan.visible_idx.unsqueeze(-1).expand(n, plan.num_visible, cfg.patch_dim)
    )
    return tokens, vis, plan


class TestSincos:
    def test_identical_across_calls(self):
        torch.testing.assert_close(sincos_posembed(64, 32), sincos_posembed(64, 32))

    def test_entries_bounded(self):
        table = sincos_posembed(196, 64)
        assert table.min() >= -1.0 and table.max() <= 1.0

    def test_rows_pairwise_distinct(self):
        table = sincos_posembed(196, 64)
        dists = torch.cdist(table, table) + torch.eye(196) * 1e9
        assert dists.min() > 1e-4

    def test_errors(self):
        with pytest.raises(ValueError, match="square"):
            sincos_posembed(60, 32)
        with pytest.raises(ValueError, match="even"):
            sincos_posembed(64, 33)


class TestEncoder:
    def test_output_shape_with_cls(self):
        model = tiny_model()
        _, vis, plan = masked_views(model, 3)
        out = model.encoder(vis, plan.visible_idx)
        assert out.shape == (3, plan.num_visible + 1, 32)

    def test_batch_permutation_equivariance(self):
        model = tiny_model()
        model.eval()
        _, vis, plan = masked_views(model, 4)
        out = model.encoder(vis, plan.visible_idx)
        perm = torch.tensor([2, 0, 3, 1])
        out_perm = model.encoder(vis[perm], plan.visible_idx[perm])
        torch.testing.assert_close(out_perm, out[perm])

    def test_not_input_invariant(self):
        model = tiny_model()
        _, vis, plan = masked_views(model, 2)
        a = model.encoder(vis, plan.visible_idx)
        b = model.encoder(2.0 * vis, plan.visible_idx)
        assert (a - b).abs().max() > 1e-4

    def test_forward_bitwise_deterministic(self):
        model = tiny_model()
        model.eval()
        _, vis, plan = masked_views(model, 2)
        a = model.encoder(vis, plan.visible_idx)
        b = model.encoder(vis, plan.visible_idx)
        assert torch.equal(a, b)

    def test_init_deterministic_given_seed(self):
        a, b = tiny_model(seed=5), tiny_model(seed=5)
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.equal(pa, pb)
        c = tiny_model(seed=6)
        assert any(
            not torch.equal(pa, pc)
            for (_, pa), (_, pc) in zip(a.named_parameters(), c.named_parameters())
        )


class TestDecoder:
    def test_output_shape_224_config(self):
        cfg = ModelConfig(
            patch=PatchConfig(image_side=224, patch_side=16),
            enc_depth=1, enc_width=32, enc_heads=2,
            dec_depth=1, dec_width=16, dec_heads=2,
            head_hidden=16, head_out=8,
        )
        model = PairModel(cfg, init_seed=0)
        rng = np.random.default_rng(0)
        plan = make_mask_plan(2, 196, 0.75, rng)
        vis_feats = torch.randn(2, plan.num_visible, 32)
        out = model.decoder(vis_feats, plan)
        assert out.shape == (2, 196, 768)

    def test_zero_weights_give_constant_bias_prediction(self):
        model = tiny_model()
        for p in model.decoder.parameters():
            torch.nn.init.zeros_(p)
        with torch.no_grad():
            model.decoder.pred.bias.fill_(0.37)
            # LayerNorm gains stay zero -> block outputs are additive zeros.
        plan = make_mask_plan(1, model.cfg.patch.num_tokens, 0.5, np.random.default_rng(1))
        feats = torch.randn(1, plan.num_visible, model.cfg.enc_width)
        out = model.decoder(feats, plan)
        torch.testing.assert_close(out, torch.full_like(out, 0.37))

    def test_mask_token_reaches_masked_rows(self):
        model = tiny_model()
        model.eval()
        plan = make_mask_plan(1, model.cfg.patch.num_tokens, 0.5, np.random.default_rng(2))
        feats = torch.randn(1, plan.num_visible, model.cfg.enc_width)
        base = model.decoder(feats, plan)
        with torch.no_grad():
            # Non-uniform perturbation: a constant shift would be absorbed
            # by the first LayerNorm.
            model.decoder.mask_token += 0.5 * torch.randn_like(model.decoder.mask_token)
        moved = model.decoder(feats, plan)
        masked = plan.masked_idx[0]
        assert (base[0, masked] - moved[0, masked]).abs().max() > 1e-5


class TestPool:
    def test_gem_p1_equals_mean_on_nonnegative(self):
        x = torch.rand(3, 10, 6, dtype=torch.float64)
        torch.testing.assert_close(
            pool(x, "gem", 1.0), pool(x, "mean"), atol=2e-6, rtol=0
        )

    def test_gem_large_p_approaches_max(self):
        # gem(p) >= max * L^(-1/p); the 1e-2 proximity to max holds for
        # two-token pools, and the analytic floor holds for any L.
        x = torch.rand(4, 2, 5, dtype=torch.float64)
        gem = pool(x, "gem", 100.0)
        mx = pool(x, "max")
        assert (gem - mx).abs().max() < 1e-2

        wide = torch.rand(3, 20, 5, dtype=torch.float64)
        gem_w = pool(wide, "gem", 100.0)
        mx_w = pool(wide, "max")
        floor = mx_w * (20 ** (-1 / 100.0)) - 1e-9
        assert (gem_w <= mx_w + 1e-4).all()
        assert (gem_w >= floor).all()

    def test_mean_permutation_invariant(self):
        x = torch.rand(2, 12, 4)
        perm = torch.randperm(12)
        torch.testing.assert_close(pool(x, "mean"), pool(x[:, perm], "mean"))

    def test_unknown_method(self):
        with pytest.raises(ValueError, match="pooling"):
            pool(torch.rand(1, 4, 4), "median")


class TestProject:
    def test_unit_norms(self):
        model = tiny_model()
        out = model.project(torch.randn(5, 32))
        torch.testing.assert_close(out.norm(dim=1), torch.ones(5), atol=1e-5, rtol=0)

    def test_predictor_equals_target_shared_weights(self):
        model = tiny_model()
        model.eval()
        x = torch.randn(4, 32)
        torch.testing.assert_close(
            model.project(x, "predictor"), model.project(x, "target")
        )

    def test_eval_mode_deterministic(self):
        model = tiny_model()
        model.eval()
        x = torch.randn(3, 32)
        assert torch.equal(model.project(x), model.project(x))

    def test_batch_of_one_rejected_in_training(self):
        model = tiny_model()
        model.train()
        with pytest.raises(ValueError, match="batch"):
            model.project(torch.randn(1, 32))


class TestEndToEnd:
    def test_shape_contract(self):
        model = tiny_model()
        model.eval()
        tokens, vis, plan = masked_views(model, 4)
        feats = model.encoder(vis, plan.visible_idx)
        pooled = model.pool(feats)
        assert pooled.shape == (4, 32)
        emb = model.project(pooled)
        assert emb.shape == (4, 8)
        torch.testing.assert_close(emb.norm(dim=1), torch.ones(4), atol=1e-5, rtol=0)
        pred = model.decoder(model.local_features(feats), plan)
        assert pred.shape == (4, model.cfg.patch.num_tokens, model.cfg.patch.patch_dim)

    def _combined_backward(self, model, lam):
        tokens_a, vis_a, plan_a = masked_views(model, 4, seed=1)
        tokens_b, vis_b, plan_b = masked_views(model, 4, seed=2)
        feats_a = model.encoder(vis_a, plan_a.visible_idx)
        feats_b = model.encoder(vis_b, plan_b.visible_idx)
        pred_a = model.decoder(model.local_features(feats_a), plan_a)
        recon = losses.recon_loss(pred_a, tokens_a, plan_a)
        p = model.project(model.pool(feats_a))
        z = model.project(model.pool(feats_b))
        contrastive = losses.info_nce(p, z, model.tau)
        report = losses.combined_loss(recon, contrastive, lam)
        report.total.backward()

    def test_all_parameters_receive_gradient(self):
        model = tiny_model()
        model.train()
        self._combined_backward(model, lam=1.0)
        for name, p in model.named_parameters():
            assert p.grad is not None, name
            assert p.grad.abs().max() > 0, name

    def test_decoder_gets_no_gradient_from_contrastive_alone(self):
        model = tiny_model()
        model.train()
        self._combined_backward(model, lam=1.0)
        grads = {n: p.grad.clone() for n, p in model.named_parameters()}
        model.zero_grad()
        _, vis_a, plan_a = masked_views(model, 4, seed=1)
        _, vis_b, plan_b = masked_views(model, 4, seed=2)
        p = model.project(model.pool(model.encoder(vis_a, plan_a.visible_idx)))
        z = model.project(model.pool(model.encoder(vis_b, plan_b.visible_idx)))
        losses.info_nce(p, z, model.tau).backward()
        for name, param in model.named_parameters():
            if name.startswith("decoder."):
                assert param.grad is None or param.grad.abs().max() == 0, name
            else:
                assert grads[name] is not None

    def test_learnable_log_tau_receives_gradient(self):
        model = tiny_model(learnable_log_tau=True)
        model.train()
        self._combined_backward(model, lam=1.0)
        assert model.log_tau.grad is not None
        assert model.log_tau.grad.abs() > 0


class TestInflation:
    def test_t1_keeps_parameters(self):
        model = tiny_model()
        video = inflate_to_video(model, 1)
        torch.testing.assert_close(
            video.tokenizer.kernel[0], model.encoder.patch_embed.weight
        )
        torch.testing.assert_close(video.tokenizer.bias, model.encoder.patch_embed.bias)

    def test_kernel_shape_has_temporal_axis(self):
        model = tiny_model()
        video = inflate_to_video(model, 2)
        w = model.encoder.patch_embed.weight
        assert video.tokenizer.kernel.shape == (2, *w.shape)

    def test_constant_clip_matches_image_tokenizer(self):
        model = tiny_model()
        model.eval()
        for frames in (1, 2, 4):
            video = inflate_to_video(model, frames)
            video.eval()
            rng = np.random.default_rng(3)
            img = torch.from_numpy(
                rng.random((2, 16, 16, 3)).astype(np.float32)
            )
            tokens = patchify(img, model.cfg.patch)
            clip_tokens = tokens.unsqueeze(1).expand(-1, frames, -1, -1)
            embedded = video.tokenizer(clip_tokens)
            direct = model.encoder.patch_embed(tokens)
            torch.testing.assert_close(embedded, direct, atol=1e-5, rtol=1e-5)

    def test_attention_parameters_copied_unscaled(self):
        model = tiny_model()
        video = inflate_to_video(model, 3)
        for (vn, vp) in video.named_parameters():
            if vn.startswith("blocks."):
                base = dict(model.encoder.named_parameters())[vn]
                assert torch.equal(vp, base)

    def test_invalid_length(self):
        with pytest.raises(ValueError):
            inflate_to_video(tiny_model(), 0)


class TestCheckpoints:
    def test_round_trip_exact(self, tmp_path):
        model = tiny_model(seed=9)
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, model, step=17)
        loaded, meta = load_checkpoint(path)
        assert meta["step"] == 17
        for (_, pa), (_, pb) in zip(model.named_parameters(), loaded.named_parameters()):
            assert torch.equal(pa, pb)

    def test_save_load_save_identical_bytes(self, tmp_path):
        model = tiny_model(seed=9)
        p1, p2 = tmp_path / "a.npz", tmp_path / "b.npz"
        save_checkpoint(p1, model, step=3)
        loaded, meta = load_checkpoint(p1)
        save_checkpoint(p2, loaded, step=meta["step"])
        assert p1.read_bytes() == p2.read_bytes()

    def test_config_round_trips(self):
        cfg = ModelConfig.from_dict(TINY.to_dict())
        assert cfg == TINY
