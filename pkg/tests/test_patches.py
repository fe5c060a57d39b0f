from collections import Counter
from itertools import combinations

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pairmae.patches import (
    PatchConfig,
    make_mask_plan,
    patchify,
    random_mask,
    restore_with_mask_token,
    unpatchify,
    visible_count,
)

CFG = PatchConfig(image_side=64, patch_side=8)


class TestPatchify:
    def test_token_count_and_dim_224(self):
        cfg = PatchConfig(image_side=224, patch_side=16)
        img = torch.rand(2, 224, 224, 3)
        tokens = patchify(img, cfg)
        assert tokens.shape == (2, 196, 768)

    def test_round_trip_exact(self):
        for img in (
            torch.zeros(1, 64, 64, 3),
            torch.rand(3, 64, 64, 3),
            torch.full((1, 64, 64, 3), 0.5),
        ):
            torch.testing.assert_close(unpatchify(patchify(img, CFG), CFG), img)

    def test_constant_image_all_tokens_identical(self):
        img = torch.full((1, 64, 64, 3), 0.25)
        tokens = patchify(img, CFG)
        assert (tokens == tokens[:, :1]).all()

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            patchify(torch.rand(1, 32, 32, 3), CFG)
        with pytest.raises(ValueError):
            unpatchify(torch.rand(1, 10, 10), CFG)

    def test_raster_order(self):
        # Paint one patch and confirm it lands at the expected token index.
        img = torch.zeros(1, 64, 64, 3)
        img[0, 8:16, 16:24] = 1.0  # grid row 1, col 2 -> token 1*8+2
        tokens = patchify(img, CFG)
        assert tokens[0, 10].sum() == 8 * 8 * 3
        assert tokens[0].sum() == tokens[0, 10].sum()


class TestRandomMask:
    def test_visible_count_196_at_075(self):
        cfg = PatchConfig(image_side=224, patch_side=16)
        tokens = torch.rand(4, cfg.num_tokens, 8)
        visible, plan = random_mask(tokens, 0.75, np.random.default_rng(0))
        assert visible.shape[1] == 49
        assert plan.num_visible == 49

    def test_two_views_98_total(self):
        cfg = PatchConfig(image_side=224, patch_side=16)
        rng = np.random.default_rng(0)
        total = 0
        for _ in range(2):
            _, plan = random_mask(torch.rand(1, cfg.num_tokens, 4), 0.75, rng)
            total += plan.num_visible
        assert total == 98

    def test_ratio_zero_keeps_everything(self):
        tokens = torch.rand(2, CFG.num_tokens, 4)
        visible, plan = random_mask(tokens, 0.0, np.random.default_rng(1))
        assert plan.num_visible == CFG.num_tokens
        assert plan.masked_idx.shape[1] == 0
        restored = restore_with_mask_token(visible, plan, torch.zeros(4))
        torch.testing.assert_close(restored, tokens)

    def test_invalid_ratio_rejected(self):
        tokens = torch.rand(1, 16, 4)
        for ratio in (-0.1, 1.0, 1.5):
            with pytest.raises(ValueError):
                random_mask(tokens, ratio, np.random.default_rng(0))

    def test_plan_invariants(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            plan = make_mask_plan(3, 64, 0.75, rng)
            for row in range(3):
                vis = set(plan.visible_idx[row].tolist())
                msk = set(plan.masked_idx[row].tolist())
                assert vis | msk == set(range(64))
                assert not vis & msk
                assert sorted(plan.restore_perm[row].tolist()) == list(range(64))

    def test_per_sample_masks_independent(self):
        plan = make_mask_plan(64, 64, 0.75, np.random.default_rng(3))
        rows = {tuple(sorted(plan.visible_idx[i].tolist())) for i in range(64)}
        assert len(rows) > 1

    def test_visible_set_uniform_on_l6(self):
        # Spot-check exchangeability: all C(6, 2)=15 visible pairs should be
        # roughly equally frequent.
        rng = np.random.default_rng(4)
        draws = 6000
        counts = Counter()
        for _ in range(draws):
            plan = make_mask_plan(1, 6, 2 / 3, rng)
            counts[tuple(sorted(plan.visible_idx[0].tolist()))] += 1
        combos = list(combinations(range(6), 2))
        assert set(counts) == set(combos)
        expected = draws / len(combos)
        chi2 = sum((counts[c] - expected) ** 2 / expected for c in combos)
        # 14 dof: P(chi2 > 36.1) ~ 0.001
        assert chi2 < 36.1


class TestRestore:
    def test_single_visible_token(self):
        rng = np.random.default_rng(5)
        tokens = torch.rand(1, 16, 4)
        visible, plan = random_mask(tokens, 15 / 16, rng)
        assert plan.num_visible == 1
        fm = torch.full((4,), -7.0)
        restored = restore_with_mask_token(visible, plan, fm)
        keep = plan.visible_idx[0, 0]
        torch.testing.assert_close(restored[0, keep], tokens[0, keep])
        others = [i for i in range(16) if i != keep]
        assert (restored[0, others] == -7.0).all()

    def test_mask_token_positions_match_masked_idx(self):
        rng = np.random.default_rng(6)
        tokens = torch.rand(2, 64, 4)
        visible, plan = random_mask(tokens, 0.75, rng)
        fm = torch.full((4,), 99.0)
        restored = restore_with_mask_token(visible, plan, fm)
        for row in range(2):
            # Independent construction of the expected mask positions.
            direct = set(range(64)) - set(plan.visible_idx[row].tolist())
            found = {i for i in range(64) if (restored[row, i] == 99.0).all()}
            assert found == direct
            assert direct == set(plan.masked_idx[row].tolist())

    def test_scatter_gather_round_trip_on_visible(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            plan = make_mask_plan(1, 16, 0.5, rng)
            tokens = torch.rand(1, 16, 3)
            vis = torch.gather(
                tokens, 1, plan.visible_idx.unsqueeze(-1).expand(1, plan.num_visible, 3)
            )
            restored = restore_with_mask_token(vis, plan, torch.zeros(3))
            idx = plan.visible_idx[0]
            torch.testing.assert_close(restored[0, idx], tokens[0, idx])

    def test_row_mismatch_rejected(self):
        plan = make_mask_plan(1, 16, 0.5, np.random.default_rng(8))
        with pytest.raises(ValueError):
            restore_with_mask_token(torch.rand(1, 3, 4), plan, torch.zeros(4))


@settings(max_examples=40, deadline=None)
@given(
    ratio=st.floats(min_value=0.0, max_value=0.9),
    seed=st.integers(min_value=0, max_value=2**32 - 1),
)
def test_visible_count_rule(ratio, seed):
    plan = make_mask_plan(2, 64, ratio, np.random.default_rng(seed))
    assert plan.num_visible == visible_count(64, ratio) == round(64 * (1 - ratio))


@settings(max_examples=25, deadline=None)
@given(side=st.sampled_from([16, 32, 64]), patch=st.sampled_from([4, 8, 16]), seed=st.integers(0, 10**6))
def test_patchify_lossless_property(side, patch, seed):
    cfg = PatchConfig(image_side=side, patch_side=patch)
    rng = np.random.default_rng(seed)
    img = torch.from_numpy(rng.random((1, side, side, 3), dtype=np.float64).astype(np.float32))
    torch.testing.assert_close(unpatchify(patchify(img, cfg), cfg), img)
