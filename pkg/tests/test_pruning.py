"""Score collection, thresholding, masks, and the slicing equivalence."""

import numpy as np
import pytest

from vitprune.errors import ConfigError, StateError
from vitprune.model import GATE_POSITIONS, ModelConfig, forward, init_model
from vitprune.pruning import (apply_plan, binarize, build_plan,
                              collect_scores, compute_threshold,
                              plan_from_keep_indices, resolve_ties)


def randomize_gates(model, rng, low=0.05, high=1.5):
    for gate in model.gate_vectors():
        gate.scores.data[...] = rng.uniform(low, high, gate.scores.data.shape)


class TestCollectScores:
    def test_entry_count(self, small_config):
        model = init_model(small_config, 0)
        entries = collect_scores(model)
        d, hidden = small_config.embed_dim, small_config.hidden_dim
        assert len(entries) == small_config.num_layers * (3 * d + hidden) == 448

    def test_fresh_model_all_ones(self, small_config):
        model = init_model(small_config, 0)
        assert all(e.magnitude == 1.0 for e in collect_scores(model))

    def test_sum_matches_l1_at_unit_lambda(self, small_config, rng):
        from vitprune.tensor import l1_penalty
        model = init_model(small_config, 0)
        randomize_gates(model, rng, low=-1.5, high=1.5)
        total = sum(e.magnitude for e in collect_scores(model))
        l1 = l1_penalty([g.scores for g in model.gate_vectors()], 1.0).item()
        assert total == pytest.approx(l1, rel=1e-12)

    def test_magnitudes_are_absolute_values(self, small_config):
        model = init_model(small_config, 0)
        model.blocks[0].gates["qkv_in"].scores.data[3] = -2.5
        entries = collect_scores(model)
        match = [e for e in entries
                 if e.site.position == "qkv_in" and e.site.block_index == 0
                 and e.index == 3]
        assert match[0].magnitude == 2.5

    def test_deterministic_order(self, small_config):
        model = init_model(small_config, 0)
        entries = collect_scores(model)
        keys = [(e.site.block_index, e.site.position, e.index) for e in entries]
        assert keys[0] == (0, "qkv_in", 0)
        assert keys == sorted(keys, key=lambda k: (k[0], GATE_POSITIONS.index(k[1]),
                                                   k[2]))

    def test_hard_model_rejected(self, small_config):
        model = init_model(small_config, 0)
        hard = apply_plan(model, build_plan(model, 0.0))
        with pytest.raises(StateError):
            collect_scores(hard)


class TestComputeThreshold:
    def test_forced_example(self):
        scores = [0.5, 0.1, 0.9, 0.3]
        tau = compute_threshold(scores, 0.5)
        pruned = [s for s in scores if s < tau]
        kept = [s for s in scores if s >= tau]
        assert sorted(pruned) == [0.1, 0.3]
        assert sorted(kept) == [0.5, 0.9]

    def test_rate_zero_prunes_nothing(self):
        scores = [0.5, 0.1, 0.9]
        tau = compute_threshold(scores, 0.0)
        assert all(s >= tau for s in scores)

    def test_rate_bounds(self):
        with pytest.raises(ConfigError):
            compute_threshold([1.0], 1.0)
        with pytest.raises(ConfigError):
            compute_threshold([1.0], -0.1)
        with pytest.raises(ConfigError):
            compute_threshold([], 0.5)

    def test_brute_force_count_oracle(self, rng):
        scores = rng.random(1000)
        tau = compute_threshold(scores, 0.4)
        assert int(np.sum(scores < tau)) == 400  # distinct values, no ties

    def test_exact_budget_over_random_multisets(self, rng):
        # acceptance-4 style: many random multisets, some with heavy ties
        for trial in range(60):
            n = int(rng.integers(5, 400))
            if trial % 3 == 0:
                scores = rng.integers(0, 4, size=n).astype(float) / 4.0
            else:
                scores = rng.random(n)
            rate = float(rng.uniform(0.0, 0.99))
            tau = compute_threshold(scores, rate)
            target = int(rate * n)
            below = int(np.sum(scores < tau))
            ties = int(np.sum(scores == tau))
            # the sorted-rank definition: below <= target <= below + ties
            assert below <= target <= below + ties


class TestBinarize:
    def test_all_kept_when_tau_below_min(self, small_config, rng):
        model = init_model(small_config, 0)
        randomize_gates(model, rng, low=0.5, high=1.5)
        plan = binarize(model, tau=0.0)
        assert plan.achieved_rate == 0.0
        assert all(mask.keep.all() for mask in plan.masks)

    def test_floor_protection_keeps_one_per_site(self, small_config, rng):
        model = init_model(small_config, 0)
        randomize_gates(model, rng, low=0.1, high=0.9)
        plan = binarize(model, tau=2.0)  # above every magnitude
        for mask in plan.masks:
            assert mask.keep.sum() == 1
            site_scores = np.abs(
                model.blocks[mask.site.block_index]
                .gates[mask.site.position].scores.data)
            assert mask.keep_indices[0] == int(np.argmax(site_scores))

    def test_tie_resolution_hits_exact_budget(self, small_config, rng):
        model = init_model(small_config, 0)
        randomize_gates(model, rng, low=0.6, high=1.5)
        for gate in model.gate_vectors():
            gate.scores.data[:8] = 0.5  # ties across every site
        entries = collect_scores(model)
        rate = 0.1  # budget (44) cuts through the tie group, no site emptied
        tau = compute_threshold(entries, rate)
        assert tau == 0.5
        ties = resolve_ties(entries, tau, rate)
        plan = binarize(model, tau, ties)
        pruned = sum(int(m.keep.shape[0] - m.keep.sum()) for m in plan.masks)
        assert pruned == int(rate * len(entries))

    def test_tie_resolution_with_floor_protection(self, small_config):
        # all magnitudes equal: ties are resolved in site order, emptying the
        # first sites, and protection retains one entry in each of those
        model = init_model(small_config, 0)
        entries = collect_scores(model)
        rate = 0.25
        target = int(rate * len(entries))
        tau = compute_threshold(entries, rate)
        plan = binarize(model, tau, resolve_ties(entries, tau, rate))
        pruned = sum(int(m.keep.shape[0] - m.keep.sum()) for m in plan.masks)
        protected = sum(1 for m in plan.masks
                        if m.keep.sum() == 1 and m.keep.shape[0] <= target)
        assert target - pruned == protected
        assert protected == 3  # 112 = 32 + 32 + 32 + 16: three sites emptied

    def test_achieved_rate_bound(self, small_config, rng):
        model = init_model(small_config, 0)
        randomize_gates(model, rng)
        entries = collect_scores(model)
        n_sites = len(plan_sites := model.gate_vectors())
        for rate in (0.1, 0.3, 0.5, 0.7, 0.9):
            plan = build_plan(model, rate)
            bound = (n_sites + 1) / len(entries)
            assert abs(plan.achieved_rate - rate) <= bound


class TestBuildPlan:
    def test_exact_global_budget(self, small_config, rng):
        model = init_model(small_config, 0)
        randomize_gates(model, rng)  # distinct values, no floor triggers
        entries = collect_scores(model)
        for rate in (0.0, 0.2, 0.4, 0.6):
            plan = build_plan(model, rate)
            pruned = sum(int(m.keep.shape[0] - m.keep.sum()) for m in plan.masks)
            assert pruned == int(rate * len(entries))

    def test_requested_rate_recorded(self, small_config, rng):
        model = init_model(small_config, 0)
        randomize_gates(model, rng)
        plan = build_plan(model, 0.4)
        assert plan.requested_rate == 0.4
        assert abs(plan.achieved_rate - 0.4) < 0.01

    def test_rate_04_within_one_percent(self, small_config, rng):
        model = init_model(small_config, 0)
        randomize_gates(model, rng)
        plan = build_plan(model, 0.4)
        assert abs(plan.achieved_rate - 0.4) <= 0.01


class TestApplyPlan:
    def test_allones_plan_preserves_logits_bitwise(self, small_config, rng):
        model = init_model(small_config, 2)
        hard = apply_plan(model, build_plan(model, 0.0))
        images = rng.normal(size=(2, 3, 16, 16))
        assert np.array_equal(forward(model, images).data,
                              forward(hard, images).data)

    def test_masked_vs_pruned_equivalence(self, small_config, rng):
        # the module's central correctness property
        for trial in range(20):
            model = init_model(small_config, 100 + trial)
            randomize_gates(model, rng)
            rate = float(rng.uniform(0.1, 0.7))
            plan = build_plan(model, rate)
            hard = apply_plan(model, plan)
            for mask in plan.masks:  # mask the soft gates to binary support
                gate = model.blocks[mask.site.block_index].gates[mask.site.position]
                gate.scores.data *= mask.keep
            images = rng.normal(size=(4, 3, 16, 16))
            soft_logits = forward(model, images).data
            hard_logits = forward(hard, images).data
            assert np.abs(soft_logits - hard_logits).max() <= 1e-10

    def test_mlp_hidden_halving_shapes(self, rng):
        cfg = ModelConfig(image_size=8, patch_size=4, in_channels=1,
                          embed_dim=8, num_layers=1, num_heads=2, mlp_ratio=4,
                          num_classes=3)
        model = init_model(cfg, 0)
        plan = build_plan(model, 0.0)
        hidden_mask = plan.mask_for(
            [m.site for m in plan.masks if m.site.position == "mlp_hidden"][0])
        hidden_mask.keep[...] = 0
        hidden_mask.keep[::2] = 1
        hidden_mask.keep_indices = np.flatnonzero(hidden_mask.keep)
        hard = apply_plan(model, plan)
        assert hard.blocks[0].w1.data.shape == (8, 16)
        assert hard.blocks[0].b1.data.shape == (16,)
        assert hard.blocks[0].w2.data.shape == (16, 8)

    def test_gate_folding_values(self, rng):
        cfg = ModelConfig(image_size=8, patch_size=4, in_channels=1,
                          embed_dim=8, num_layers=1, num_heads=2, mlp_ratio=4,
                          num_classes=3)
        model = init_model(cfg, 1)
        randomize_gates(model, rng)
        plan = build_plan(model, 0.3)
        hard = apply_plan(model, plan)
        src = model.blocks[0]
        dst = hard.blocks[0]
        sq = dst.keep["qkv_in"]
        g = src.gates["qkv_in"].scores.data
        assert np.allclose(dst.wq.data, g[sq, None] * src.wq.data[sq, :],
                           atol=0, rtol=0)

    def test_plan_model_mismatch(self, small_config, tiny_config):
        model = init_model(small_config, 0)
        other = init_model(tiny_config, 0)
        plan = build_plan(other, 0.2)
        with pytest.raises(StateError):
            apply_plan(model, plan)

    def test_hard_model_cannot_be_replanned(self, small_config):
        model = init_model(small_config, 0)
        hard = apply_plan(model, build_plan(model, 0.0))
        with pytest.raises(StateError):
            build_plan(hard, 0.2)


def test_plan_from_keep_indices_roundtrip(small_config, rng):
    model = init_model(small_config, 5)
    randomize_gates(model, rng)
    plan = build_plan(model, 0.4)
    hard = apply_plan(model, plan)
    rebuilt = plan_from_keep_indices(small_config, hard.keep_indices())
    for original, recovered in zip(plan.masks, rebuilt.masks):
        assert original.site == recovered.site
        assert np.array_equal(original.keep_indices, recovered.keep_indices)
    assert rebuilt.achieved_rate == pytest.approx(plan.achieved_rate)
