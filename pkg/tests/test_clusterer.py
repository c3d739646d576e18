"""Adaptive slot attention: initialization, attention, and Gumbel selection."""

import math

import pytest
import torch

from slotgcd.clusterer import AdaptiveSlotAttention, gumbel_keep_sample
from slotgcd.config import ClustererConfig
from slotgcd.errors import DataError


def make_clusterer(feat_dim=10, k_max=4, d_slot=6, dtype=torch.float32, **kwargs):
    cfg = ClustererConfig(k_max=k_max, d_slot=d_slot, **kwargs)
    return AdaptiveSlotAttention(feat_dim, cfg).to(dtype)


def force_selector_logits(clusterer, keep_logit, drop_logit):
    """Make the scoring network emit the same (keep, drop) pair for every slot."""
    with torch.no_grad():
        clusterer.selector[-1].weight.zero_()
        clusterer.selector[-1].bias.copy_(torch.tensor([keep_logit, drop_logit]))


class TestInitSlots:
    def test_zero_sigma_collapses_to_mu(self):
        clusterer = make_clusterer()
        with torch.no_grad():
            clusterer.slot_log_sigma.fill_(-40.0)
        slots = clusterer.init_slots(3)
        assert torch.allclose(slots, clusterer.slot_mu.expand_as(slots), atol=1e-12)

    def test_sample_specific_per_batch_element(self):
        clusterer = make_clusterer()
        g = torch.Generator().manual_seed(0)
        slots = clusterer.init_slots(2, g)
        assert not torch.allclose(slots[0], slots[1])

    def test_monte_carlo_mean_matches_mu(self):
        clusterer = make_clusterer(k_max=1, d_slot=4)
        with torch.no_grad():
            clusterer.slot_mu.copy_(torch.tensor([0.5, -1.0, 2.0, 0.0]))
            clusterer.slot_log_sigma.fill_(math.log(0.3))
        g = torch.Generator().manual_seed(1)
        n = 100_000
        draws = clusterer.init_slots(n, g).reshape(n, 4)
        tolerance = 3 * 0.3 / math.sqrt(n)
        assert (draws.mean(0) - clusterer.slot_mu).abs().max() < tolerance

    def test_seeded_determinism(self):
        clusterer = make_clusterer()
        a = clusterer.init_slots(2, torch.Generator().manual_seed(5))
        b = clusterer.init_slots(2, torch.Generator().manual_seed(5))
        assert torch.equal(a, b)


class TestAttend:
    def test_attention_normalized_over_slots(self):
        clusterer = make_clusterer()
        features = torch.randn(3, 12, 10)
        _, attn = clusterer.attend(clusterer.init_slots(3), features)
        assert torch.allclose(attn.sum(dim=1), torch.ones(3, 12), atol=1e-6)

    def test_single_slot_gets_everything(self):
        clusterer = make_clusterer(k_max=1)
        features = torch.randn(2, 9, 10)
        _, attn = clusterer.attend(clusterer.init_slots(2), features)
        assert torch.allclose(attn, torch.ones(2, 1, 9))

    def test_identical_positions_identical_attention(self):
        clusterer = make_clusterer()
        features = torch.randn(1, 5, 10)
        features[0, 3] = features[0, 1]
        _, attn = clusterer.attend(clusterer.init_slots(1), features)
        assert torch.equal(attn[0, :, 1], attn[0, :, 3])

    def test_permutation_equivariance(self):
        clusterer = make_clusterer(dtype=torch.float64)
        features = torch.randn(2, 7, 10, dtype=torch.float64)
        init = clusterer.init_slots(2, torch.Generator().manual_seed(2))
        perm = torch.tensor([2, 0, 3, 1])
        slots_a, attn_a = clusterer.attend(init, features)
        slots_b, attn_b = clusterer.attend(init[:, perm], features)
        assert torch.allclose(slots_b, slots_a[:, perm], atol=1e-5)
        assert torch.allclose(attn_b, attn_a[:, perm], atol=1e-5)

    def test_empty_feature_map_rejected(self):
        clusterer = make_clusterer()
        with pytest.raises(DataError):
            clusterer.attend(clusterer.init_slots(1), torch.zeros(1, 0, 10))

    def test_jvp_matches_finite_differences(self):
        torch.manual_seed(4)
        clusterer = make_clusterer(feat_dim=10, k_max=3, d_slot=6, dtype=torch.float64)
        init = clusterer.init_slots(1, torch.Generator().manual_seed(3)).detach()
        features = torch.randn(1, 8, 10, dtype=torch.float64)

        def fn(s, f):
            slots, attn = clusterer.attend(s, f)
            return torch.cat([slots.reshape(-1), attn.reshape(-1)])

        vs = torch.randn_like(init)
        vf = torch.randn_like(features)
        _, jvp = torch.autograd.functional.jvp(fn, (init, features), (vs, vf))
        h = 1e-6
        with torch.no_grad():
            fd = (fn(init + h * vs, features + h * vf)
                  - fn(init - h * vs, features - h * vf)) / (2 * h)
        rel = (jvp.detach() - fd).norm() / fd.norm()
        assert float(rel) < 1e-4


class TestGumbelSample:
    def test_forward_values_are_one_hot(self):
        g = torch.Generator().manual_seed(0)
        logits = torch.randn(50, 2, generator=g)
        sample = gumbel_keep_sample(logits, 1.0, g)
        assert ((sample.detach() == 0) | (sample.detach() == 1)).all()
        assert torch.allclose(sample.detach().sum(-1), torch.ones(50))

    def test_empirical_frequency_matches_softmax(self):
        # the hard sample's distribution is softmax(logits) at any temperature
        g = torch.Generator().manual_seed(1)
        for delta in (-3.0, -1.0, 0.0, 1.5, 3.0):
            logits = torch.tensor([[delta, 0.0]]).expand(10_000, 2)
            freq = gumbel_keep_sample(logits, 0.7, g)[:, 0].detach().mean()
            expected = 1.0 / (1.0 + math.exp(-delta))
            assert abs(float(freq) - expected) < 0.02

    def test_straight_through_gradient_flows(self):
        logits = torch.zeros(100, 2, requires_grad=True)
        sample = gumbel_keep_sample(logits, 1.0, torch.Generator().manual_seed(2))
        sample[:, 0].sum().backward()
        assert logits.grad is not None
        assert logits.grad.abs().sum() > 0

    def test_straight_through_matches_expected_gradient(self):
        # linear objective with interaction on a 2-slot toy: at small
        # temperature the straight-through estimate converges to the exact
        # gradient of the expected objective
        gaps = torch.tensor([0.4, -0.8], dtype=torch.float64)
        logits = torch.stack([gaps, torch.zeros(2, dtype=torch.float64)], dim=-1)
        logits = logits.unsqueeze(0).expand(100_000, 2, 2).clone().requires_grad_(True)
        sample = gumbel_keep_sample(logits, 0.1, torch.Generator().manual_seed(3))
        m = sample[..., 0]
        objective = (3.0 * m[:, 0] + 2.0 * m[:, 1] + m[:, 0] * m[:, 1]).mean()
        objective.backward()
        st_grad = logits.grad.sum(0)[:, 0]  # d/d(keep logit), summed over samples

        p = torch.sigmoid(gaps)
        # E[f] = 3 p1 + 2 p2 + p1 p2; dE/dgap_k = coeff_k * p_k (1 - p_k)
        expected = torch.stack([(3 + p[1]) * p[0] * (1 - p[0]),
                                (2 + p[0]) * p[1] * (1 - p[1])])
        rel = (st_grad - expected).abs() / expected.abs()
        assert float(rel.max()) < 0.05


class TestSelectSlots:
    def test_saturated_logits_always_keep(self):
        clusterer = make_clusterer()
        force_selector_logits(clusterer, 20.0, -20.0)
        g = torch.Generator().manual_seed(0)
        keep_prob, mask = clusterer.select_slots(torch.randn(64, 4, 6), g, mode="stochastic")
        assert (keep_prob.double() >= 1 - 1e-8).all()
        assert (mask.detach() == 1).all()

    def test_hard_mode_tie_breaks_toward_keep(self):
        clusterer = make_clusterer()
        force_selector_logits(clusterer, 0.7, 0.7)
        _, mask = clusterer.select_slots(torch.randn(2, 4, 6), mode="hard")
        assert (mask == 1).all()

    def test_keep_all_mode(self):
        clusterer = make_clusterer()
        force_selector_logits(clusterer, -9.0, 9.0)
        _, mask = clusterer.select_slots(torch.randn(2, 4, 6), mode="keep-all")
        assert (mask == 1).all()

    def test_empirical_keep_frequency_matches_keep_prob(self):
        clusterer = make_clusterer()
        force_selector_logits(clusterer, 0.8, 0.0)
        g = torch.Generator().manual_seed(4)
        slots = torch.randn(1, 4, 6)
        keep_prob, _ = clusterer.select_slots(slots, g, mode="stochastic")
        draws = torch.stack([clusterer.select_slots(slots, g, mode="stochastic")[1].detach()
                             for _ in range(10_000)])
        freq = draws.mean(0)
        assert (freq - keep_prob.detach()).abs().max() < 0.02

    def test_force_keep_when_all_dropped(self):
        clusterer = make_clusterer()
        force_selector_logits(clusterer, -30.0, 30.0)
        g = torch.Generator().manual_seed(5)
        keep_prob, mask = clusterer.select_slots(torch.randn(8, 4, 6), g, mode="stochastic")
        assert (mask.detach().sum(dim=1) == 1).all()
        _, hard_mask = clusterer.select_slots(torch.randn(8, 4, 6), mode="hard")
        assert (hard_mask.detach().sum(dim=1) == 1).all()


class TestForward:
    def test_composition_matches_stagewise_calls(self):
        clusterer = make_clusterer()
        features = torch.randn(2, 12, 10)
        state = clusterer(features, torch.Generator().manual_seed(6))
        g = torch.Generator().manual_seed(6)
        slots = clusterer.init_slots(2, g)
        slots, attn = clusterer.attend(slots, features)
        keep_prob, keep_mask = clusterer.select_slots(slots, g)
        assert torch.equal(state.slots, slots)
        assert torch.equal(state.attention, attn)
        assert torch.equal(state.keep_prob, keep_prob)
        assert torch.equal(state.keep_mask.detach(), keep_mask.detach())

    def test_paper_default_shapes(self):
        cfg = ClustererConfig()  # k_max=50, d_slot=64
        clusterer = AdaptiveSlotAttention(32, cfg)
        state = clusterer(torch.randn(2, 16, 32), torch.Generator().manual_seed(0))
        assert state.slots.shape == (2, 50, 64)
        assert state.attention.shape == (2, 50, 16)

    def test_state_invariants(self):
        clusterer = make_clusterer()
        for seed in range(5):
            state = clusterer(torch.randn(3, 9, 10), torch.Generator().manual_seed(seed))
            assert torch.allclose(state.attention.sum(1), torch.ones(3, 9), atol=1e-6)
            assert (state.keep_prob > 0).all()
            assert (state.kept_count() >= 1).all()
            kept = state.keep_mask.detach() == 1
            assert (state.keep_prob.detach()[kept] > 0).all()
