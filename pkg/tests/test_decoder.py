"""Masked slot decoder: alpha normalization, masking, and gradients."""

import pytest
import torch

from slotgcd.config import DecoderConfig
from slotgcd.decoder import MaskedSlotDecoder, masked_slot_softmax, reconstruction_loss
from slotgcd.errors import DataError


def make_decoder(feat_dim=5, n=8, slot_dim=6, hidden=16, dtype=torch.float32):
    dec = MaskedSlotDecoder(feat_dim, n, slot_dim, DecoderConfig(layers=4, hidden=hidden))
    return dec.to(dtype)


class TestMaskedSoftmax:
    def test_columns_sum_to_one_and_dropped_exactly_zero(self):
        g = torch.Generator().manual_seed(1)
        for _ in range(50):
            logits = torch.randn(3, 6, 10, generator=g) * 5
            mask = (torch.rand(3, 6, generator=g) > 0.4).float()
            mask[mask.sum(1) == 0, 0] = 1.0
            alpha = masked_slot_softmax(logits, mask)
            assert torch.allclose(alpha.sum(1), torch.ones(3, 10), atol=1e-6)
            assert (alpha[mask == 0] == 0).all()

    def test_matches_plain_softmax_when_all_kept(self):
        logits = torch.randn(2, 4, 7, dtype=torch.float64)
        alpha = masked_slot_softmax(logits, torch.ones(2, 4, dtype=torch.float64))
        assert torch.allclose(alpha, logits.softmax(dim=1), atol=1e-12)

    def test_dominant_dropped_logit_stays_finite(self):
        logits = torch.zeros(1, 3, 4)
        logits[0, 2] = 200.0  # dropped slot with huge logit
        mask = torch.tensor([[1.0, 1.0, 0.0]])
        alpha = masked_slot_softmax(logits, mask)
        assert torch.isfinite(alpha).all()
        assert torch.allclose(alpha[0, :2], torch.full((2, 4), 0.5))

    def test_all_dropped_raises(self):
        with pytest.raises(DataError):
            masked_slot_softmax(torch.zeros(1, 2, 3), torch.zeros(1, 2))


class TestDecode:
    def test_single_kept_slot_owns_every_position(self):
        dec = make_decoder()
        slots = torch.randn(2, 4, 6)
        mask = torch.zeros(2, 4)
        mask[:, 2] = 1.0
        out = dec(slots, mask)
        assert torch.allclose(out.alpha[:, 2], torch.ones(2, 8), atol=1e-6)
        assert torch.allclose(out.recon, out.per_slot[:, 2], atol=1e-6)

    def test_equal_logits_give_uniform_alpha(self):
        dec = make_decoder()
        with torch.no_grad():
            dec.mlp[-1].weight.zero_()
            dec.mlp[-1].bias.zero_()
        out = dec(torch.randn(1, 5, 6), torch.ones(1, 5))
        assert torch.allclose(out.alpha, torch.full((1, 5, 8), 0.2), atol=1e-7)

    def test_mixing_identity(self):
        dec = make_decoder(dtype=torch.float64)
        slots = torch.randn(3, 4, 6, dtype=torch.float64)
        mask = torch.tensor([[1, 1, 0, 1]] * 3, dtype=torch.float64)
        out = dec(slots, mask)
        mixed = (out.alpha.unsqueeze(-1) * out.per_slot).sum(1)
        assert torch.allclose(out.recon, mixed, atol=1e-12)

    def test_dropping_a_slot_only_changes_covered_positions(self):
        dec = make_decoder(dtype=torch.float64)
        slots = torch.randn(1, 4, 6, dtype=torch.float64)
        full = dec(slots, torch.ones(1, 4, dtype=torch.float64))
        ablated_mask = torch.ones(1, 4, dtype=torch.float64)
        ablated_mask[0, 1] = 0.0
        ablated = dec(slots, ablated_mask)
        untouched = full.alpha[0, 1] <= 1e-6
        if untouched.any():
            assert torch.allclose(full.recon[0, untouched], ablated.recon[0, untouched],
                                  atol=1e-9)
        covered = full.alpha[0, 1] > 1e-6
        assert not torch.allclose(full.recon[0, covered], ablated.recon[0, covered])

    def test_slot_permutation_equivariance(self):
        dec = make_decoder(dtype=torch.float64)
        slots = torch.randn(2, 5, 6, dtype=torch.float64)
        mask = torch.tensor([[1, 0, 1, 1, 1], [1, 1, 1, 0, 1]], dtype=torch.float64)
        perm = torch.tensor([3, 0, 4, 1, 2])
        base = dec(slots, mask)
        permuted = dec(slots[:, perm], mask[:, perm])
        assert torch.allclose(permuted.alpha, base.alpha[:, perm], atol=1e-10)
        assert torch.allclose(permuted.per_slot, base.per_slot[:, perm], atol=1e-10)
        assert torch.allclose(permuted.recon, base.recon, atol=1e-10)

    def test_position_count_check(self):
        dec = make_decoder(n=8)
        dec.check_positions(8)
        from slotgcd.errors import ConfigurationError
        with pytest.raises(ConfigurationError):
            dec.check_positions(9)


class TestReconstructionLoss:
    def test_identity_is_zero(self):
        h = torch.randn(2, 8, 5)
        assert float(reconstruction_loss(h, h.clone())) == 0.0

    def test_hand_computed_value(self):
        h = torch.tensor([[1.0, 0.0]])
        r = torch.tensor([[0.0, 0.0]])
        assert float(reconstruction_loss(h, r)) == pytest.approx(0.5)

    def test_joint_permutation_invariance(self):
        h = torch.randn(1, 10, 4, dtype=torch.float64)
        r = torch.randn(1, 10, 4, dtype=torch.float64)
        perm = torch.randperm(10)
        assert float(reconstruction_loss(h, r)) == pytest.approx(
            float(reconstruction_loss(h[:, perm], r[:, perm])), abs=1e-12)

    def test_shape_mismatch_raises(self):
        with pytest.raises(DataError):
            reconstruction_loss(torch.zeros(1, 3, 2), torch.zeros(1, 2, 3))


class TestGradients:
    def test_loss_gradient_matches_finite_differences(self):
        torch.manual_seed(3)
        dec = make_decoder(feat_dim=5, n=8, slot_dim=6, dtype=torch.float64)
        slots = torch.randn(1, 3, 6, dtype=torch.float64, requires_grad=True)
        mask = torch.ones(1, 3, dtype=torch.float64)
        target = torch.randn(1, 8, 5, dtype=torch.float64)

        def loss_fn(s):
            return reconstruction_loss(target, dec(s, mask).recon)

        analytic = torch.autograd.grad(loss_fn(slots), slots)[0]
        fd = torch.zeros_like(slots)
        h = 1e-6
        with torch.no_grad():
            flat = slots.reshape(-1)
            fd_flat = fd.reshape(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(loss_fn(slots))
                flat[i] = orig - h
                down = float(loss_fn(slots))
                flat[i] = orig
                fd_flat[i] = (up - down) / (2 * h)
        rel = (analytic - fd).norm() / fd.norm()
        assert float(rel) < 1e-4
