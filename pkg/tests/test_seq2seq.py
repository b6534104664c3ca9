import pytest
import torch

from prosotron.errors import ContractError
from prosotron.seq2seq import (
    AdditiveAttention,
    DecoderCell,
    Postnet,
    Prenet,
    TextEncoder,
    masked_l1_loss,
)

torch.manual_seed(0)


class TestTextEncoder:
    def test_output_shape(self):
        enc = TextEncoder(40, 256).eval()
        ids = torch.randint(2, 40, (1, 12))
        out = enc(ids, torch.ones(1, 12, dtype=torch.bool))
        assert out.shape == (1, 12, 256)

    def test_eval_mode_deterministic(self):
        enc = TextEncoder(40, 32).eval()
        ids = torch.randint(2, 40, (1, 9))
        mask = torch.ones(1, 9, dtype=torch.bool)
        assert torch.equal(enc(ids, mask), enc(ids, mask))

    def test_train_mode_dropout_varies(self):
        enc = TextEncoder(40, 32).train()
        torch.manual_seed(1)
        ids = torch.randint(2, 40, (1, 9))
        mask = torch.ones(1, 9, dtype=torch.bool)
        assert not torch.equal(enc(ids, mask), enc(ids, mask))

    def test_empty_rejected(self):
        enc = TextEncoder(40, 32)
        with pytest.raises(ContractError):
            enc(torch.zeros(1, 0, dtype=torch.int64), torch.ones(1, 0, dtype=torch.bool))

    def test_masked_positions_zeroed(self):
        enc = TextEncoder(40, 32).eval()
        ids = torch.randint(2, 40, (1, 6))
        mask = torch.tensor([[True, True, True, False, False, False]])
        out = enc(ids, mask)
        assert torch.all(out[0, 3:] == 0)


class TestAdditiveAttention:
    def test_singleton_position(self):
        attn = AdditiveAttention(16, 8, 8).eval()
        w = attn(torch.randn(1, 1, 16), torch.ones(1, 1, dtype=torch.bool), torch.randn(1, 8))
        assert torch.allclose(w, torch.ones(1, 1))

    def test_uniform_energies(self):
        attn = AdditiveAttention(16, 8, 8).eval()
        keys = torch.randn(1, 1, 16).repeat(1, 4, 1)  # identical keys -> equal energies
        w = attn(keys, torch.ones(1, 4, dtype=torch.bool), torch.randn(1, 8))
        assert torch.allclose(w, torch.full((1, 4), 0.25), atol=1e-6)

    def test_masked_position_gets_zero(self):
        attn = AdditiveAttention(16, 8, 8).eval()
        mask = torch.tensor([[True, True, False]])
        w = attn(torch.randn(1, 3, 16), mask, torch.randn(1, 8))
        assert w[0, 2] == 0.0
        assert torch.allclose(w.sum(), torch.tensor(1.0), atol=1e-5)

    def test_all_masked_rejected(self):
        attn = AdditiveAttention(16, 8, 8)
        with pytest.raises(ContractError):
            attn(torch.randn(1, 3, 16), torch.zeros(1, 3, dtype=torch.bool), torch.randn(1, 8))

    def test_prosody_input_contract(self):
        plain = AdditiveAttention(16, 8, 8)
        with pytest.raises(ContractError):
            plain(torch.randn(1, 3, 16), torch.ones(1, 3, dtype=torch.bool),
                  torch.randn(1, 8), torch.randn(1, 2))
        with_p = AdditiveAttention(16, 8, 8, prosody_dim=2)
        with pytest.raises(ContractError):
            with_p(torch.randn(1, 3, 16), torch.ones(1, 3, dtype=torch.bool), torch.randn(1, 8))

    def test_simplex_property(self):
        attn = AdditiveAttention(16, 8, 8, prosody_dim=2).eval()
        for seed in range(5):
            g = torch.Generator().manual_seed(seed)
            mask = torch.rand(3, 7, generator=g) > 0.3
            mask[:, 0] = True
            w = attn(torch.randn(3, 7, 16, generator=g), mask,
                     torch.randn(3, 8, generator=g), torch.randn(3, 2, generator=g))
            assert (w >= 0).all()
            assert torch.allclose(w.sum(dim=1), torch.ones(3), atol=1e-5)
            assert torch.all(w[~mask] == 0)


class TestDecoderCell:
    def _cell(self, prosody_dim=0):
        return DecoderCell(
            context_dim=16, speaker_dim=4, prosody_dim=prosody_dim,
            n_mels=80, r=4, hidden=32, prenet_hidden=16, prenet_out=8,
        ).eval()

    def test_emits_r_by_mel_block(self):
        cell = self._cell()
        state = cell.initial_state(2, "cpu", torch.float32)
        frames, new_state = cell(torch.randn(2, 16), torch.randn(2, 80), torch.randn(2, 4), state)
        assert frames.shape == (2, 4, 80)
        assert new_state[0].shape == (2, 32) and new_state[1].shape == (2, 32)

    def test_deterministic(self):
        cell = self._cell(prosody_dim=2)
        state = cell.initial_state(1, "cpu", torch.float32)
        args = (torch.randn(1, 16), torch.randn(1, 80), torch.randn(1, 4), state, torch.randn(1, 2))
        a, _ = cell(*args)
        b, _ = cell(*args)
        assert torch.equal(a, b)

    def test_step_count_for_target(self):
        # teacher-forced decoding of a T-frame target runs ceil(T/r) steps
        for t, r, expected in [(40, 4, 10), (37, 4, 10), (8, 2, 4)]:
            assert -(-t // r) == expected


class TestPostnet:
    def test_shape_and_nonnegativity(self):
        net = Postnet(80, 513, hidden=32).eval()
        out = net(torch.randn(1, 40, 80))
        assert out.shape == (1, 40, 513)
        assert (out >= 0).all()

    def test_eval_deterministic(self):
        net = Postnet(80, 513, hidden=32).eval()
        x = torch.randn(2, 12, 80)
        assert torch.equal(net(x), net(x))


class TestLoss:
    def test_zero_at_exact_match(self):
        x = torch.rand(2, 8, 80)
        y = torch.rand(2, 8, 513)
        mask = torch.ones(2, 8, dtype=torch.bool)
        total, m, l = masked_l1_loss(x, x, y, y, mask)
        assert total.item() == 0.0 and m.item() == 0.0 and l.item() == 0.0

    def test_unit_mel_offset_gives_half(self):
        x = torch.rand(2, 8, 80)
        y = torch.rand(2, 8, 513)
        mask = torch.ones(2, 8, dtype=torch.bool)
        total, m, l = masked_l1_loss(x + 1.0, x, y, y, mask)
        assert abs(total.item() - 0.5) < 1e-6
        assert abs(m.item() - 1.0) < 1e-6 and l.item() == 0.0

    def test_masked_frames_ignored(self):
        x = torch.rand(1, 8, 80)
        y = torch.rand(1, 8, 513)
        mask = torch.tensor([[True] * 5 + [False] * 3])
        base, _, _ = masked_l1_loss(x, x, y, y, mask)
        xp = x.clone()
        xp[0, 5:] += 100.0
        yp = y.clone()
        yp[0, 6:] -= 50.0
        perturbed, _, _ = masked_l1_loss(xp, x, yp, y, mask)
        assert torch.allclose(base, perturbed)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            masked_l1_loss(
                torch.zeros(1, 4, 80), torch.zeros(1, 4, 80),
                torch.zeros(1, 4, 513), torch.zeros(1, 5, 513),
                torch.ones(1, 4, dtype=torch.bool),
            )


class TestPrenet:
    def test_dropout_active_in_train_mode(self):
        net = Prenet(16, 8, 8)
        x = torch.randn(4, 16)
        net.train()
        torch.manual_seed(0)
        a = net(x)
        b = net(x)
        assert not torch.equal(a, b)
        net.eval()
        assert torch.equal(net(x), net(x))
