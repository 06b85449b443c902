import copy

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mt4ssl import numerics as nx
from mt4ssl.backbone import Backbone, BackboneConfig, Linear
from mt4ssl.errors import ConfigError, DimensionError, ParamSetError
from mt4ssl.online_targets import (
    TeacherConfig,
    context_subset,
    ema_update,
    extract_targets,
    online_loss,
    tau_at,
    teacher_init,
)

D64 = torch.float64
TC = TeacherConfig(top_k=2)


def small_backbone(num_layers=2, seed=0):
    torch.manual_seed(seed)
    cfg = BackboneConfig(encoder_dim=8, model_dim=16, ffn_dim=32, num_layers=num_layers, num_heads=2, pos_conv_kernel=5, pos_conv_groups=2)
    return Backbone(cfg).double().eval()


class TestInit:
    def test_names_match_context_subset(self):
        bb = small_backbone()
        state = teacher_init(bb, TC)
        student = context_subset(nx.param_set(bb))
        assert list(state.params) == list(student)
        assert not any(n.startswith("encoder.") or n == "mask_emb" for n in state.params)
        assert state.step == 0

    def test_forward_matches_student(self):
        bb = small_backbone()
        state = teacher_init(bb, TeacherConfig(top_k=1, normalize=False))
        h = torch.randn(9, 8, dtype=D64)
        assert torch.equal(state.network(h).frames, bb.context_forward(bb.project_and_mask(h)).frames)

    def test_copy_semantics(self):
        bb = small_backbone()
        state = teacher_init(bb, TC)
        before = {n: p.clone() for n, p in state.params.items()}
        with torch.no_grad():
            for p in bb.parameters():
                p.add_(1.0)
        assert all(torch.equal(before[n], p) for n, p in state.params.items())

    def test_init_twice_identical(self):
        bb = small_backbone()
        a, b = teacher_init(bb, TC), teacher_init(bb, TC)
        assert all(torch.equal(a.params[n], b.params[n]) for n in a.params)

    def test_top_k_too_large(self):
        with pytest.raises(ConfigError):
            teacher_init(small_backbone(), TeacherConfig(top_k=3))


class TestTau:
    def test_examples(self):
        assert tau_at(0, 1000) == 0.99
        assert tau_at(75, 1000) == 0.999
        assert tau_at(1000, 1000) == 0.999
        assert tau_at(5000, 1000) == 0.999
        assert tau_at(40, 1000, warmup_frac=0.08) == pytest.approx(0.9945, abs=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 1_000_000))
    def test_monotone_and_clamped(self, total):
        steps = sorted({0, 1, total // 3, int(0.075 * total), int(0.075 * total) + 1, total})
        taus = [tau_at(s, total) for s in steps]
        assert all(0.99 <= t <= 0.999 for t in taus)
        assert all(a <= b for a, b in zip(taus, taus[1:]))
        assert taus[-1] == 0.999


class TestEMA:
    def test_tau_one_and_zero(self):
        bb = small_backbone()
        state = teacher_init(bb, TC)
        other = small_backbone(seed=1)
        before = {n: p.clone() for n, p in state.params.items()}
        ema_update(state, other, 1.0)
        assert all(torch.equal(before[n], p) for n, p in state.params.items())
        ema_update(state, other, 0.0)
        target = context_subset(nx.param_set(other))
        assert all(torch.equal(target[n], p) for n, p in state.params.items())
        assert state.step == 2

    def test_closed_form(self):
        state = teacher_init(small_backbone(), TC)
        theta = small_backbone(seed=5)
        d0 = {n: p.clone() for n, p in state.params.items()}
        for _ in range(100):
            ema_update(state, theta, 0.99)
        th = context_subset(nx.param_set(theta))
        for n, p in state.params.items():
            expect = 0.99**100 * d0[n] + (1 - 0.99**100) * th[n]
            assert (p - expect).abs().max().item() <= 1e-10

    def test_name_misalignment(self):
        state = teacher_init(small_backbone(), TC)
        params = dict(nx.param_set(small_backbone()))
        params.pop(next(n for n in params if n.startswith("context.")))
        with pytest.raises(ParamSetError):
            ema_update(state, params, 0.9)


class TestExtract:
    def test_top1_unnormalised_equals_student(self):
        bb = small_backbone()
        state = teacher_init(bb, TeacherConfig(top_k=1, normalize=False))
        h = torch.randn(11, 8, dtype=D64)
        assert torch.equal(extract_targets(state, h), bb.context_forward(bb.project_and_mask(h)).frames)

    def test_top1_normalised_is_layernormed_final(self):
        bb = small_backbone()
        state = teacher_init(bb, TeacherConfig(top_k=1))
        h = torch.randn(11, 8, dtype=D64)
        y = extract_targets(state, h)
        assert torch.allclose(y.mean(-1), torch.zeros(11, dtype=D64), atol=1e-12)
        assert torch.allclose(y.var(-1, unbiased=False), torch.ones(11, dtype=D64), atol=1e-3)

    def test_identical_layers_average(self):
        bb = small_backbone(num_layers=2)
        with torch.no_grad():
            blk = bb.context.layers[0]
            # zero residual branches make every block the identity
            for lin in (blk.out, blk.fc2):
                lin.weight.zero_()
                lin.bias.zero_()
            bb.context.layers[1] = copy.deepcopy(blk)
        state = teacher_init(bb, TeacherConfig(top_k=2))
        h = torch.randn(7, 8, dtype=D64)
        out = state.network(h)
        assert torch.equal(out.layer_outputs[0], out.layer_outputs[1])
        single = teacher_init(bb, TeacherConfig(top_k=1))
        assert torch.allclose(extract_targets(state, h), extract_targets(single, h), atol=1e-15)

    def test_deterministic(self):
        state = teacher_init(small_backbone(), TC)
        h = torch.randn(10, 8, dtype=D64)
        assert torch.equal(extract_targets(state, h), extract_targets(state, h))

    def test_stop_gradient(self):
        bb = small_backbone()
        state = teacher_init(bb, TC)
        head = Linear(16, 16).double()
        wave = torch.randn(4000, dtype=D64)
        h = bb.encode(wave)
        y = extract_targets(state, h)
        assert not y.requires_grad
        mask = torch.zeros(h.shape[0], dtype=torch.bool)
        mask[2:6] = True
        z = bb.context_forward(bb.project_and_mask(h, mask)).frames
        online_loss(z, y, mask, head).backward()
        assert all(p.grad is None for p in state.network.parameters())
        assert head.weight.grad is not None and bb.encoder.layers[0].kernel.grad is not None


class TestLoss:
    def test_zero_when_matching(self):
        z = torch.randn(6, 4, dtype=D64)
        mask = torch.tensor([0, 1, 1, 0, 0, 1], dtype=torch.bool)
        targets = torch.randn(6, 4, dtype=D64)
        targets[mask] = z[mask]
        assert online_loss(z, targets, mask, lambda x: x).item() == 0.0

    def test_empty_mask(self):
        z = torch.randn(6, 4, dtype=D64, requires_grad=True)
        loss = online_loss(z, torch.randn(6, 4, dtype=D64), torch.zeros(6, dtype=torch.bool), lambda x: x)
        loss.backward()
        assert loss.item() == 0.0 and torch.count_nonzero(z.grad) == 0

    def test_unmasked_targets_ignored(self):
        z = torch.randn(6, 4, dtype=D64)
        mask = torch.tensor([1, 0, 1, 0, 0, 1], dtype=torch.bool)
        t1 = torch.randn(6, 4, dtype=D64)
        t2 = t1.clone()
        t2[~mask] = torch.randn(3, 4, dtype=D64)
        assert online_loss(z, t1, mask, torch.tanh).item() == online_loss(z, t2, mask, torch.tanh).item()

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            online_loss(torch.randn(6, 4), torch.randn(5, 4), torch.ones(6, dtype=torch.bool), lambda x: x)
