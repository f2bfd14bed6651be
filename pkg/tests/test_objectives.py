"""Unit tests for the self-distillation objective, EMA teacher and centering."""

import itertools
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from hci_coda.models import FeatureExtractor
from hci_coda.objectives import (
    DistillConfig,
    DistillState,
    NoGlobalView,
    ProjectionHead,
    ShapeMismatch,
    center_update,
    distill_loss,
    distill_loss_cross_batch,
    ema_update,
    pair_loss,
)
from hci_coda.utils.hashing import parameter_hash
from hci_coda.views import ViewBatch, ViewSet


def _state(dtype=torch.float32, out_dim=16):
    torch.manual_seed(0)
    fe = FeatureExtractor(image_size=16, channels=3, patch_size=8, embed_dim=24, depth=1, num_heads=2)
    head = ProjectionHead(24, out_dim=out_dim, hidden_dim=32, bottleneck_dim=8)
    return DistillState(fe, head).to(dtype)


def _batch(n_global=2, n_local=2, batch=3, provenance=None):
    g = tuple(torch.rand(batch, 3, 16, 16) for _ in range(n_global))
    loc = tuple(torch.rand(batch, 3, 8, 8) for _ in range(n_local))
    return ViewBatch(g, loc, provenance or tuple((f"r{i}",) for i in range(batch)))


class TestDistillConfig:
    """Test cases for DistillConfig."""

    def test_defaults(self):
        config = DistillConfig()
        assert config.teacher_temp == 0.04
        assert config.student_temp == 0.1
        assert config.ema_decay == 0.996
        assert config.center_momentum == 0.9

    def test_teacher_sharper_than_student(self):
        with pytest.raises(ValueError, match="teacher_temp"):
            DistillConfig(teacher_temp=0.2, student_temp=0.1)

    def test_decay_range(self):
        with pytest.raises(ValueError, match="ema_decay"):
            DistillConfig(ema_decay=1.5)


class TestProjectionHead:
    """Test cases for ProjectionHead."""

    def test_output_shape(self):
        head = ProjectionHead(24, out_dim=16, hidden_dim=32, bottleneck_dim=8)
        assert head(torch.rand(5, 24)).shape == (5, 16)
        assert head.out_dim == 16

    def test_output_bounded_by_normalisation(self):
        head = ProjectionHead(24, out_dim=16, hidden_dim=32, bottleneck_dim=8)
        # unit bottleneck and unit weight rows bound every logit by 1
        assert head(100 * torch.randn(7, 24)).abs().max() <= 1.0 + 1e-5


class TestPairLoss:
    """Test cases for pair_loss."""

    def test_matches_explicit_enumeration(self):
        torch.manual_seed(0)
        teacher = [F.softmax(torch.randn(4, 6), dim=-1) for _ in range(2)]
        student = [F.log_softmax(torch.randn(4, 6), dim=-1) for _ in range(5)]
        terms = [
            torch.sum(-teacher[v] * student[u], dim=-1).mean()
            for v, u in itertools.product(range(2), range(5))
            if u != v
        ]
        assert len(terms) == 8
        expected = torch.stack(terms).mean()
        torch.testing.assert_close(pair_loss(teacher, student, [0, 1]), expected)

    def test_no_pairs(self):
        teacher = [F.softmax(torch.randn(2, 3), dim=-1)]
        student = [F.log_softmax(torch.randn(2, 3), dim=-1)]
        with pytest.raises(NoGlobalView):
            pair_loss(teacher, student, [0])


class TestDistillLoss:
    """Test cases for distill_loss and its cross-batch form."""

    def test_scalar_and_teacher_outputs(self):
        state = _state()
        loss, teacher_out = distill_loss(state, _batch(), return_teacher=True)
        assert loss.ndim == 0 and torch.isfinite(loss)
        assert teacher_out.shape == (2 * 3, 16)

    def test_single_viewset(self):
        state = _state()
        views = ViewSet(
            (torch.rand(3, 16, 16), torch.rand(3, 16, 16)), (torch.rand(3, 8, 8),), ("r",)
        )
        assert torch.isfinite(distill_loss(state, views))

    def test_gradient_reaches_student_only(self):
        state = _state()
        distill_loss(state, _batch()).backward()
        assert state.student_head.last_layer.weight.grad is not None
        assert all(p.grad is None for p in state.teacher_parameters())

    def test_needs_a_global_view(self):
        state = _state()
        with pytest.raises(NoGlobalView):
            distill_loss(state, _batch(n_global=0, n_local=3))
        with pytest.raises(NoGlobalView):
            distill_loss(state, _batch(n_global=1, n_local=0))

    def test_cross_batch_same_formula(self):
        state = _state()
        pairs = _batch(provenance=(("a", "b"), ("c", "d"), ("e", "f")))
        torch.testing.assert_close(distill_loss_cross_batch(state, pairs), distill_loss(state, pairs))

    def test_cross_batch_needs_pairs(self):
        state = _state()
        with pytest.raises(ValueError, match="exactly two"):
            distill_loss_cross_batch(state, _batch())
        with pytest.raises(ValueError, match="same number of views"):
            distill_loss_cross_batch(state, _batch(n_global=1, provenance=(("a", "b"),) * 3))


def _perturbed_state(config=None):
    """float64 state whose student has drifted from the teacher and whose center is non-zero."""
    state = _state(torch.float64)
    if config is not None:
        state.config = config
    gen = torch.Generator().manual_seed(1)
    with torch.no_grad():
        for p in state.student_parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
        state.center.copy_(0.3 * torch.randn(state.center.shape, generator=gen, dtype=torch.float64))
    return state.eval()


def _softmax(x):
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


class TestDistillLossNumerics:
    """Value and gradient checks of distill_loss in float64."""

    def test_matches_enumerated_cross_entropies(self):
        config = DistillConfig(teacher_temp=0.07, student_temp=0.2)
        state = _perturbed_state(config)
        batch = _batch().to("cpu", torch.float64)
        with torch.no_grad():
            teacher = [state.teacher(v).numpy() for v in batch.global_views]
            student = [state.student(v).numpy() for v in batch.views]
            loss, teacher_out = distill_loss(state, batch, return_teacher=True)
        center = state.center.numpy()

        terms = []
        for v, t in enumerate(teacher):
            p = _softmax((t - center) / 0.07)
            for u, s in enumerate(student):
                if u == v:
                    continue
                log_q = np.log(_softmax(s / 0.2))
                terms.extend(-np.sum(p[b] * log_q[b]) for b in range(len(p)))
        assert len(terms) == 2 * 3 * 3
        assert abs(loss.item() - float(np.mean(terms))) < 1e-10
        # raw teacher outputs, before centering
        np.testing.assert_allclose(teacher_out.numpy(), np.concatenate(teacher), atol=1e-12)

    def test_centering_changes_the_targets(self):
        state = _perturbed_state()
        batch = _batch().to("cpu", torch.float64)
        with torch.no_grad():
            centred = distill_loss(state, batch).item()
            state.center.zero_()
            plain = distill_loss(state, batch).item()
        assert abs(centred - plain) > 1e-6

    def test_student_gradient_matches_central_differences(self):
        state = _perturbed_state()
        batch = _batch().to("cpu", torch.float64)
        params = [p for p in state.student_parameters() if p.requires_grad]
        distill_loss(state, batch).backward()
        analytic = [p.grad.detach().clone() for p in params]

        gen = torch.Generator().manual_seed(2)
        per_tensor = math.ceil(128 / len(params))
        coords = [
            (i, int(j))
            for i, p in enumerate(params)
            for j in torch.randperm(p.numel(), generator=gen)[:per_tensor]
        ]
        assert len(coords) >= 100

        h = 1e-6
        numeric, expected = [], []
        with torch.no_grad():
            for i, j in coords:
                flat = params[i].data.view(-1)
                original = flat[j].item()
                flat[j] = original + h
                up = distill_loss(state, batch).item()
                flat[j] = original - h
                down = distill_loss(state, batch).item()
                flat[j] = original
                numeric.append((up - down) / (2 * h))
                expected.append(analytic[i].view(-1)[j].item())
        numeric_t = torch.tensor(numeric, dtype=torch.float64)
        expected_t = torch.tensor(expected, dtype=torch.float64)
        assert expected_t.abs().max() > 1e-4
        assert (numeric_t - expected_t).norm() <= 1e-3 * expected_t.norm()
        torch.testing.assert_close(numeric_t, expected_t, rtol=1e-3, atol=1e-7)


class TestTeacherUpdates:
    """Test cases for EMA and center updates."""

    def test_teacher_starts_as_a_frozen_copy(self):
        state = _state()
        assert parameter_hash(dict(state.student_backbone.named_parameters())) == parameter_hash(
            dict(state.teacher_backbone.named_parameters())
        )
        assert not any(p.requires_grad for p in state.teacher_parameters())

    def test_ema_is_exact(self):
        state = _state(torch.float64)
        with torch.no_grad():
            for p in state.student_parameters():
                p.add_(torch.randn_like(p))
        teacher = [t.clone() for t in state.teacher_parameters()]
        student = [s.clone() for s in state.student_parameters()]
        ema_update(state)
        for new, t, s in zip(state.teacher_parameters(), teacher, student):
            assert torch.max(torch.abs(new - (0.996 * t + 0.004 * s))) < 1e-12

    def test_ema_decay_one_keeps_teacher(self):
        state = _state()
        with torch.no_grad():
            for p in state.student_parameters():
                p.add_(1.0)
        before = parameter_hash(dict(state.teacher_backbone.named_parameters()))
        ema_update(state, decay=1.0)
        assert parameter_hash(dict(state.teacher_backbone.named_parameters())) == before

    def test_ema_shape_mismatch(self):
        state = _state()
        state.teacher_head = ProjectionHead(24, out_dim=8, hidden_dim=32, bottleneck_dim=8)
        with pytest.raises(ShapeMismatch):
            ema_update(state)

    def test_center_update(self):
        state = _state(torch.float64)
        out = torch.arange(32, dtype=torch.float64).reshape(2, 16)
        center_update(state, out)
        torch.testing.assert_close(state.center, 0.1 * out.mean(dim=0, keepdim=True))
        center_update(state, out, momentum=0.5)
        torch.testing.assert_close(state.center, (0.5 * 0.1 + 0.5) * out.mean(dim=0, keepdim=True))

    def test_reset_teacher(self):
        state = _state()
        with torch.no_grad():
            for p in state.student_parameters():
                p.mul_(2.0)
        state.reset_teacher()
        for t, s in zip(state.teacher_parameters(), state.student_parameters()):
            assert torch.equal(t, s)
