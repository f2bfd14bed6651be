"""Unit tests for the feature extractor, classifier, dual model, MAE head and checkpoints."""

import pytest
import torch

from hci_coda.models import (
    DualModel,
    FeatureExtractor,
    MAEHead,
    MissingCheckpoint,
    ModelConfig,
    ShapeError,
    StandaloneClassifier,
    TokenClassifier,
    build_dual_model,
    build_feature_extractor,
    classify,
    fe_forward,
    load_checkpoint,
    mae_forward,
    model_header,
    save_checkpoint,
    set_phase,
)
from hci_coda.utils.hashing import parameter_hash


@pytest.fixture
def fe(tiny_model_config):
    torch.manual_seed(0)
    return build_feature_extractor(tiny_model_config)


class TestModelConfig:
    """Test cases for ModelConfig validation."""

    def test_patch_divides_image(self):
        with pytest.raises(ValueError, match="divisible by patch_size"):
            ModelConfig(image_size=20, patch_size=8)

    def test_heads_divide_dim(self):
        with pytest.raises(ValueError, match="embed_dim"):
            ModelConfig(embed_dim=100, num_heads=3)

    def test_mask_ratio(self):
        with pytest.raises(ValueError, match="mask_ratio"):
            ModelConfig(mask_ratio=1.0)


class TestFeatureExtractor:
    """Test cases for FeatureExtractor."""

    def test_token_sequence(self, fe):
        out = fe(torch.rand(2, 3, 16, 16))
        assert out.shape == (2, 1 + fe.num_patches, 24)
        assert fe.num_patches == 4

    def test_other_input_sizes_resample_positions(self, fe):
        assert fe(torch.rand(2, 3, 8, 8)).shape == (2, 2, 24)
        assert fe(torch.rand(1, 3, 24, 24)).shape == (1, 10, 24)

    def test_wrong_channel_count(self, fe):
        with pytest.raises(ShapeError, match="expected"):
            fe(torch.rand(1, 4, 16, 16))

    def test_size_not_divisible(self, fe):
        with pytest.raises(ShapeError, match="not divisible"):
            fe(torch.rand(1, 3, 12, 12))

    def test_layers_end_with_forward(self, fe):
        fe.eval()
        x = torch.rand(2, 3, 16, 16)
        layers = fe.forward_layers(x)
        assert len(layers) == fe.depth == 2
        torch.testing.assert_close(layers[-1], fe(x))

    def test_fe_forward_single_image(self, fe):
        fe.eval()
        images = torch.rand(2, 3, 16, 16)
        single = fe_forward(fe, images[1])
        assert single.shape == (5, 24)
        torch.testing.assert_close(single, fe_forward(fe, images)[1])

    def test_forward_visible_keeps_cls(self, fe):
        keep = torch.tensor([[0, 2], [1, 3]])
        assert fe.forward_visible(torch.rand(2, 3, 16, 16), keep).shape == (2, 3, 24)

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(0)
        small = FeatureExtractor(image_size=8, channels=1, patch_size=4, embed_dim=8, depth=1, num_heads=2)
        small = small.double().eval()
        x = torch.rand(1, 1, 8, 8, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(lambda t: small(t)[:, 0], (x,), eps=1e-6, atol=1e-5)


class TestDualModel:
    """Test cases for DualModel and its phases."""

    def test_phase_partitions(self, fe):
        dual = DualModel(fe, TokenClassifier(24, 3, dim=24, depth=1, num_heads=2))
        assert set_phase(dual, "pretrain") == {"feature_extractor": False, "classifier": True}
        assert set_phase(dual, "head") == {"feature_extractor": True, "classifier": False}
        assert set_phase(dual, "adapt") == {"feature_extractor": False, "classifier": True}
        assert dual.phase == "adapt"

    def test_invalid_phase(self, fe):
        dual = DualModel(fe, TokenClassifier(24, 3, dim=24, depth=1, num_heads=2))
        with pytest.raises(ValueError, match="Invalid phase"):
            set_phase(dual, "finetune")

    def test_frozen_partition_stays_in_eval_mode(self, fe):
        dual = DualModel(fe, TokenClassifier(24, 3, dim=24, depth=1, num_heads=2))
        set_phase(dual, "head")
        dual.train()
        assert not dual.feature_extractor.training
        assert dual.classifier.training

    def test_classify_shapes(self, tiny_model_config, fe):
        dual = build_dual_model(tiny_model_config, 5, feature_extractor=fe)
        assert dual.feature_extractor is fe
        assert classify(dual, torch.rand(3, 16, 16)).shape == (5,)
        assert classify(dual, torch.rand(2, 3, 16, 16)).shape == (2, 5)

    def test_frozen_extractor_gets_no_gradient(self, tiny_model_config, fe):
        dual = build_dual_model(tiny_model_config, 2, feature_extractor=fe)
        set_phase(dual, "head")
        before = parameter_hash(dual.feature_extractor)
        optimizer = torch.optim.SGD(dual.trainable_parameters(), lr=0.1)
        loss = dual(torch.rand(4, 3, 16, 16)).sum()
        loss.backward()
        optimizer.step()
        assert all(p.grad is None for p in dual.feature_extractor.parameters())
        assert parameter_hash(dual.feature_extractor) == before

    def test_standalone_classifier(self, fe):
        model = StandaloneClassifier(fe, 4)
        assert model(torch.rand(2, 3, 16, 16)).shape == (2, 4)


class TestMAEHead:
    """Test cases for the masked autoencoder decoder."""

    @pytest.fixture
    def head(self, fe, tiny_model_config):
        return MAEHead(
            fe,
            mask_ratio=0.75,
            decoder_dim=tiny_model_config.decoder_dim,
            decoder_depth=1,
            decoder_heads=2,
        )

    def test_mask(self, head):
        keep, restore, mask = head.random_mask(5, torch.Generator().manual_seed(0))
        assert head.masked_count == 3
        assert keep.shape == (5, 1)
        assert restore.shape == mask.shape == (5, 4)
        assert mask.sum(dim=1).tolist() == [3] * 5
        # the kept patch is never masked
        assert not mask.gather(1, keep).any()

    def test_patchify(self, head):
        assert head.patchify(torch.rand(2, 3, 16, 16)).shape == (2, 4, 8 * 8 * 3)

    def test_normalised_targets(self, head):
        targets = head.targets(torch.rand(2, 3, 16, 16))
        torch.testing.assert_close(targets.mean(dim=-1), torch.zeros(2, 4), atol=1e-5, rtol=0)

    def test_forward_loss(self, fe, head):
        loss, mask = mae_forward(fe, head, torch.rand(2, 3, 16, 16), torch.Generator().manual_seed(1))
        assert loss.ndim == 0 and torch.isfinite(loss)
        assert mask.shape == (2, 4)
        loss.backward()
        assert fe.patch_embed.weight.grad is not None

    def test_same_generator_same_loss(self, fe, head):
        images = torch.rand(2, 3, 16, 16)
        a, _ = mae_forward(fe, head, images, torch.Generator().manual_seed(3))
        b, _ = mae_forward(fe, head, images, torch.Generator().manual_seed(3))
        assert a.item() == b.item()

    def test_wrong_size(self, fe, head):
        with pytest.raises(ShapeError, match="MAE expects 16x16"):
            mae_forward(fe, head, torch.rand(1, 3, 8, 8))


class TestCheckpoints:
    """Test cases for save_checkpoint and load_checkpoint."""

    def test_round_trip(self, tmp_path, tiny_model_config, fe):
        center = torch.arange(4.0).reshape(1, 4)
        path = save_checkpoint(
            tmp_path / "ckpt" / "model.pt",
            {"feature_extractor": fe, "center": center},
            model_header(tiny_model_config, phase="pretrain"),
        )
        header, tensors = load_checkpoint(path)
        assert header["format"] == 1
        assert header["phase"] == "pretrain"
        assert header["architecture"]["embed_dim"] == 24
        assert torch.equal(tensors["center"][""], center)
        clone = build_feature_extractor(tiny_model_config)
        clone.load_state_dict(tensors["feature_extractor"])
        assert parameter_hash(clone) == parameter_hash(fe)

    def test_missing(self, tmp_path):
        with pytest.raises(MissingCheckpoint, match="Checkpoint not found"):
            load_checkpoint(tmp_path / "none.pt")

    def test_missing_external_weights(self, tmp_path):
        config = ModelConfig(image_size=16, embed_dim=24, num_heads=2, depth=1, pretrained=str(tmp_path / "w.pt"))
        with pytest.raises(MissingCheckpoint, match="Pretrained weights not found"):
            build_feature_extractor(config)
