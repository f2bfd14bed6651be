"""The dual model: patch-transformer feature extractor + token classifier.

Also holds the masked-autoencoder head used by the MAE/TTT baselines, the
standalone supervised transformer, and checkpoint IO.

Transformer blocks and position-embedding resampling come from ``timm``.
"""

from __future__ import annotations

import json
from collections.abc import Mapping
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Literal

import structlog
import torch
from timm.layers import resample_abs_pos_embed, trunc_normal_
from timm.models.vision_transformer import Block
from torch import nn

from .exceptions import CodaError

logger = structlog.get_logger()

Phase = Literal["pretrain", "head", "adapt"]
PHASES: tuple[Phase, ...] = ("pretrain", "head", "adapt")

CHECKPOINT_FORMAT = 1

__all__ = [
    "PHASES",
    "DualModel",
    "FeatureExtractor",
    "MAEHead",
    "MissingCheckpoint",
    "ModelConfig",
    "ShapeError",
    "StandaloneClassifier",
    "TokenClassifier",
    "build_dual_model",
    "classify",
    "fe_forward",
    "load_checkpoint",
    "mae_forward",
    "save_checkpoint",
    "set_phase",
]


class ModelError(CodaError):
    """Base class for model errors."""


class ShapeError(ModelError, ValueError):
    """Raised when an input does not fit the model's geometry."""


class MissingCheckpoint(ModelError, FileNotFoundError):
    """Raised when a checkpoint file does not exist."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture dimensions.

    Defaults are the desk-scale model. The ``paper-scale`` preset sets
    patch 16, dim 384, depth 12, heads 6 (DeiT-S).
    """

    image_size: int = 64
    channels: int = 3
    patch_size: int = 8
    embed_dim: int = 192
    depth: int = 6
    num_heads: int = 3
    mlp_ratio: float = 4.0
    classifier_dim: int = 192
    classifier_depth: int = 2
    classifier_heads: int = 3
    projection_dim: int = 256
    projection_hidden: int = 512
    projection_bottleneck: int = 128
    mask_ratio: float = 0.75
    norm_pix_loss: bool = True
    decoder_dim: int = 128
    decoder_depth: int = 2
    decoder_heads: int = 4
    pretrained: str | None = None

    def __post_init__(self) -> None:
        if self.image_size % self.patch_size:
            raise ValueError("image_size: must be divisible by patch_size")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim: must be divisible by num_heads")
        if self.classifier_dim % self.classifier_heads:
            raise ValueError("classifier_dim: must be divisible by classifier_heads")
        if self.decoder_dim % self.decoder_heads:
            raise ValueError("decoder_dim: must be divisible by decoder_heads")
        if not 0 <= self.mask_ratio < 1:
            raise ValueError("mask_ratio: must be in [0, 1)")


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


# ---------------------------------------------------------------------------
# Feature extractor
# ---------------------------------------------------------------------------


class FeatureExtractor(nn.Module):
    """ViT encoder returning the full token sequence ``(B, 1 + N, d)``.

    Position embeddings are learned for ``image_size`` and resampled
    (bicubic) for other input sizes, e.g. local crops.
    """

    def __init__(
        self,
        image_size: int = 64,
        channels: int = 3,
        patch_size: int = 8,
        embed_dim: int = 192,
        depth: int = 6,
        num_heads: int = 3,
        mlp_ratio: float = 4.0,
    ) -> None:
        super().__init__()
        self.image_size = image_size
        self.channels = channels
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.grid = image_size // patch_size
        self.patch_embed = nn.Conv2d(channels, embed_dim, kernel_size=patch_size, stride=patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + self.grid**2, embed_dim))
        self.blocks = nn.ModuleList(
            Block(embed_dim, num_heads, mlp_ratio=mlp_ratio, qkv_bias=True) for _ in range(depth)
        )
        self.norm = nn.LayerNorm(embed_dim)

        trunc_normal_(self.pos_embed, std=0.02)
        trunc_normal_(self.cls_token, std=0.02)
        self.apply(_init_weights)

    @property
    def depth(self) -> int:
        return len(self.blocks)

    @property
    def num_patches(self) -> int:
        return self.grid**2

    def _pos_embed_for(self, grid_h: int, grid_w: int) -> torch.Tensor:
        if (grid_h, grid_w) == (self.grid, self.grid):
            return self.pos_embed
        return resample_abs_pos_embed(
            self.pos_embed,
            new_size=[grid_h, grid_w],
            old_size=[self.grid, self.grid],
            num_prefix_tokens=1,
        )

    def patchify_embed(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Patch tokens ``(B, N, d)`` with position embeddings added, plus the CLS token."""
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(
                f"expected (B, {self.channels}, H, W) input, got {tuple(x.shape)}"
            )
        h, w = x.shape[-2:]
        if h % self.patch_size or w % self.patch_size:
            raise ShapeError(
                f"input size {h}x{w} is not divisible by patch size {self.patch_size}"
            )
        pos = self._pos_embed_for(h // self.patch_size, w // self.patch_size)
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2) + pos[:, 1:]
        cls = (self.cls_token + pos[:, :1]).expand(x.shape[0], -1, -1)
        return tokens, cls

    def forward_layers(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Token sequence after every block (the last one normalised)."""
        tokens, cls = self.patchify_embed(x)
        h = torch.cat([cls, tokens], dim=1)
        outputs = []
        for i, block in enumerate(self.blocks):
            h = block(h)
            outputs.append(self.norm(h) if i == len(self.blocks) - 1 else h)
        return outputs

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        tokens, cls = self.patchify_embed(x)
        h = torch.cat([cls, tokens], dim=1)
        for block in self.blocks:
            h = block(h)
        return self.norm(h)

    def forward_visible(self, x: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
        """Encode only the patches indexed by *keep* ``(B, n_keep)``; CLS is prepended."""
        tokens, cls = self.patchify_embed(x)
        index = keep.unsqueeze(-1).expand(-1, -1, tokens.shape[-1])
        h = torch.cat([cls, torch.gather(tokens, 1, index)], dim=1)
        for block in self.blocks:
            h = block(h)
        return self.norm(h)


def fe_forward(fe: FeatureExtractor, image: torch.Tensor) -> torch.Tensor:
    """Tokens ``(N + 1, d)`` for one ``(C, H, W)`` image, or ``(B, N + 1, d)`` for a batch."""
    if image.ndim == 3:
        return fe(image.unsqueeze(0))[0]
    return fe(image)


# ---------------------------------------------------------------------------
# Classifier and dual model
# ---------------------------------------------------------------------------


class TokenClassifier(nn.Module):
    """Transformer classifier over feature-extractor tokens.

    A token-wise linear adapter replaces the patch embedding; the CLS
    position of the last block feeds the linear head.
    """

    def __init__(
        self,
        in_dim: int,
        num_classes: int,
        dim: int = 192,
        depth: int = 2,
        num_heads: int = 3,
        mlp_ratio: float = 4.0,
    ) -> None:
        super().__init__()
        self.adapter = nn.Linear(in_dim, dim)
        self.blocks = nn.Sequential(
            *(Block(dim, num_heads, mlp_ratio=mlp_ratio, qkv_bias=True) for _ in range(depth))
        )
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, num_classes)
        self.num_classes = num_classes
        self.apply(_init_weights)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        h = self.norm(self.blocks(self.adapter(tokens)))
        return self.head(h[:, 0])


class DualModel(nn.Module):
    """Feature extractor + token classifier with a per-phase frozen partition."""

    def __init__(self, feature_extractor: FeatureExtractor, classifier: TokenClassifier) -> None:
        super().__init__()
        self.feature_extractor = feature_extractor
        self.classifier = classifier
        self.phase: Phase = "pretrain"
        set_phase(self, "pretrain")

    @property
    def frozen_mask(self) -> dict[str, bool]:
        """Partition name → ``True`` when frozen."""
        return {
            "feature_extractor": not any(
                p.requires_grad for p in self.feature_extractor.parameters()
            ),
            "classifier": not any(p.requires_grad for p in self.classifier.parameters()),
        }

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.feature_extractor(x))

    def train(self, mode: bool = True) -> DualModel:
        super().train(mode)
        # Frozen partitions always run in inference mode.
        for part in (self.feature_extractor, self.classifier):
            if not any(p.requires_grad for p in part.parameters()):
                part.eval()
        return self


def set_phase(dual: DualModel, phase: Phase) -> dict[str, bool]:
    """Apply the trainable partition of *phase* and return the frozen mask.

    ``pretrain`` and ``adapt`` train the feature extractor only; ``head``
    trains the classifier only.
    """
    if phase not in PHASES:
        raise ValueError(f"Invalid phase '{phase}'. Must be one of: {', '.join(PHASES)}")
    train_fe = phase in ("pretrain", "adapt")
    dual.feature_extractor.requires_grad_(train_fe)
    dual.classifier.requires_grad_(not train_fe)
    dual.phase = phase
    return dual.frozen_mask


def classify(dual: DualModel, image: torch.Tensor) -> torch.Tensor:
    """Logits ``(K,)`` for one image or ``(B, K)`` for a batch."""
    if image.ndim == 3:
        return dual(image.unsqueeze(0))[0]
    return dual(image)


def build_feature_extractor(config: ModelConfig) -> FeatureExtractor:
    fe = FeatureExtractor(
        image_size=config.image_size,
        channels=config.channels,
        patch_size=config.patch_size,
        embed_dim=config.embed_dim,
        depth=config.depth,
        num_heads=config.num_heads,
        mlp_ratio=config.mlp_ratio,
    )
    if config.pretrained:
        _load_external_weights(fe, config.pretrained)
    return fe


def build_dual_model(
    config: ModelConfig, num_classes: int, feature_extractor: FeatureExtractor | None = None
) -> DualModel:
    fe = feature_extractor or build_feature_extractor(config)
    classifier = TokenClassifier(
        in_dim=config.embed_dim,
        num_classes=num_classes,
        dim=config.classifier_dim,
        depth=config.classifier_depth,
        num_heads=config.classifier_heads,
        mlp_ratio=config.mlp_ratio,
    )
    return DualModel(fe, classifier)


def _load_external_weights(fe: FeatureExtractor, path: str) -> None:
    """Load a compatible state dict (e.g. converted ImageNet weights) into *fe*."""
    source = Path(path)
    if not source.is_file():
        raise MissingCheckpoint(f"Pretrained weights not found: {source}")
    state = torch.load(source, map_location="cpu", weights_only=True)
    state = state.get("state_dict", state)
    if "pos_embed" in state and state["pos_embed"].shape != fe.pos_embed.shape:
        old = int((state["pos_embed"].shape[1] - 1) ** 0.5)
        state["pos_embed"] = resample_abs_pos_embed(
            state["pos_embed"], new_size=[fe.grid, fe.grid], old_size=[old, old]
        )
    missing, unexpected = fe.load_state_dict(state, strict=False)
    logger.info(
        "external weights loaded",
        path=str(source),
        missing=len(missing),
        unexpected=len(unexpected),
    )


# ---------------------------------------------------------------------------
# Supervised baseline
# ---------------------------------------------------------------------------


class StandaloneClassifier(nn.Module):
    """Plain ViT with a linear head on the CLS token, trained end to end."""

    def __init__(self, feature_extractor: FeatureExtractor, num_classes: int) -> None:
        super().__init__()
        self.feature_extractor = feature_extractor
        self.head = nn.Linear(feature_extractor.embed_dim, num_classes)
        self.num_classes = num_classes
        _init_weights(self.head)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.feature_extractor(x)[:, 0])


# ---------------------------------------------------------------------------
# Masked autoencoder
# ---------------------------------------------------------------------------


class MAEHead(nn.Module):
    """Lightweight MAE decoder over a :class:`FeatureExtractor`'s visible tokens."""

    def __init__(
        self,
        fe: FeatureExtractor,
        mask_ratio: float = 0.75,
        decoder_dim: int = 128,
        decoder_depth: int = 2,
        decoder_heads: int = 4,
        norm_pix_loss: bool = True,
    ) -> None:
        super().__init__()
        self.mask_ratio = mask_ratio
        self.norm_pix_loss = norm_pix_loss
        self.patch_size = fe.patch_size
        self.channels = fe.channels
        self.num_patches = fe.num_patches
        self.decoder_embed = nn.Linear(fe.embed_dim, decoder_dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, decoder_dim))
        self.decoder_pos_embed = nn.Parameter(torch.zeros(1, 1 + fe.num_patches, decoder_dim))
        self.decoder_blocks = nn.Sequential(
            *(Block(decoder_dim, decoder_heads, qkv_bias=True) for _ in range(decoder_depth))
        )
        self.decoder_norm = nn.LayerNorm(decoder_dim)
        self.decoder_pred = nn.Linear(decoder_dim, fe.patch_size**2 * fe.channels)
        trunc_normal_(self.mask_token, std=0.02)
        trunc_normal_(self.decoder_pos_embed, std=0.02)
        self.apply(_init_weights)

    @property
    def masked_count(self) -> int:
        return int(round(self.mask_ratio * self.num_patches))

    def random_mask(
        self, batch: int, generator: torch.Generator | None = None, device: torch.device | None = None
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Per-sample random masking.

        Returns:
            ``keep`` indices ``(B, n_keep)``, ``restore`` permutation
            ``(B, N)`` and boolean ``mask`` ``(B, N)`` (True = masked).
        """
        n = self.num_patches
        noise = torch.rand(batch, n, generator=generator, device=device)
        shuffle = torch.argsort(noise, dim=1)
        restore = torch.argsort(shuffle, dim=1)
        keep = shuffle[:, : n - self.masked_count]
        mask = torch.ones(batch, n, dtype=torch.bool, device=device)
        mask[:, : n - self.masked_count] = False
        mask = torch.gather(mask, 1, restore)
        return keep, restore, mask

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """``(B, C, H, W)`` → ``(B, N, p*p*C)``."""
        b, c, h, w = images.shape
        p = self.patch_size
        x = images.reshape(b, c, h // p, p, w // p, p)
        x = torch.einsum("bchpwq->bhwpqc", x)
        return x.reshape(b, (h // p) * (w // p), p * p * c)

    def targets(self, images: torch.Tensor) -> torch.Tensor:
        target = self.patchify(images)
        if self.norm_pix_loss:
            mean = target.mean(dim=-1, keepdim=True)
            var = target.var(dim=-1, keepdim=True)
            target = (target - mean) / (var + 1e-6) ** 0.5
        return target

    def decode(self, latent: torch.Tensor, restore: torch.Tensor) -> torch.Tensor:
        """Predict every patch from the encoded visible tokens."""
        x = self.decoder_embed(latent)
        b, n_vis = x.shape[0], x.shape[1] - 1
        fill = self.mask_token.expand(b, self.num_patches - n_vis, -1)
        patches = torch.cat([x[:, 1:], fill], dim=1)
        patches = torch.gather(patches, 1, restore.unsqueeze(-1).expand(-1, -1, x.shape[-1]))
        x = torch.cat([x[:, :1], patches], dim=1) + self.decoder_pos_embed
        x = self.decoder_norm(self.decoder_blocks(x))
        return self.decoder_pred(x)[:, 1:]

    def loss(self, images: torch.Tensor, pred: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Mean squared error over masked patches only."""
        per_patch = ((pred - self.targets(images)) ** 2).mean(dim=-1)
        weights = mask.to(per_patch.dtype)
        if weights.sum() == 0:
            return pred.sum() * 0.0
        return (per_patch * weights).sum() / weights.sum()


def mae_forward(
    fe: FeatureExtractor,
    head: MAEHead,
    images: torch.Tensor,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Masked reconstruction loss and the mask ``(B, N)`` (True = masked)."""
    if images.ndim == 3:
        images = images.unsqueeze(0)
    if images.shape[-1] != fe.image_size or images.shape[-2] != fe.image_size:
        raise ShapeError(
            f"MAE expects {fe.image_size}x{fe.image_size} inputs, got {tuple(images.shape[-2:])}"
        )
    keep, restore, mask = head.random_mask(images.shape[0], generator, images.device)
    latent = fe.forward_visible(images, keep)
    pred = head.decode(latent, restore)
    return head.loss(images, pred, mask), mask


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(
    path: str | Path,
    modules: Mapping[str, nn.Module | torch.Tensor],
    header: Mapping[str, Any],
) -> Path:
    """Write named modules/tensors and a JSON header into one file.

    The header always carries ``format`` and is stored as JSON text so it
    can be read back without unpickling model code.
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tensors: dict[str, dict[str, torch.Tensor]] = {}
    for name, value in modules.items():
        if isinstance(value, nn.Module):
            tensors[name] = {k: v.detach().cpu().clone() for k, v in value.state_dict().items()}
        else:
            tensors[name] = {"": value.detach().cpu().clone()}
    payload = {
        "header": json.dumps({"format": CHECKPOINT_FORMAT, **header}, sort_keys=True, default=str),
        "tensors": tensors,
    }
    torch.save(payload, target)
    return target


def load_checkpoint(path: str | Path) -> tuple[dict[str, Any], dict[str, dict[str, torch.Tensor]]]:
    """Inverse of :func:`save_checkpoint`: ``(header, tensors by module name)``.

    Raises:
        MissingCheckpoint: *path* does not exist.
    """
    source = Path(path)
    if not source.is_file():
        raise MissingCheckpoint(f"Checkpoint not found: {source}")
    payload = torch.load(source, map_location="cpu", weights_only=True)
    return json.loads(payload["header"]), payload["tensors"]


def model_header(config: ModelConfig, **extra: Any) -> dict[str, Any]:
    return {"architecture": asdict(config), **extra}
