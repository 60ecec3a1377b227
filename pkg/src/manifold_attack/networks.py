"""Model zoo: attention-mask generator, two-headed discriminator, FR embedders.

All nets are deliberately small so a full training run fits a single CPU core.
Widths live in config; shapes and output contracts are fixed here.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointLoadError, DegenerateEmbedding, ShapeMismatch

CHECKPOINT_VERSION = 1


def compose_attention(color: torch.Tensor, attn: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    """Blend a color map into an image through an attention mask.

    output = attn * color + (1 - attn) * image, elementwise, with the
    single-channel mask broadcast across color channels.
    """
    if color.shape != image.shape:
        raise ShapeMismatch(f"color {tuple(color.shape)} vs image {tuple(image.shape)}")
    if attn.shape[-2:] != image.shape[-2:] or attn.shape[-3] != 1:
        raise ShapeMismatch(f"attention {tuple(attn.shape)} incompatible with {tuple(image.shape)}")
    return attn * color + (1.0 - attn) * image


def _broadcast_au(au: torch.Tensor, h: int, w: int) -> torch.Tensor:
    return au.view(au.shape[0], au.shape[1], 1, 1).expand(-1, -1, h, w)


class _ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.c1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.n1 = nn.InstanceNorm2d(ch, affine=True)
        self.c2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.n2 = nn.InstanceNorm2d(ch, affine=True)

    def forward(self, x):
        h = F.relu(self.n1(self.c1(x)))
        return x + self.n2(self.c2(h))


class GeneratorModel(nn.Module):
    """AU-conditioned image-to-image net with color and attention heads.

    The AU code is broadcast-concatenated to the input channels; the decoder
    emits a color map (sigmoid, [0,1]) and an attention mask (sigmoid, [0,1]),
    composed with the input so an all-zero mask reproduces it exactly.
    """

    def __init__(self, au_dim: int, in_hw=(64, 64), width: int = 10, res_blocks: int = 2):
        super().__init__()
        h, w = in_hw
        if h % 4 or w % 4:
            raise ShapeMismatch(f"input size {in_hw} must be divisible by 4")
        self.au_dim = au_dim
        self.in_hw = (int(h), int(w))
        self.width = width
        self.res_blocks = res_blocks
        self.enc = nn.Sequential(
            nn.Conv2d(3 + au_dim, width, 3, padding=1),
            nn.InstanceNorm2d(width, affine=True),
            nn.ReLU(inplace=True),
        )
        self.down1 = nn.Sequential(
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1),
            nn.InstanceNorm2d(2 * width, affine=True),
            nn.ReLU(inplace=True),
        )
        self.down2 = nn.Sequential(
            nn.Conv2d(2 * width, 4 * width, 4, stride=2, padding=1),
            nn.InstanceNorm2d(4 * width, affine=True),
            nn.ReLU(inplace=True),
        )
        self.body = nn.Sequential(*[_ResBlock(4 * width) for _ in range(res_blocks)])
        self.up1 = nn.Sequential(
            nn.ConvTranspose2d(4 * width, 2 * width, 4, stride=2, padding=1),
            nn.InstanceNorm2d(2 * width, affine=True),
            nn.ReLU(inplace=True),
        )
        self.up2 = nn.Sequential(
            nn.ConvTranspose2d(2 * width, width, 4, stride=2, padding=1),
            nn.InstanceNorm2d(width, affine=True),
            nn.ReLU(inplace=True),
        )
        # heads see decoder context and full-resolution encoder features so
        # edits can be placed with pixel precision instead of upsampled blur
        self.color_head = nn.Conv2d(2 * width, 3, 3, padding=1)
        self.attn_head = nn.Conv2d(2 * width, 1, 3, padding=1)

    def arch(self) -> dict:
        return {
            "kind": "generator",
            "au_dim": self.au_dim,
            "in_hw": list(self.in_hw),
            "width": self.width,
            "res_blocks": self.res_blocks,
        }

    def set_attention_bias(self, value: float) -> None:
        with torch.no_grad():
            self.attn_head.bias.fill_(value)

    def forward(self, image: torch.Tensor, au: torch.Tensor):
        if image.dim() != 4 or image.shape[1] != 3 or tuple(image.shape[2:]) != self.in_hw:
            raise ShapeMismatch(
                f"expected (B, 3, {self.in_hw[0]}, {self.in_hw[1]}) input, got {tuple(image.shape)}"
            )
        if au.dim() != 2 or au.shape[1] != self.au_dim or au.shape[0] != image.shape[0]:
            raise ShapeMismatch(
                f"expected ({image.shape[0]}, {self.au_dim}) AU batch, got {tuple(au.shape)}"
            )
        x = torch.cat([image, _broadcast_au(au, *self.in_hw)], dim=1)
        skip = self.enc(x)
        h = self.down2(self.down1(skip))
        h = self.body(h)
        h = torch.cat([self.up2(self.up1(h)), skip], dim=1)
        color = torch.sigmoid(self.color_head(h))
        attn = torch.sigmoid(self.attn_head(h))
        return compose_attention(color, attn, image), color, attn


def make_editor(au_dim: int, scope: str, image_size: int, crop_sizes: dict, width: int = 10) -> GeneratorModel:
    """Editor factory: 'global' edits full frames, region names edit their crops."""
    if scope == "global":
        hw = (image_size, image_size)
    elif scope in crop_sizes:
        hw = crop_sizes[scope]
    else:
        raise ShapeMismatch(f"unknown editor scope {scope!r}")
    return GeneratorModel(au_dim, hw, width=width)


class DiscriminatorModel(nn.Module):
    """Shared conv trunk with a scalar critic head and an AU regression head."""

    def __init__(self, au_dim: int, in_hw=(64, 64), width: int = 16):
        super().__init__()
        h, w = in_hw
        self.au_dim = au_dim
        self.in_hw = (int(h), int(w))
        self.width = width
        levels = max(1, int(math.log2(min(h, w) // 4)))
        layers = []
        ch = 3
        out = width
        for _ in range(levels):
            layers += [nn.Conv2d(ch, out, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
            ch = out
            out = min(2 * out, 8 * width)
        self.trunk = nn.Sequential(*layers)
        self.critic_head = nn.Conv2d(ch, 1, 3, padding=1)
        self.au_head = nn.Linear(ch, au_dim)

    def arch(self) -> dict:
        return {
            "kind": "discriminator",
            "au_dim": self.au_dim,
            "in_hw": list(self.in_hw),
            "width": self.width,
        }

    def forward(self, image: torch.Tensor):
        if image.dim() != 4 or image.shape[1] != 3 or tuple(image.shape[2:]) != self.in_hw:
            raise ShapeMismatch(
                f"expected (B, 3, {self.in_hw[0]}, {self.in_hw[1]}) input, got {tuple(image.shape)}"
            )
        feats = self.trunk(image)
        score = self.critic_head(feats).mean(dim=(1, 2, 3))
        pooled = F.adaptive_avg_pool2d(feats, 1).flatten(1)
        return score, self.au_head(pooled)


class EmbeddingModel(nn.Module):
    """Small conv identity classifier whose penultimate features serve as FR embeddings."""

    def __init__(self, image_size: int = 64, embed_dim: int = 64, width: int = 10, n_classes: int = 0):
        super().__init__()
        self.image_size = int(image_size)
        self.embed_dim = embed_dim
        self.width = width
        self.n_classes = n_classes
        # batch norm strips the large input-independent response the uniform
        # face background induces; without it every image pools to nearly the
        # same feature vector and cosine geometry degenerates
        self.trunk = nn.Sequential(
            nn.Conv2d(3, width, 4, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(width), nn.ReLU(inplace=True),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(2 * width), nn.ReLU(inplace=True),
            nn.Conv2d(2 * width, 4 * width, 4, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(4 * width), nn.ReLU(inplace=True),
        )
        self.proj = nn.Linear(4 * width, embed_dim)
        self.head = nn.Linear(embed_dim, n_classes, bias=False) if n_classes > 0 else None
        self.logit_scale = 16.0

    def arch(self) -> dict:
        return {
            "kind": "embedding",
            "image_size": self.image_size,
            "embed_dim": self.embed_dim,
            "width": self.width,
            "n_classes": self.n_classes,
        }

    def features(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() != 4 or image.shape[1] != 3 or image.shape[2] != self.image_size:
            raise ShapeMismatch(
                f"expected (B, 3, {self.image_size}, {self.image_size}) input, got {tuple(image.shape)}"
            )
        h = self.trunk(image)
        return self.proj(F.adaptive_avg_pool2d(h, 1).flatten(1))

    def embed(self, image: torch.Tensor) -> torch.Tensor:
        f = self.features(image)
        norm = f.norm(dim=1, keepdim=True)
        if torch.any(norm < 1e-8):
            raise DegenerateEmbedding("embedding norm below 1e-8; cannot normalize")
        return f / norm

    def logits(self, image: torch.Tensor) -> torch.Tensor:
        """Normalized-softmax logits: scaled cosine between embedding and class weight.

        Training on these forces angular identity separation, which is what the
        cosine verification thresholds downstream rely on.
        """
        if self.head is None:
            raise ShapeMismatch("embedder has no classification head (n_classes=0)")
        w = F.normalize(self.head.weight, dim=1)
        return self.logit_scale * self.embed(image) @ w.T


_MODEL_KINDS = {
    "generator": lambda a: GeneratorModel(a["au_dim"], tuple(a["in_hw"]), a["width"], a["res_blocks"]),
    "discriminator": lambda a: DiscriminatorModel(a["au_dim"], tuple(a["in_hw"]), a["width"]),
    "embedding": lambda a: EmbeddingModel(a["image_size"], a["embed_dim"], a["width"], a["n_classes"]),
}


def save_checkpoint(path, model: nn.Module, extra: dict | None = None) -> None:
    """Write a versioned checkpoint: architecture record plus parameter arrays."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "arch": model.arch(),
        "state": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "extra": dict(extra or {}),
    }
    torch.save(payload, path)


def load_checkpoint(path, expect_kind: str | None = None):
    """Rebuild a model from a checkpoint, refusing version or shape mismatches.

    Returns (model, extra). The model is returned in eval mode.
    """
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointLoadError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or "version" not in payload:
        raise CheckpointLoadError(f"{path} is not a model checkpoint")
    if payload["version"] != CHECKPOINT_VERSION:
        raise CheckpointLoadError(
            f"checkpoint version {payload['version']} unsupported (expected {CHECKPOINT_VERSION})"
        )
    arch = payload["arch"]
    kind = arch.get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise CheckpointLoadError(f"expected a {expect_kind} checkpoint, found {kind}")
    if kind not in _MODEL_KINDS:
        raise CheckpointLoadError(f"unknown model kind {kind!r}")
    model = _MODEL_KINDS[kind](arch)
    try:
        model.load_state_dict(payload["state"], strict=True)
    except RuntimeError as exc:
        raise CheckpointLoadError(f"parameter shape mismatch in {path}: {exc}") from None
    model.eval()
    return model, payload.get("extra", {})
