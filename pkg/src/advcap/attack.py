"""FGSM against the captioning loss, and difference maps for visualizing perturbations."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError, PairingError
from .model import CaptionModel, ImageBatch, forward_loss

DEFAULT_EPSILON = 0.1


@dataclass
class AttackConfig:
    epsilon: float = DEFAULT_EPSILON
    clamp_min: float = 0.0
    clamp_max: float = 1.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be non-negative, got {self.epsilon}")
        if not self.clamp_min < self.clamp_max:
            raise ConfigError("clamp_min must be below clamp_max")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdversarialBatch:
    perturbed: ImageBatch
    source_ids: list
    perturbation: torch.Tensor  # x' - x


def input_gradient(model: CaptionModel, images: ImageBatch, captions) -> torch.Tensor:
    """Gradient of the mean caption loss with respect to the pixels. Parameters are left untouched."""
    was_training = model.training
    model.eval()
    try:
        x = images.pixels.detach().clone().requires_grad_(True)
        with torch.enable_grad():
            loss = forward_loss(x, captions, model)
            (grad,) = torch.autograd.grad(loss, x)
        return grad.detach()
    finally:
        model.train(was_training)


def sign_step(x: torch.Tensor, grad: torch.Tensor, cfg: AttackConfig) -> torch.Tensor:
    """x + eps * sign(grad), clamped to the pixel range; sign(0) is 0."""
    if cfg.epsilon == 0:
        return x.detach().clone()
    return (x.detach() + cfg.epsilon * torch.sign(grad)).clamp(cfg.clamp_min, cfg.clamp_max)


def fgsm(model: CaptionModel, images: ImageBatch, captions, cfg: AttackConfig | None = None) -> AdversarialBatch:
    cfg = cfg or AttackConfig()
    x = images.pixels.detach()
    if cfg.epsilon == 0:
        perturbed = x.clone()
    else:
        perturbed = sign_step(x, input_gradient(model, images, captions), cfg)
    return AdversarialBatch(ImageBatch(perturbed, list(images.ids)), list(images.ids), perturbed - x)


def difference_image(original: ImageBatch, adversarial: AdversarialBatch) -> torch.Tensor:
    """|x' - x| min-max rescaled to [0, 1] per image; an all-zero difference stays zero."""
    if list(original.ids) != list(adversarial.source_ids):
        raise PairingError("original and adversarial batches are not paired by id")
    if original.pixels.shape != adversarial.perturbed.pixels.shape:
        raise PairingError("original and adversarial shapes differ")
    diff = (adversarial.perturbed.pixels - original.pixels).abs()
    flat = diff.reshape(diff.shape[0], -1)
    lo = flat.min(dim=1, keepdim=True).values
    span = flat.max(dim=1, keepdim=True).values - lo
    scaled = torch.where(span > 0, (flat - lo) / span.clamp_min(torch.finfo(diff.dtype).tiny), torch.zeros_like(flat))
    return scaled.reshape(diff.shape)


def patch_sign_agreement(perturbation: torch.Tensor, patch_size: int) -> tuple[float, float]:
    """Fraction of horizontally adjacent pixel pairs whose perturbation signs agree,
    split into pairs inside one patch and pairs straddling a patch boundary."""
    s = torch.sign(perturbation)
    same = (s[..., :, 1:] == s[..., :, :-1]).float()
    cols = torch.arange(1, s.shape[-1])
    boundary = (cols % patch_size) == 0
    return same[..., ~boundary].mean().item(), same[..., boundary].mean().item()


def to_uint8(pixels: torch.Tensor) -> np.ndarray:
    """(C, H, W) float in [0, 1] to (H, W, C) uint8."""
    arr = pixels.detach().cpu().clamp(0, 1).permute(1, 2, 0).numpy()
    return np.round(arr * 255).astype(np.uint8)


def save_triplet(original: torch.Tensor, perturbed: torch.Tensor, difference: torch.Tensor, path,
                 scale: int = 4, gap: int = 2) -> Path:
    """Write original | perturbed | difference side by side as a PNG."""
    panels = [to_uint8(t) for t in (original, perturbed, difference)]
    h, w, c = panels[0].shape
    canvas = np.full((h, 3 * w + 2 * gap, c), 255, dtype=np.uint8)
    for k, p in enumerate(panels):
        canvas[:, k * (w + gap): k * (w + gap) + w] = p
    img = Image.fromarray(canvas)
    if scale > 1:
        img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PNG")
    return path
