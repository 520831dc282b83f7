"""Patch-encoder / causal-decoder captioning model."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DegenerateBatchError, DimensionError, SequenceLengthError

CHECKPOINT_VERSION = 1
GROUP_NAMES = ("encoder", "decoder")

PAD, BOS, EOS, UNK = 0, 1, 2, 3


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    attention_heads: int = 4
    ffn_dim: int = 128
    vocab_size: int = 64
    max_caption_len: int = 16
    dropout: float = 0.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.attention_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by attention_heads {self.attention_heads}")
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must hold BOS, EOS, PAD and UNK")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @classmethod
    def full_scale(cls, vocab_size: int = 50257) -> "ModelConfig":
        """ViT-Base/16 encoder and GPT-2 small decoder dimensions."""
        return cls(image_size=224, patch_size=16, channels=3, embed_dim=768,
                   encoder_layers=12, decoder_layers=12, attention_heads=12,
                   ffn_dim=3072, vocab_size=vocab_size, max_caption_len=64, dropout=0.1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ImageBatch:
    pixels: torch.Tensor  # (B, C, H, W) in [0, 1]
    ids: list = field(default_factory=list)

    def __post_init__(self):
        if self.pixels.dim() != 4:
            raise DimensionError(f"expected rank-4 pixels, got shape {tuple(self.pixels.shape)}")
        if not self.ids:
            self.ids = list(range(self.pixels.shape[0]))
        if len(self.ids) != self.pixels.shape[0]:
            raise DimensionError("ids and pixels disagree on batch size")

    def __len__(self):
        return self.pixels.shape[0]

    def validate(self, image_size: int | None = None, lo: float = 0.0, hi: float = 1.0):
        if self.pixels.numel() and (self.pixels.min() < lo or self.pixels.max() > hi):
            raise DimensionError(f"pixel values outside [{lo}, {hi}]")
        if image_size is not None and tuple(self.pixels.shape[-2:]) != (image_size, image_size):
            raise DimensionError(
                f"image is {tuple(self.pixels.shape[-2:])}, model expects {image_size}x{image_size}")
        return self


@dataclass
class CaptionBatch:
    tokens: torch.Tensor  # (B, L) long
    mask: torch.Tensor  # (B, L) bool, True on real tokens

    def __len__(self):
        return self.tokens.shape[0]


def _pixels(images) -> torch.Tensor:
    return images.pixels if isinstance(images, ImageBatch) else images


def _tokens(captions):
    if isinstance(captions, CaptionBatch):
        return captions.tokens, captions.mask
    return captions, captions != PAD


class PatchEmbedding(nn.Module):
    """Cut the image into square patches, flatten and project each one, prepend CLS."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.proj = nn.Linear(cfg.channels * cfg.patch_size ** 2, cfg.embed_dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_patches + 1, cfg.embed_dim))

    def patchify(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if x.shape[1] != cfg.channels or tuple(x.shape[-2:]) != (cfg.image_size, cfg.image_size):
            raise DimensionError(
                f"got images of shape {tuple(x.shape[1:])}, config wants "
                f"({cfg.channels}, {cfg.image_size}, {cfg.image_size})")
        p = cfg.patch_size
        b, c, h, w = x.shape
        x = x.reshape(b, c, h // p, p, w // p, p)
        # patches in row-major order, each flattened as (c, p, p)
        return x.permute(0, 2, 4, 1, 3, 5).reshape(b, (h // p) * (w // p), c * p * p)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        tokens = self.proj(self.patchify(x))
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        return torch.cat([cls, tokens], dim=1) + self.pos_embed


def _block(cfg: ModelConfig, n_layers: int) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(
        cfg.embed_dim, cfg.attention_heads, cfg.ffn_dim, dropout=cfg.dropout,
        activation="gelu", batch_first=True, norm_first=True)
    return nn.TransformerEncoder(layer, n_layers, enable_nested_tensor=False)


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = PatchEmbedding(cfg)
        self.blocks = _block(cfg, cfg.encoder_layers)
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.blocks(self.embed(x))
        return self.norm(h)[:, 0]


class CaptionDecoder(nn.Module):
    """Decoder-only transformer; the image enters as one projected prefix slot."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.prefix = nn.Linear(cfg.embed_dim, cfg.embed_dim)
        self.tok_embed = nn.Embedding(cfg.vocab_size, cfg.embed_dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.max_caption_len + 1, cfg.embed_dim))
        self.drop = nn.Dropout(cfg.dropout)
        self.blocks = _block(cfg, cfg.decoder_layers)
        self.norm = nn.LayerNorm(cfg.embed_dim)
        self.head = nn.Linear(cfg.embed_dim, cfg.vocab_size)

    def forward(self, cls_features: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        length = tokens.shape[1]
        if length > self.cfg.max_caption_len:
            raise SequenceLengthError(f"caption length {length} exceeds max_caption_len {self.cfg.max_caption_len}")
        h = torch.cat([self.prefix(cls_features).unsqueeze(1), self.tok_embed(tokens)], dim=1)
        h = self.drop(h + self.pos_embed[:, : length + 1])
        causal = nn.Transformer.generate_square_subsequent_mask(length + 1, dtype=h.dtype, device=h.device)
        h = self.blocks(h, mask=causal, is_causal=True)
        # slot t+1 has seen the prefix and tokens[:t+1]; it predicts tokens[t+1]
        return self.head(self.norm(h[:, 1:]))


class CaptionModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.special_tokens = {"pad": PAD, "bos": BOS, "eos": EOS, "unk": UNK}
        self.encoder = ImageEncoder(cfg)
        self.decoder = CaptionDecoder(cfg)
        self.reset_parameters()

    def reset_parameters(self):
        for name, p in self.named_parameters():
            if name.endswith("bias"):
                nn.init.zeros_(p)
            elif "norm" in name.split(".")[-2]:
                nn.init.ones_(p)
            else:
                nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04)

    def groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        return {g: [(f"{g}.{n}", p) for n, p in getattr(self, g).named_parameters()] for g in GROUP_NAMES}

    def group_parameters(self, group: str) -> Iterator[nn.Parameter]:
        if group not in GROUP_NAMES:
            raise ConfigError(f"unknown parameter group {group!r}; expected one of {GROUP_NAMES}")
        return getattr(self, group).parameters()

    def is_trainable(self, group: str) -> bool:
        return all(p.requires_grad for p in self.group_parameters(group))

    def forward(self, images, captions) -> torch.Tensor:
        tokens, _ = _tokens(captions)
        return self.decoder(self.encoder(_pixels(images)), tokens)


def embed_patches(images, model_or_embed) -> torch.Tensor:
    embed = model_or_embed.encoder.embed if isinstance(model_or_embed, CaptionModel) else model_or_embed
    return embed(_pixels(images))


def encode_image(images, model: CaptionModel) -> torch.Tensor:
    return model.encoder(_pixels(images))


def decode_logits(cls_features: torch.Tensor, captions, model: CaptionModel) -> torch.Tensor:
    tokens, _ = _tokens(captions)
    return model.decoder(cls_features, tokens)


def token_cross_entropy(logits: torch.Tensor, tokens: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean next-token cross-entropy over real target positions."""
    target_mask = mask[:, 1:]
    if not bool(target_mask.any()):
        raise DegenerateBatchError("no real target tokens in batch")
    flat = F.cross_entropy(logits[:, :-1].reshape(-1, logits.shape[-1]), tokens[:, 1:].reshape(-1), reduction="none")
    weights = target_mask.reshape(-1).to(flat.dtype)
    return (flat * weights).sum() / weights.sum()


def forward_loss(images, captions, model: CaptionModel) -> torch.Tensor:
    tokens, mask = _tokens(captions)
    return token_cross_entropy(model(images, tokens), tokens, mask)


@dataclass
class Generation:
    tokens: list[list[int]]  # without BOS/EOS
    truncated: list[bool]


@torch.no_grad()
def generate_caption(images, model: CaptionModel, max_len: int | None = None) -> Generation:
    """Greedy decoding from BOS until EOS or ``max_len`` tokens."""
    was_training = model.training
    model.eval()
    try:
        cfg = model.config
        max_len = cfg.max_caption_len - 1 if max_len is None else min(max_len, cfg.max_caption_len - 1)
        cls = model.encoder(_pixels(images))
        b = cls.shape[0]
        seq = torch.full((b, 1), BOS, dtype=torch.long, device=cls.device)
        done = torch.zeros(b, dtype=torch.bool, device=cls.device)
        for _ in range(max_len):
            nxt = model.decoder(cls, seq)[:, -1].argmax(-1)
            nxt = torch.where(done, torch.full_like(nxt, PAD), nxt)
            seq = torch.cat([seq, nxt[:, None]], dim=1)
            done |= nxt == EOS
            if bool(done.all()):
                break
        out, truncated = [], []
        for row in seq[:, 1:].tolist():
            if EOS in row:
                out.append(row[: row.index(EOS)])
                truncated.append(False)
            else:
                out.append(row)
                truncated.append(True)
        return Generation(out, truncated)
    finally:
        model.train(was_training)


def set_group_trainable(model: CaptionModel, group: str, trainable: bool) -> CaptionModel:
    for p in model.group_parameters(group):
        p.requires_grad_(trainable)
    return model


def save_checkpoint(model: CaptionModel, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "special_tokens": dict(model.special_tokens),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }, path)
    return path


def load_checkpoint(path) -> tuple[CaptionModel, dict]:
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {blob.get('version')!r}")
    model = CaptionModel(ModelConfig.from_dict(blob["config"]))
    model.special_tokens = dict(blob["special_tokens"])
    model.load_state_dict(blob["state_dict"])
    dtype = next(iter(blob["state_dict"].values())).dtype
    model.to(dtype)
    model.eval()
    return model, blob["extra"]
