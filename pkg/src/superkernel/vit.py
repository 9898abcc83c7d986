"""Patch embedding, pre-norm encoder, MAE autoencoder and class-token classifier."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import AttentionConfig, AttentionParams, count_params
from .nn import LayerNorm, Linear, Module, param
from .tensor import Tensor, as_tensor, concat, dropout, gelu, index, mean


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 256
    mlp_dim: int = 512
    n_layers: int = 6
    n_heads: int = 8
    variant: str = "standard"
    scaling: str | None = None
    sigma: float = 1.0
    mlp_dropout: float = 0.1
    dropout: float = 0.1
    attention_dropout: float = 0.0
    patch_size: int = 4
    image_size: int = 32
    channels: int = 3
    with_class_token: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.attention_dropout != 0.0:
            raise ValueError("attention dropout is fixed at 0")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return self.num_patches + int(self.with_class_token)

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    def attention(self, seq_len: int | None = None) -> AttentionConfig:
        return AttentionConfig(
            self.d_model,
            self.n_heads,
            self.variant,
            scaling=self.scaling,
            sigma=self.sigma,
            seq_len=(seq_len or self.seq_len) if self.variant == "linear_sim" else None,
        )


@dataclass(frozen=True)
class MAEConfig:
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(n_layers=8))
    decoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(d_model=192, mlp_dim=384, n_layers=6))
    mask_ratio: float = 0.75

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if (self.encoder.patch_size, self.encoder.image_size) != (self.decoder.patch_size, self.decoder.image_size):
            raise ValueError("encoder and decoder must share patch and image geometry")

    @property
    def num_masked(self) -> int:
        return masked_count(self.encoder.num_patches, self.mask_ratio)


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------


def patchify(images: np.ndarray, p: int) -> np.ndarray:
    """(B, C, H, W) -> (B, N, C*p*p), patches in row-major grid order."""
    B, C, H, W = images.shape
    if H % p or W % p:
        raise ValueError(f"image {H}x{W} not divisible by patch size {p}")
    x = images.reshape(B, C, H // p, p, W // p, p)
    return np.ascontiguousarray(x.transpose(0, 2, 4, 1, 3, 5).reshape(B, (H // p) * (W // p), C * p * p))


def unpatchify(patches: np.ndarray, p: int, channels: int, height: int, width: int) -> np.ndarray:
    B = patches.shape[0]
    gh, gw = height // p, width // p
    x = patches.reshape(B, gh, gw, channels, p, p).transpose(0, 3, 1, 4, 2, 5)
    return np.ascontiguousarray(x.reshape(B, channels, height, width))


class PatchEmbed(Module):
    """Stride-p patch convolution (as flatten + matmul), class token and learned positions."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        self.proj = Linear(config.patch_dim, config.d_model, rng)
        if config.with_class_token:
            self.cls_token = param(rng.normal(0.0, 0.02, size=(config.d_model,)))
        self.pos_embed = param(rng.normal(0.0, 0.02, size=(config.seq_len, config.d_model)))

    def tokens(self, images) -> Tensor:
        """Patch tokens with positions added, no class token: (B, N, D)."""
        images = np.asarray(getattr(images, "data", images))
        if images.ndim != 4 or images.shape[1:] != (self.config.channels, self.config.image_size, self.config.image_size):
            raise ValueError(f"expected (B, {self.config.channels}, {self.config.image_size}, {self.config.image_size}) images, got {images.shape}")
        x = self.proj(Tensor(patchify(images.astype(self.pos_embed.dtype), self.config.patch_size)))
        start = int(self.config.with_class_token)
        return x + self.pos_embed[start:]

    def class_token(self, batch: int) -> Tensor:
        cls = self.cls_token + self.pos_embed[0]
        return cls.reshape(1, 1, -1) * Tensor(np.ones((batch, 1, 1), dtype=cls.dtype))

    def __call__(self, images) -> Tensor:
        x = self.tokens(images)
        if self.config.with_class_token:
            x = concat([self.class_token(x.shape[0]), x], axis=1)
        return x


def patch_embed(images, embed: PatchEmbed) -> Tensor:
    return embed(images)


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


class EncoderBlock(Module):
    def __init__(self, config: EncoderConfig, rng: np.random.Generator, seq_len: int | None = None):
        self.cfg = config
        self.norm1 = LayerNorm(config.d_model)
        self.attn = AttentionParams(config.attention(seq_len), rng)
        self.norm2 = LayerNorm(config.d_model)
        self.fc1 = Linear(config.d_model, config.mlp_dim, rng)
        self.fc2 = Linear(config.mlp_dim, config.d_model, rng)

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None, trace: list | None = None) -> Tensor:
        train = self.training and rng is not None
        if trace is not None:
            t = self.attn(self.norm1(x), return_trace=True)
            trace.append(t)
            a = t.output
        else:
            a = self.attn(self.norm1(x))
        x = x + dropout(a, self.cfg.dropout, rng, train)
        h = dropout(gelu(self.fc1(self.norm2(x))), self.cfg.mlp_dropout, rng, train)
        return x + dropout(self.fc2(h), self.cfg.dropout, rng, train)


class Encoder(Module):
    def __init__(self, config: EncoderConfig, rng: np.random.Generator, seq_len: int | None = None):
        self.config = config
        self.blocks = [EncoderBlock(config, rng, seq_len) for _ in range(config.n_layers)]

    def __call__(self, x, rng=None, trace: list | None = None) -> Tensor:
        x = as_tensor(x)
        for block in self.blocks:
            x = block(x, rng, trace)
        return x


def encoder_forward(encoder: Encoder, X, rng=None) -> Tensor:
    return encoder(X, rng)


# ---------------------------------------------------------------------------
# MAE
# ---------------------------------------------------------------------------


def masked_count(num_patches: int, mask_ratio: float) -> int:
    return int(math.floor(mask_ratio * num_patches + 0.5))


def mae_mask(num_patches: int, mask_ratio: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random split of patch indices into sorted (visible, masked) lists."""
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError(f"mask_ratio must lie in (0, 1), got {mask_ratio}")
    n_mask = masked_count(num_patches, mask_ratio)
    if n_mask < 1 or n_mask >= num_patches:
        raise ValueError(f"mask_ratio {mask_ratio} masks {n_mask} of {num_patches} patches")
    perm = rng.permutation(num_patches)
    return np.sort(perm[n_mask:]), np.sort(perm[:n_mask])


class MAE(Module):
    def __init__(self, config: MAEConfig, rng: np.random.Generator):
        self.config = config
        enc, dec = config.encoder, config.decoder
        n_visible = enc.num_patches - config.num_masked + int(enc.with_class_token)
        self.embed = PatchEmbed(enc, rng)
        self.encoder = Encoder(enc, rng, seq_len=n_visible)
        self.enc_norm = LayerNorm(enc.d_model)
        self.adapter = Linear(enc.d_model, dec.d_model, rng)
        self.mask_token = param(rng.normal(0.0, 0.02, size=(dec.d_model,)))
        self.dec_pos = param(rng.normal(0.0, 0.02, size=(dec.seq_len, dec.d_model)))
        self.decoder = Encoder(dec, rng)
        self.dec_norm = LayerNorm(dec.d_model)
        self.head = Linear(dec.d_model, enc.patch_dim, rng)

    def __call__(self, images, rng: np.random.Generator, train_rng=None):
        return mae_forward(self, images, rng, train_rng)


@dataclass
class MAEOutput:
    reconstruction: np.ndarray  # (B, C, H, W)
    loss: Tensor
    pred: Tensor  # (B, N, patch_dim)
    masked: np.ndarray  # (B, n_mask)


def mae_forward(mae: MAE, images, mask_rng: np.random.Generator, train_rng=None) -> MAEOutput:
    enc = mae.config.encoder
    images = np.asarray(getattr(images, "data", images), dtype=mae.mask_token.dtype)
    B = images.shape[0]
    N = enc.num_patches
    splits = [mae_mask(N, mae.config.mask_ratio, mask_rng) for _ in range(B)]
    visible = np.stack([v for v, _ in splits])
    masked = np.stack([m for _, m in splits])
    rows = np.arange(B)[:, None]

    x = index(mae.embed.tokens(images), (rows, visible))
    if enc.with_class_token:
        x = concat([mae.embed.class_token(B), x], axis=1)
    x = mae.enc_norm(mae.encoder(x, train_rng))
    x = mae.adapter(x)

    cls, vis = (x[:, :1], x[:, 1:]) if enc.with_class_token else (None, x)
    n_mask = masked.shape[1]
    fill = mae.mask_token.reshape(1, 1, -1) * Tensor(np.ones((B, n_mask, 1), dtype=x.dtype))
    order = np.concatenate([visible, masked], axis=1)
    restore = np.argsort(order, axis=1)
    full = index(concat([vis, fill], axis=1), (rows, restore))
    if cls is not None:
        full = concat([cls, full], axis=1)
    full = full + mae.dec_pos
    y = mae.dec_norm(mae.decoder(full, train_rng))
    if cls is not None:
        y = y[:, 1:]
    pred = mae.head(y)  # (B, N, patch_dim)

    target = patchify(images, enc.patch_size)
    pm = index(pred, (rows, masked))
    diff = pm - Tensor(target[rows, masked])
    loss = mean(diff * diff)
    recon = unpatchify(pred.data, enc.patch_size, enc.channels, enc.image_size, enc.image_size)
    return MAEOutput(recon, loss, pred, masked)


def masked_mse(pred: np.ndarray, target: np.ndarray, masked: np.ndarray) -> float:
    rows = np.arange(pred.shape[0])[:, None]
    d = pred[rows, masked] - target[rows, masked]
    return float((d * d).mean())


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------


class ViTClassifier(Module):
    def __init__(self, config: EncoderConfig, rng: np.random.Generator, n_classes: int = 10):
        if not config.with_class_token:
            raise ValueError("the classifier reads the class token; with_class_token must be set")
        self.config = config
        self.embed = PatchEmbed(config, rng)
        self.encoder = Encoder(config, rng)
        self.norm = LayerNorm(config.d_model)
        self.head = Linear(config.d_model, n_classes, rng)

    def features(self, images, rng=None, trace: list | None = None) -> Tensor:
        return self.norm(self.encoder(self.embed(images), rng, trace))

    def __call__(self, images, rng=None) -> Tensor:
        return classify_forward(self, images, rng)


def classify_forward(model: ViTClassifier, images, rng=None) -> Tensor:
    return model.head(model.features(images, rng)[:, 0])


def init_from_pretrained(classifier: ViTClassifier, state: dict[str, np.ndarray], source_layers: int) -> list[str]:
    """Copy patch embedding and the first encoder layers from a pretrained state dict.

    ``source_layers`` is the depth of the pretrained encoder. Returns the copied
    parameter paths; the classifier head and final norm stay as initialized.
    """
    n = classifier.config.n_layers
    if n > source_layers:
        raise ValueError(f"cannot take {n} layers from a {source_layers}-layer encoder")
    copied = []
    for key, p in classifier.named_parameters():
        take = key.startswith("embed.") or (key.startswith("encoder.blocks.") and int(key.split(".")[2]) < n)
        if not take or key not in state:
            continue
        if tuple(state[key].shape) != p.shape:
            raise ValueError(f"{key}: pretrained shape {tuple(state[key].shape)} != {p.shape}")
        p.data = np.array(state[key], dtype=p.dtype)
        copied.append(key)
    return copied


def init_from_mae(classifier: ViTClassifier, mae: MAE) -> list[str]:
    """Layer-prefix surgery from a live MAE: embedding plus the first encoder blocks."""
    return init_from_pretrained(classifier, mae.state_dict(), mae.config.encoder.n_layers)


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamBreakdown:
    embedding: int
    blocks: int
    final_norm: int
    head: int
    per_block: int
    attention_per_block: int

    @property
    def total(self) -> int:
        return self.embedding + self.blocks + self.final_norm + self.head


def count_model_params(config: EncoderConfig, n_classes: int = 10) -> ParamBreakdown:
    """Exact trainable-scalar count of :class:`ViTClassifier` for ``config``."""
    D = config.d_model
    embedding = config.patch_dim * D + D + config.seq_len * D + (D if config.with_class_token else 0)
    attn = count_params(config.attention())
    mlp = D * config.mlp_dim + config.mlp_dim + config.mlp_dim * D + D
    per_block = attn + mlp + 4 * D
    return ParamBreakdown(
        embedding=embedding,
        blocks=config.n_layers * per_block,
        final_norm=2 * D,
        head=D * n_classes + n_classes,
        per_block=per_block,
        attention_per_block=attn,
    )


# Reference configurations behind the reported model sizes.
REFERENCE_MODELS = {
    "standard": EncoderConfig(variant="standard"),
    "pseudo": EncoderConfig(variant="pseudo"),
    "semi": EncoderConfig(variant="semi"),
    "linear_sim": EncoderConfig(variant="linear_sim"),
    "gaussian": EncoderConfig(d_model=64, mlp_dim=256, variant="gaussian"),
}

REPORTED_TOTALS = {
    "standard": 3_200_000,
    "pseudo": 2_450_000,
    "semi": 2_500_000,
    "linear_sim": 5_600_000,
    "gaussian": 256_000,
}


def with_layers(config: EncoderConfig, n_layers: int) -> EncoderConfig:
    return replace(config, n_layers=n_layers)
