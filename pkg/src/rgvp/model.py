"""Miniature dual-stream encoder: vision transformer over patches, text
transformer, cross-modal fusion, and all task heads.

Attention masking is implemented by filling disallowed key columns with -inf
before the softmax, so every attention row assigns *exactly* zero weight to
masked columns in every layer. Representations of allowed tokens are then
bitwise-invariant to pixel changes inside disallowed patches, which the
masked-context losses rely on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .patches import PatchGrid, PatchMask
from .tokenizer import PAD_ID


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    d_model: int = 64
    n_heads: int = 4
    depth_vision: int = 2
    depth_text: int = 2
    depth_xmodal: int = 2
    vocab_size: int = 64
    n_relations: int = 8  # V; the MRC head outputs V+1 classes (OUT_OF_VOCAB last)
    proj_dim: int = 32
    temperature: float = 0.07
    dropout: float = 0.1
    max_text_len: int = 112
    mrc_hidden: int = 0  # 0 -> 2 * d_model

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ModelError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.temperature <= 0:
            raise ModelError(f"temperature must be positive, got {self.temperature}")
        if min(self.depth_vision, self.depth_text, self.depth_xmodal) < 1:
            raise ModelError("all encoder depths must be >= 1")
        if self.image_size % self.patch_size != 0:
            raise ModelError("image_size must be divisible by patch_size")

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(self.image_size, self.patch_size)

    @property
    def n_patches(self) -> int:
        return self.grid.n_patches

    @property
    def mrc_hidden_dim(self) -> int:
        return self.mrc_hidden if self.mrc_hidden > 0 else 2 * self.d_model

    @property
    def n_relation_classes(self) -> int:
        return self.n_relations + 1

    def parameter_count(self) -> int:
        """Closed-form total parameter count; tested against the live module."""
        d, w = self.d_model, self.vocab_size
        attn = 4 * (d * d + d)
        mlp = (d * 4 * d + 4 * d) + (4 * d * d + d)
        ln = 2 * d
        enc_layer = attn + mlp + 2 * ln
        cross_layer = 2 * attn + mlp + 3 * ln
        patch_dim = 3 * self.patch_size * self.patch_size
        vision = (
            (patch_dim * d + d)  # patch embed
            + d  # cls token
            + (1 + self.n_patches) * d  # positions
            + self.depth_vision * enc_layer
            + ln
        )
        text = w * d + self.max_text_len * d + self.depth_text * enc_layer + ln
        xmodal = self.depth_xmodal * cross_layer + ln
        h, c = self.mrc_hidden_dim, self.n_relation_classes
        heads = (
            (d * 2 + 2)  # itm
            + (d * w + w)  # mlm
            + 2 * (d * self.proj_dim + self.proj_dim)  # contrastive projections
            + (d * 4 + 4)  # bbox
            + (2 * d * h + h)
            + (h * c + c)  # mrc mlp
        )
        return vision + text + xmodal + heads


@dataclass
class EncodedPair:
    image_tokens: torch.Tensor  # (B, 1+P, d)
    text_tokens: torch.Tensor  # (B, L, d)
    fused_tokens: torch.Tensor  # (B, L, d)
    pooled: torch.Tensor  # (B, d), row 0 of fused_tokens


def _masked_attention_scores(scores: torch.Tensor, allowed: Optional[torch.Tensor]) -> torch.Tensor:
    """allowed: (B, L_kv) bool; disallowed key columns get -inf in every row."""
    if allowed is None:
        return scores
    return scores.masked_fill(~allowed[:, None, None, :], float("-inf"))


class MultiheadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.o_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(
        self, x_q: torch.Tensor, x_kv: torch.Tensor, allowed: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        b, lq, d = x_q.shape
        lk = x_kv.shape[1]
        q = self.q_proj(x_q).view(b, lq, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(x_kv).view(b, lk, self.n_heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(x_kv).view(b, lk, self.n_heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        scores = _masked_attention_scores(scores, allowed)
        probs = self.dropout(torch.softmax(scores, dim=-1))
        out = (probs @ v).transpose(1, 2).reshape(b, lq, d)
        return self.o_proj(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(d_model, 4 * d_model)
        self.fc2 = nn.Linear(4 * d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.dropout(F.gelu(self.fc1(x))))


class EncoderLayer(nn.Module):
    """Pre-LN self-attention block."""

    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = MultiheadAttention(d_model, n_heads, dropout)
        self.norm2 = nn.LayerNorm(d_model)
        self.mlp = FeedForward(d_model, dropout)

    def forward(self, x: torch.Tensor, allowed: Optional[torch.Tensor]) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, allowed)
        x = x + self.mlp(self.norm2(x))
        return x


class CrossModalLayer(nn.Module):
    """Text self-attention, cross-attention into image tokens, then MLP."""

    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.norm_self = nn.LayerNorm(d_model)
        self.self_attn = MultiheadAttention(d_model, n_heads, dropout)
        self.norm_cross = nn.LayerNorm(d_model)
        self.cross_attn = MultiheadAttention(d_model, n_heads, dropout)
        self.norm_mlp = nn.LayerNorm(d_model)
        self.mlp = FeedForward(d_model, dropout)

    def forward(
        self,
        x: torch.Tensor,
        image_tokens: torch.Tensor,
        text_allowed: Optional[torch.Tensor],
        image_allowed: Optional[torch.Tensor],
    ) -> torch.Tensor:
        h = self.norm_self(x)
        x = x + self.self_attn(h, h, text_allowed)
        x = x + self.cross_attn(self.norm_cross(x), image_tokens, image_allowed)
        x = x + self.mlp(self.norm_mlp(x))
        return x


class VlmModel(nn.Module):
    """Vision encoder + text encoder + cross-modal encoder + task heads."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        patch_dim = 3 * config.patch_size * config.patch_size

        self.patch_embed = nn.Linear(patch_dim, d)
        self.vision_cls = nn.Parameter(torch.zeros(1, 1, d))
        self.vision_pos = nn.Parameter(torch.zeros(1, 1 + config.n_patches, d))
        self.vision_layers = nn.ModuleList(
            EncoderLayer(d, config.n_heads, config.dropout) for _ in range(config.depth_vision)
        )
        self.vision_norm = nn.LayerNorm(d)

        self.token_embed = nn.Embedding(config.vocab_size, d)
        self.text_pos = nn.Parameter(torch.zeros(1, config.max_text_len, d))
        self.text_layers = nn.ModuleList(
            EncoderLayer(d, config.n_heads, config.dropout) for _ in range(config.depth_text)
        )
        self.text_norm = nn.LayerNorm(d)

        self.xmodal_layers = nn.ModuleList(
            CrossModalLayer(d, config.n_heads, config.dropout)
            for _ in range(config.depth_xmodal)
        )
        self.xmodal_norm = nn.LayerNorm(d)

        self.itm_head = nn.Linear(d, 2)
        self.mlm_head = nn.Linear(d, config.vocab_size)
        self.vision_proj = nn.Linear(d, config.proj_dim)
        self.text_proj = nn.Linear(d, config.proj_dim)
        self.bbox_fc = nn.Linear(d, 4)
        self.mrc_fc1 = nn.Linear(2 * d, config.mrc_hidden_dim)
        self.mrc_fc2 = nn.Linear(config.mrc_hidden_dim, config.n_relation_classes)

        self._init_weights()

    def _init_weights(self) -> None:
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.trunc_normal_(module.weight, std=0.02)
                nn.init.zeros_(module.bias)
            elif isinstance(module, nn.Embedding):
                nn.init.trunc_normal_(module.weight, std=0.02)
        nn.init.trunc_normal_(self.vision_cls, std=0.02)
        nn.init.trunc_normal_(self.vision_pos, std=0.02)
        nn.init.trunc_normal_(self.text_pos, std=0.02)

    def _patchify(self, pixels: torch.Tensor) -> torch.Tensor:
        b, h, w, c = pixels.shape
        cfg = self.config
        if (h, w, c) != (cfg.image_size, cfg.image_size, 3):
            raise ModelError(
                f"pixels shape {(h, w, c)} does not match config "
                f"({cfg.image_size}, {cfg.image_size}, 3)"
            )
        p = cfg.patch_size
        rows = h // p
        x = pixels.reshape(b, rows, p, rows, p, c)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, rows * rows, p * p * c)
        return x

    def encode_image(
        self, pixels: torch.Tensor, allowed: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        """pixels: (B, H, W, 3); allowed: optional (B, 1+P) bool column mask."""
        x = self.patch_embed(self._patchify(pixels))
        cls = self.vision_cls.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.vision_pos
        for layer in self.vision_layers:
            x = layer(x, allowed)
        return self.vision_norm(x)

    def encode_text(self, token_ids: torch.Tensor) -> torch.Tensor:
        """token_ids: (B, L) longs; [PAD] columns are excluded from attention."""
        if token_ids.numel() and int(token_ids.max()) >= self.config.vocab_size:
            raise ModelError(
                f"token id {int(token_ids.max())} out of range "
                f"(vocab_size {self.config.vocab_size})"
            )
        if token_ids.shape[1] > self.config.max_text_len:
            raise ModelError(
                f"sequence length {token_ids.shape[1]} exceeds max_text_len "
                f"{self.config.max_text_len}"
            )
        allowed = token_ids != PAD_ID
        x = self.token_embed(token_ids) + self.text_pos[:, : token_ids.shape[1]]
        for layer in self.text_layers:
            x = layer(x, allowed)
        return self.text_norm(x)

    def fuse(
        self,
        image_tokens: torch.Tensor,
        text_tokens: torch.Tensor,
        text_allowed: Optional[torch.Tensor] = None,
        image_allowed: Optional[torch.Tensor] = None,
    ) -> EncodedPair:
        if image_tokens.shape[-1] != text_tokens.shape[-1]:
            raise ModelError("image/text token dims differ")
        x = text_tokens
        for layer in self.xmodal_layers:
            x = layer(x, image_tokens, text_allowed, image_allowed)
        fused = self.xmodal_norm(x)
        return EncodedPair(
            image_tokens=image_tokens,
            text_tokens=text_tokens,
            fused_tokens=fused,
            pooled=fused[:, 0],
        )

    def forward_pair(
        self,
        pixels: torch.Tensor,
        token_ids: torch.Tensor,
        image_allowed: Optional[torch.Tensor] = None,
    ) -> EncodedPair:
        image_tokens = self.encode_image(pixels, image_allowed)
        text_tokens = self.encode_text(token_ids)
        return self.fuse(
            image_tokens, text_tokens, token_ids != PAD_ID, image_allowed
        )

    def contrastive_embed(self, vec: torch.Tensor, side: str) -> torch.Tensor:
        """Linear projection to the shared space, then L2 normalization."""
        if side == "image":
            projected = self.vision_proj(vec)
        elif side == "text":
            projected = self.text_proj(vec)
        else:
            raise ModelError(f"side must be 'image' or 'text', got {side!r}")
        norms = projected.norm(dim=-1, keepdim=True)
        if bool((norms == 0).any()):
            raise ModelError("cannot normalize a zero vector")
        return projected / norms

    def mrc_logits(self, pooled_subject: torch.Tensor, pooled_object: torch.Tensor) -> torch.Tensor:
        """Two-layer MLP with ReLU over the concatenated subject/object poolings."""
        joint = torch.cat([pooled_subject, pooled_object], dim=-1)
        return self.mrc_fc2(torch.relu(self.mrc_fc1(joint)))

    def itm_logits(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.itm_head(pooled)

    def mlm_logits(self, fused_tokens: torch.Tensor) -> torch.Tensor:
        return self.mlm_head(fused_tokens)

    def bbox_predict(self, pooled: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.bbox_fc(pooled))


def build_model(
    config: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32
) -> VlmModel:
    """Deterministic construction; float64 is the high-precision mode used by
    the gradient-check tests."""
    torch.manual_seed(seed)
    model = VlmModel(config)
    if dtype != torch.float32:
        model = model.to(dtype)
    return model


def patch_masks_to_tensor(
    masks: Sequence[PatchMask], device: Optional[torch.device] = None
) -> torch.Tensor:
    import numpy as np

    stacked = np.stack([m.allowed for m in masks])
    return torch.from_numpy(stacked).to(device=device)


def pixels_to_tensor(pixel_arrays: Sequence, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    import numpy as np

    return torch.from_numpy(np.stack(pixel_arrays)).to(dtype)
