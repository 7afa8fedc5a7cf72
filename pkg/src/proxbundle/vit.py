"""Desk-scale Vision Transformer encoder.

Patch embedding, class token, multi-head scaled dot-product attention and a
block update of the form

    Z' = Z + multi_head(Z);  Zhat = LayerNorm(Z');  Z_next = Z' + FFN(Zhat)

with FFN(X) = GELU(X W1 + b1) W2 + b2.  ``encode`` runs a batch of images
through all blocks and collects the class-token columns into a d x m
feature matrix, optionally tapping the class tokens after intermediate
blocks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError
from .pxb import read_pxb, write_pxb
from .rng import Rng
from .tensor import (
    Tensor,
    add,
    add_broadcast,
    concat_cols,
    concat_rows,
    gelu,
    layer_norm,
    matmul,
    smul,
    softmax_rows,
    take_rows,
    transpose,
)

LAYERNORM_EPS = 1e-5
INIT_STD = 0.02


@dataclass(frozen=True)
class PatchEmbedConfig:
    image_height: int
    image_width: int
    channels: int
    patch_size: int
    embed_dim: int

    def __post_init__(self):
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ConfigError(
                f"image {self.image_height}x{self.image_width} not divisible by patch {self.patch_size}"
            )

    @property
    def patch_len(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def num_patches(self) -> int:
        return (self.image_height // self.patch_size) * (self.image_width // self.patch_size)


@dataclass(frozen=True)
class VitConfig:
    num_layers: int
    num_heads: int
    embed_dim: int
    ffn_dim: int
    patch: PatchEmbedConfig
    head_dim: int | None = None
    positional_embedding: bool = True

    def __post_init__(self):
        if self.num_layers < 1 or self.num_heads < 1:
            raise ConfigError("need at least one layer and one head")
        if self.head_dim is None and self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads; set head_dim"
            )
        if self.patch.embed_dim != self.embed_dim:
            raise ConfigError("patch embed_dim differs from model embed_dim")

    @property
    def dk(self) -> int:
        return self.head_dim if self.head_dim is not None else self.embed_dim // self.num_heads


@dataclass
class TransformerBlockParams:
    wq: list[Tensor]  # per head, d x dk
    wk: list[Tensor]
    wv: list[Tensor]
    wo: Tensor  # (h*dk) x d
    w1: Tensor  # d x ffn
    b1: Tensor  # 1 x ffn
    w2: Tensor  # ffn x d
    b2: Tensor  # 1 x d
    ln_gain: Tensor  # 1 x d
    ln_bias: Tensor  # 1 x d


@dataclass
class VitParams:
    embed: Tensor  # d x p
    class_token: Tensor  # 1 x d
    pos: Tensor | None  # (n+1) x d
    blocks: list[TransformerBlockParams] = field(default_factory=list)


def init_block(cfg: VitConfig, rng: Rng) -> TransformerBlockParams:
    d, dk, h, f = cfg.embed_dim, cfg.dk, cfg.num_heads, cfg.ffn_dim
    proj = lambda r, c: Tensor(rng.truncated_normal(r, c, std=INIT_STD))
    return TransformerBlockParams(
        wq=[proj(d, dk) for _ in range(h)],
        wk=[proj(d, dk) for _ in range(h)],
        wv=[proj(d, dk) for _ in range(h)],
        wo=proj(h * dk, d),
        w1=proj(d, f),
        b1=Tensor(np.zeros((1, f))),
        w2=proj(f, d),
        b2=Tensor(np.zeros((1, d))),
        ln_gain=Tensor(np.ones((1, d))),
        ln_bias=Tensor(np.zeros((1, d))),
    )


def init_vit(cfg: VitConfig, rng: Rng) -> VitParams:
    p = cfg.patch
    pos = None
    if cfg.positional_embedding:
        pos = Tensor(np.zeros((p.num_patches + 1, cfg.embed_dim)))
    return VitParams(
        embed=Tensor(rng.truncated_normal(cfg.embed_dim, p.patch_len, std=INIT_STD)),
        class_token=Tensor(rng.truncated_normal(1, cfg.embed_dim, std=INIT_STD)),
        pos=pos,
        blocks=[init_block(cfg, rng) for _ in range(cfg.num_layers)],
    )


def extract_patches(image: np.ndarray, cfg: PatchEmbedConfig) -> np.ndarray:
    """Flatten non-overlapping patches in row-major patch order -> (n, p).

    Each patch is flattened row-major with channels slowest.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None, :, :]
    if img.shape != (cfg.channels, cfg.image_height, cfg.image_width):
        raise ConfigError(
            f"image shape {img.shape} does not match configured "
            f"({cfg.channels}, {cfg.image_height}, {cfg.image_width})"
        )
    s = cfg.patch_size
    gh, gw = cfg.image_height // s, cfg.image_width // s
    patches = np.empty((gh * gw, cfg.patch_len))
    for gi in range(gh):
        for gj in range(gw):
            block = img[:, gi * s : (gi + 1) * s, gj * s : (gj + 1) * s]
            patches[gi * gw + gj] = block.ravel()
    return patches


def embed_patches(image, cfg: PatchEmbedConfig, embed: Tensor, class_token: Tensor,
                  pos: Tensor | None = None) -> Tensor:
    """Project patches with the embedding matrix and prepend the class token.

    Returns the (n+1) x d token sequence; row 0 is the class token.
    """
    patches = Tensor(extract_patches(image, cfg))
    if embed.shape != (cfg.embed_dim, cfg.patch_len):
        raise ConfigError(f"embedding matrix {embed.shape}, expected ({cfg.embed_dim}, {cfg.patch_len})")
    if class_token.shape != (1, cfg.embed_dim):
        raise ConfigError(f"class token {class_token.shape}, expected (1, {cfg.embed_dim})")
    tokens = matmul(patches, transpose(embed))  # n x d, row i = E @ x_i
    seq = concat_rows([class_token, tokens])
    if pos is not None:
        if pos.shape != seq.shape:
            raise ConfigError(f"positional embedding {pos.shape}, expected {seq.shape}")
        seq = add(seq, pos)
    return seq


def attention_matrix(tokens, wq: Tensor, wk: Tensor, dk: int) -> Tensor:
    """Row-stochastic attention weights softmax(Q Kᵀ / sqrt(dk))."""
    q = matmul(tokens, wq)
    k = matmul(tokens, wk)
    return softmax_rows(smul(matmul(q, transpose(k)), 1.0 / math.sqrt(dk)))


def attention_head(tokens, wq: Tensor, wk: Tensor, wv: Tensor, dk: int) -> Tensor:
    """Single-head scaled dot-product attention output A @ V."""
    a = attention_matrix(tokens, wq, wk, dk)
    return matmul(a, matmul(tokens, wv))


def transformer_block(tokens, params: TransformerBlockParams, dk: int) -> Tensor:
    """One encoder block: attention residual, LayerNorm, FFN residual."""
    heads = [
        attention_head(tokens, params.wq[j], params.wk[j], params.wv[j], dk)
        for j in range(len(params.wq))
    ]
    multi = matmul(concat_cols(heads), params.wo)
    z_res = add(tokens, multi)
    z_norm = layer_norm(z_res, params.ln_gain, params.ln_bias, eps=LAYERNORM_EPS)
    hidden = gelu(add_broadcast(matmul(z_norm, params.w1), params.b1))
    ffn = add_broadcast(matmul(hidden, params.w2), params.b2)
    return add(z_res, ffn)


def class_column(tokens) -> Tensor:
    """Class-token row as a d x 1 column."""
    return transpose(take_rows(tokens, 0, 1))


def encode(images, cfg: VitConfig, params: VitParams, tap_points=()) -> tuple[Tensor, dict[int, Tensor]]:
    """Encode a batch into the d x m matrix of final-layer class tokens.

    ``tap_points`` is a set of 1-based block indices; for each, the class
    tokens right after that block are also returned (d x m each).
    """
    taps = sorted(set(int(t) for t in tap_points))
    for t in taps:
        if t < 1 or t > cfg.num_layers:
            raise ConfigError(f"tap point {t} outside [1, {cfg.num_layers}]")
    if len(params.blocks) != cfg.num_layers:
        raise ConfigError(f"{len(params.blocks)} blocks for {cfg.num_layers} layers")
    imgs = _as_image_list(images)
    per_tap: dict[int, list[Tensor]] = {t: [] for t in taps}
    finals = []
    for img in imgs:
        seq = embed_patches(img, cfg.patch, params.embed, params.class_token, params.pos)
        for layer, block in enumerate(params.blocks, start=1):
            seq = transformer_block(seq, block, cfg.dk)
            if layer in per_tap:
                per_tap[layer].append(class_column(seq))
        finals.append(class_column(seq))
    features = concat_cols(finals)
    return features, {t: concat_cols(cols) for t, cols in per_tap.items()}


def _as_image_list(images) -> list[np.ndarray]:
    if isinstance(images, np.ndarray) and images.ndim >= 3:
        return [images[i] for i in range(images.shape[0])]
    return list(images)


# ---------------------------------------------------------------------------
# checkpoints: one PXB1 file per tensor plus a JSON manifest
# ---------------------------------------------------------------------------


def save_checkpoint(directory, tensors: dict[str, np.ndarray], meta: dict) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "proxbundle-checkpoint-v1", "meta": meta, "tensors": {}}
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float64)
        fname = name.replace("/", "_") + ".pxb"
        write_pxb(out / fname, arr)
        manifest["tensors"][name] = {"file": fname, "shape": list(arr.shape)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict]:
    out = Path(directory)
    manifest = json.loads((out / "manifest.json").read_text())
    tensors = {}
    for name, entry in manifest["tensors"].items():
        arr = read_pxb(out / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise DimensionError(
                f"checkpoint tensor {name}: file shape {list(arr.shape)} != manifest {entry['shape']}"
            )
        tensors[name] = arr
    return tensors, manifest.get("meta", {})


def block_param_dict(block: TransformerBlockParams, prefix: str) -> dict[str, Tensor]:
    out = {}
    for j, (q, k, v) in enumerate(zip(block.wq, block.wk, block.wv)):
        out[f"{prefix}.wq{j}"] = q
        out[f"{prefix}.wk{j}"] = k
        out[f"{prefix}.wv{j}"] = v
    out[f"{prefix}.wo"] = block.wo
    out[f"{prefix}.w1"] = block.w1
    out[f"{prefix}.b1"] = block.b1
    out[f"{prefix}.w2"] = block.w2
    out[f"{prefix}.b2"] = block.b2
    out[f"{prefix}.ln_gain"] = block.ln_gain
    out[f"{prefix}.ln_bias"] = block.ln_bias
    return out


def vit_param_dict(params: VitParams) -> dict[str, Tensor]:
    out = {"embed.weight": params.embed, "embed.class_token": params.class_token}
    if params.pos is not None:
        out["embed.pos"] = params.pos
    for i, block in enumerate(params.blocks):
        out.update(block_param_dict(block, f"block{i}"))
    return out
