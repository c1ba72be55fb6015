"""A small pre-norm Vision Transformer that exposes every layer's features.

The backbone is deliberately plain: non-overlapping patch projection, learned
positional embeddings, a class token at index 0, and L pre-norm blocks
(LayerNorm -> multi-head self-attention -> residual, LayerNorm -> GELU MLP ->
residual).  There is no trailing norm outside the blocks, so "the output of
block i" is unambiguous.  ``forward_collect`` returns all L per-layer token
matrices; freezing the parameters turns that forward pass into pure numpy
arithmetic with no gradient tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import Rng
from .tensor import (
    Tensor,
    add,
    concat,
    gelu,
    layernorm,
    linear,
    matmul,
    mul,
    narrow,
    permute,
    reshape,
    softmax,
)
from . import vspt


@dataclass(frozen=True)
class ViTConfig:
    """Backbone geometry; ``h``/``w`` is the patch-token grid."""

    L: int = 12
    D: int = 64
    heads: int = 4
    patch: int = 8
    H: int = 64
    W: int = 64
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.H % self.patch or self.W % self.patch:
            raise ValueError(f"image {self.H}x{self.W} not divisible by patch {self.patch}")
        if self.D % self.heads:
            raise ValueError(f"embedding dim {self.D} not divisible by {self.heads} heads")
        if self.L < 2:
            raise ValueError("need at least 2 layers to split")

    @property
    def h(self) -> int:
        return self.H // self.patch

    @property
    def w(self) -> int:
        return self.W // self.patch

    @property
    def tokens(self) -> int:
        return self.h * self.w + 1

    @classmethod
    def tiny(cls) -> "ViTConfig":
        return cls()


# Canonical per-block tensor names, in serialization order.
_BLOCK_FIELDS = (
    ("attn_qkv.weight", "qkv_w"),
    ("attn_qkv.bias", "qkv_b"),
    ("attn_out.weight", "out_w"),
    ("attn_out.bias", "out_b"),
    ("mlp_fc1.weight", "fc1_w"),
    ("mlp_fc1.bias", "fc1_b"),
    ("mlp_fc2.weight", "fc2_w"),
    ("mlp_fc2.bias", "fc2_b"),
    ("ln1.weight", "ln1_w"),
    ("ln1.bias", "ln1_b"),
    ("ln2.weight", "ln2_w"),
    ("ln2.bias", "ln2_b"),
)


@dataclass
class BlockParams:
    ln1_w: Tensor
    ln1_b: Tensor
    qkv_w: Tensor
    qkv_b: Tensor
    out_w: Tensor
    out_b: Tensor
    ln2_w: Tensor
    ln2_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor

    def named(self):
        for suffix, attr in _BLOCK_FIELDS:
            yield suffix, getattr(self, attr)

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]


def init_block(cfg: ViTConfig, rng: Rng, trainable: bool = True) -> BlockParams:
    d, hidden = cfg.D, cfg.D * cfg.mlp_ratio
    t = lambda a: Tensor(a, requires_grad=trainable)
    return BlockParams(
        ln1_w=t(np.ones(d, np.float32)),
        ln1_b=t(np.zeros(d, np.float32)),
        qkv_w=t(rng.normal((d, 3 * d), std=0.02)),
        qkv_b=t(np.zeros(3 * d, np.float32)),
        out_w=t(rng.normal((d, d), std=0.02)),
        out_b=t(np.zeros(d, np.float32)),
        ln2_w=t(np.ones(d, np.float32)),
        ln2_b=t(np.zeros(d, np.float32)),
        fc1_w=t(rng.normal((d, hidden), std=0.02)),
        fc1_b=t(np.zeros(hidden, np.float32)),
        fc2_w=t(rng.normal((hidden, d), std=0.02)),
        fc2_b=t(np.zeros(d, np.float32)),
    )


@dataclass
class BackboneParams:
    cfg: ViTConfig
    patch_w: Tensor
    patch_b: Tensor
    cls: Tensor
    pos: Tensor
    blocks: list[BlockParams]
    frozen: bool = False

    def named_tensors(self):
        yield "backbone.patch.weight", self.patch_w
        yield "backbone.patch.bias", self.patch_b
        yield "backbone.cls", self.cls
        yield "backbone.pos", self.pos
        for i, blk in enumerate(self.blocks):
            for suffix, tensor in blk.named():
                yield f"backbone.layer{i}.{suffix}", tensor

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def freeze(self) -> "BackboneParams":
        for t in self.tensors():
            t.requires_grad = False
            t.grad = None
        self.frozen = True
        return self

    def unfreeze(self) -> "BackboneParams":
        for t in self.tensors():
            t.requires_grad = True
        self.frozen = False
        return self

    def copy(self, trainable: bool) -> "BackboneParams":
        """Deep copy with independent storage."""
        def dup(t: Tensor) -> Tensor:
            return Tensor(t.data.copy(), requires_grad=trainable)

        blocks = [
            BlockParams(**{attr: dup(getattr(b, attr)) for _, attr in _BLOCK_FIELDS})
            for b in self.blocks
        ]
        return BackboneParams(
            cfg=self.cfg,
            patch_w=dup(self.patch_w),
            patch_b=dup(self.patch_b),
            cls=dup(self.cls),
            pos=dup(self.pos),
            blocks=blocks,
            frozen=not trainable,
        )


@dataclass
class FeatureStack:
    """Per-layer token matrices; entry i is the output of block i."""

    layers: list[Tensor]
    h: int
    w: int

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, i: int) -> Tensor:
        return self.layers[i]

    def __iter__(self):
        return iter(self.layers)


def init_backbone(cfg: ViTConfig, seed_or_rng) -> BackboneParams:
    rng = seed_or_rng if isinstance(seed_or_rng, Rng) else Rng(int(seed_or_rng))
    pdim = cfg.patch * cfg.patch * 3
    params = BackboneParams(
        cfg=cfg,
        patch_w=Tensor(rng.normal((pdim, cfg.D), std=0.02), requires_grad=True),
        patch_b=Tensor(np.zeros(cfg.D, np.float32), requires_grad=True),
        cls=Tensor(rng.normal((1, cfg.D), std=0.02), requires_grad=True),
        pos=Tensor(rng.normal((cfg.tokens, cfg.D), std=0.02), requires_grad=True),
        blocks=[init_block(cfg, rng) for _ in range(cfg.L)],
    )
    return params


# -- forward passes -----------------------------------------------------------


def patch_embed(image, params: BackboneParams, cfg: ViTConfig) -> Tensor:
    """(H, W, 3) image -> (h*w + 1, D) tokens with class token at row 0."""
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
    expected = (cfg.H, cfg.W, 3)
    if img.shape != expected:
        raise ValueError(f"patch_embed: expected image shape {expected}, got {img.shape}")
    p, h, w = cfg.patch, cfg.h, cfg.w
    patches = img.reshape(h, p, w, p, 3).transpose(0, 2, 1, 3, 4).reshape(h * w, p * p * 3)
    tok = linear(Tensor(patches), params.patch_w, params.patch_b)
    tok = concat([params.cls, tok], axis=0)
    return add(tok, params.pos)


def _attention(x: Tensor, blk: BlockParams, heads: int) -> Tensor:
    n, d = x.shape
    dh = d // heads
    qkv = linear(x, blk.qkv_w, blk.qkv_b)
    qkv = permute(reshape(qkv, (n, 3, heads, dh)), (1, 2, 0, 3))  # (3, heads, n, dh)
    q = reshape(narrow(qkv, 0, 0, 1), (heads, n, dh))
    k = reshape(narrow(qkv, 0, 1, 1), (heads, n, dh))
    v = reshape(narrow(qkv, 0, 2, 1), (heads, n, dh))
    att = mul(matmul(q, permute(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    att = softmax(att, axis=-1)
    ctx = reshape(permute(matmul(att, v), (1, 0, 2)), (n, d))
    return linear(ctx, blk.out_w, blk.out_b)


def transformer_block(x: Tensor, blk: BlockParams, heads: int) -> Tensor:
    """Pre-norm block: x + MHSA(LN(x)), then + MLP(LN(.))."""
    x = add(x, _attention(layernorm(x, blk.ln1_w, blk.ln1_b), blk, heads))
    hidden = linear(layernorm(x, blk.ln2_w, blk.ln2_b), blk.fc1_w, blk.fc1_b)
    return add(x, linear(gelu(hidden), blk.fc2_w, blk.fc2_b))


def forward_collect(image, params: BackboneParams, cfg: ViTConfig) -> FeatureStack:
    """Run the full backbone, recording the output of every block."""
    x = patch_embed(image, params, cfg)
    outs: list[Tensor] = []
    for blk in params.blocks:
        x = transformer_block(x, blk, cfg.heads)
        outs.append(x)
    return FeatureStack(outs, cfg.h, cfg.w)


# -- checkpointing ------------------------------------------------------------

_META_NAME = "backbone.meta"


def _meta_array(params: BackboneParams) -> np.ndarray:
    c = params.cfg
    return np.array(
        [c.L, c.D, c.heads, c.patch, c.H, c.W, c.mlp_ratio, 1.0 if params.frozen else 0.0],
        dtype=np.float32,
    )


def expected_names(cfg: ViTConfig) -> list[str]:
    names = ["backbone.patch.weight", "backbone.patch.bias", "backbone.cls", "backbone.pos"]
    for i in range(cfg.L):
        names.extend(f"backbone.layer{i}.{suffix}" for suffix, _ in _BLOCK_FIELDS)
    return names


def save_checkpoint(params: BackboneParams, path) -> None:
    tensors = dict(params.named_tensors())
    tensors[_META_NAME] = _meta_array(params)
    vspt.save_tensors(path, tensors)


def checkpoint_bytes(params: BackboneParams) -> bytes:
    """In-memory serialization; used for checksums and byte-stability checks."""
    tensors = dict(params.named_tensors())
    tensors[_META_NAME] = _meta_array(params)
    return vspt.dump_bytes(tensors)


def load_checkpoint(path) -> BackboneParams:
    tensors = vspt.load_tensors(path)
    if _META_NAME not in tensors:
        raise vspt.VsptError(f"backbone checkpoint: missing tensors ['{_META_NAME}']")
    meta = tensors[_META_NAME]
    cfg = ViTConfig(
        L=int(meta[0]), D=int(meta[1]), heads=int(meta[2]), patch=int(meta[3]),
        H=int(meta[4]), W=int(meta[5]), mlp_ratio=int(meta[6]),
    )
    frozen = bool(meta[7] > 0.5)
    vspt.require(tensors, expected_names(cfg), "backbone checkpoint")

    trainable = not frozen
    get = lambda name: Tensor(tensors[name], requires_grad=trainable)
    blocks = []
    for i in range(cfg.L):
        kwargs = {attr: get(f"backbone.layer{i}.{suffix}") for suffix, attr in _BLOCK_FIELDS}
        blocks.append(BlockParams(**kwargs))
    params = BackboneParams(
        cfg=cfg,
        patch_w=get("backbone.patch.weight"),
        patch_b=get("backbone.patch.bias"),
        cls=get("backbone.cls"),
        pos=get("backbone.pos"),
        blocks=blocks,
        frozen=frozen,
    )
    reference = dict(init_backbone(cfg, Rng(0)).named_tensors())
    for name, t in params.named_tensors():
        want = reference[name].data.shape
        if t.data.shape != want:
            raise vspt.VsptError(
                f"backbone checkpoint: shape mismatch for {name}: expected {want}, got {t.data.shape}"
            )
    return params
