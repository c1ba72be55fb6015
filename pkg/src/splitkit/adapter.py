"""The split adapter: layer selection, task head, prior head, fusion net.

A frozen backbone exposes one feature matrix per layer.  The adapter taps that
stack twice: a *task head* re-runs trainable copies of the last K_t blocks on
the features just below them, and a *prior head* compresses K_p selected
layers (chosen either by deterministic uniform spacing or by a learnable
sparse gate trained through a straight-through estimator) with a 1x1 conv and
a 3x3 deformable conv.  A fusion net with the same two-conv shape merges both
paths into the final h x w x D map, which downstream transforms reshape for
segmentation, detection-style pyramids, or sequence models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Rng
from .tensor import (
    Tensor,
    add,
    bilinear_gather,
    concat,
    conv2d,
    conv_transpose2d,
    gelu,
    layernorm,
    linear,
    matmul,
    maxpool2x2,
    narrow,
    permute,
    reshape,
    stop_gradient,
    sub,
)
from .vit import BackboneParams, BlockParams, FeatureStack, _BLOCK_FIELDS, transformer_block


# -- layer selection -----------------------------------------------------------


@dataclass(frozen=True)
class SelectionPlan:
    kind: str  # "uniform" | "sparse_gate"
    b: int
    K_p: int
    delta: float
    indices: tuple[int, ...]


def _round_half_away(v: float) -> int:
    return int(np.floor(v + 0.5)) if v >= 0 else -int(np.floor(-v + 0.5))


def uniform_select(L: int, b: int, K_p: int) -> SelectionPlan:
    """Evenly spaced layer indices from b to L-1 inclusive.

    The spacing is delta = (L - b - 1) / (K_p - 1); index i of the plan is
    b + round(i * delta) with rounding half away from zero.  A single sample
    degenerates to {b}.
    """
    if K_p < 1:
        raise ValueError("K_p must be at least 1")
    if not 0 <= b <= L - 1:
        raise ValueError(f"starting index b={b} outside [0, {L - 1}]")
    if K_p > L - b:
        raise ValueError(f"more samples than available layers: K_p={K_p} > L-b={L - b}")
    if K_p >= 2 and b >= L - 1:
        raise ValueError(f"b={b} leaves no span for K_p={K_p} samples")
    if K_p == 1:
        return SelectionPlan("uniform", b, 1, 0.0, (b,))
    delta = (L - b - 1) / (K_p - 1)
    indices = tuple(b + _round_half_away(i * delta) for i in range(K_p))
    return SelectionPlan("uniform", b, K_p, float(delta), indices)


@dataclass
class GateParams:
    G: Tensor  # (L, K_p), learnable
    keep_count: int


def init_gate(L: int, K_p: int, rng: Rng) -> GateParams:
    if K_p > L:
        raise ValueError(f"gate cannot keep K_p={K_p} of only L={L} layers")
    base = rng.normal((L, K_p), std=0.02)
    tie_break = rng.uniform((L, K_p), low=-1e-6, high=1e-6)
    return GateParams(G=Tensor(base + tie_break, requires_grad=True), keep_count=K_p)


def sparsify_gate(values: np.ndarray, keep: int) -> np.ndarray:
    """Per column: keep the `keep` largest entries (ties -> lower index),
    softmax over the kept entries, zero elsewhere.  Pure value computation."""
    L, cols = values.shape
    if keep > L:
        raise ValueError(f"gate cannot keep {keep} of only {L} layers")
    out = np.zeros_like(values)
    for j in range(cols):
        col = values[:, j]
        order = np.argsort(-col, kind="stable")[:keep]
        kept = col[order]
        e = np.exp(kept - kept.max())
        out[order, j] = (e / e.sum(dtype=np.float32)).astype(np.float32)
    return out


def _stack_rows(stack: FeatureStack) -> Tensor:
    """All layers as one (L, h*w*D) matrix, class tokens dropped."""
    h, w = stack.h, stack.w
    rows = []
    for f in stack.layers:
        n, d = f.shape
        patch = narrow(f, 0, 1, n - 1)
        rows.append(reshape(patch, (1, (n - 1) * d)))
    return concat(rows, axis=0)


def sparse_gate_forward(stack: FeatureStack, gate: GateParams) -> Tensor:
    """Gated mixture of all layers per output slot, h x w x (K_p * D).

    Forward uses the sparsified gate values exactly; backward passes the
    gradient w.r.t. the sparsified gate through to G unchanged (the
    straight-through pattern  G_sp + (G - stop_gradient(G)) ).
    """
    L = len(stack)
    if gate.G.shape[0] != L:
        raise ValueError(f"gate has {gate.G.shape[0]} rows for a {L}-layer stack")
    if gate.keep_count > L:
        raise ValueError(f"gate cannot keep {gate.keep_count} of only {L} layers")
    h, w = stack.h, stack.w
    d = stack[0].shape[1]
    k_p = gate.G.shape[1]

    sparse_values = Tensor(sparsify_gate(gate.G.data, gate.keep_count))
    # (G - stop_gradient(G)) is exactly zero forward, identity backward.
    g_ste = add(sparse_values, sub(gate.G, stop_gradient(gate.G)))

    flat = _stack_rows(stack)                      # (L, h*w*D)
    slots = matmul(permute(g_ste, (1, 0)), flat)   # (K_p, h*w*D)
    slots = reshape(slots, (k_p, h * w, d))
    slots = permute(slots, (1, 0, 2))              # (h*w, K_p, D)
    return reshape(slots, (h, w, k_p * d))


def gather_prior(stack: FeatureStack, plan: SelectionPlan) -> Tensor:
    """Concatenate the selected layers along channels -> h x w x (K_p * D)."""
    if plan.kind != "uniform":
        raise ValueError("gather_prior requires a uniform selection plan")
    L = len(stack)
    h, w = stack.h, stack.w
    maps = []
    for i in plan.indices:
        if i >= L:
            raise ValueError(f"selected layer {i} out of range for {L}-layer stack")
        f = stack[i]
        n, d = f.shape
        maps.append(reshape(narrow(f, 0, 1, n - 1), (h, w, d)))
    return concat(maps, axis=2)


# -- task head -------------------------------------------------------------------


def task_head_init(backbone: BackboneParams, K_t: int) -> list[BlockParams]:
    """Trainable deep copies of the last K_t backbone blocks."""
    L = backbone.cfg.L
    if not 1 <= K_t <= L - 1:
        raise ValueError(f"K_t={K_t} outside [1, {L - 1}]")
    copies = []
    for blk in backbone.blocks[L - K_t:]:
        kwargs = {
            attr: Tensor(getattr(blk, attr).data.copy(), requires_grad=True)
            for _, attr in _BLOCK_FIELDS
        }
        copies.append(BlockParams(**kwargs))
    return copies


def task_head_forward(f_in: Tensor, task_blocks: list[BlockParams], heads: int,
                      h: int, w: int) -> Tensor:
    """Apply the copied blocks, drop the class token, reshape to h x w x D."""
    n, d = f_in.shape
    if n != h * w + 1:
        raise ValueError(f"task head input has {n} tokens, expected {h * w + 1}")
    x = f_in
    for blk in task_blocks:
        x = transformer_block(x, blk, heads)
    return reshape(narrow(x, 0, 1, n - 1), (h, w, d))


# -- deformable convolution --------------------------------------------------------

_TAPS = tuple((dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1))


def deformable_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None,
                      offset_w: Tensor, offset_b: Tensor | None) -> Tensor:
    """3x3 deformable convolution, stride 1, padding 1.

    A standard 3x3 conv of the input predicts 18 offset channels, ordered
    (dy, dx) per kernel tap in row-major tap order.  Each tap then samples the
    input bilinearly at (p + tap + offset) with zero padding outside the map.
    With zero offsets this reduces exactly to a standard padded 3x3 conv.
    """
    if weight.shape[:2] != (3, 3) or offset_w.shape[:2] != (3, 3):
        raise ValueError("deformable_conv2d supports only 3x3 kernels")
    H, W, cin = x.shape
    if weight.shape[2] != cin or offset_w.shape[3] != 18:
        raise ValueError(
            f"deformable_conv2d: weight {weight.shape} / offsets {offset_w.shape} "
            f"do not match input {x.shape}"
        )
    cout = weight.shape[3]
    offsets = conv2d(x, offset_w, offset_b, stride=1, padding=1)  # (H, W, 18)
    offsets = reshape(offsets, (H * W, 9, 2))
    oy = reshape(narrow(offsets, 2, 0, 1), (H * W * 9,))
    ox = reshape(narrow(offsets, 2, 1, 1), (H * W * 9,))

    # Sample all nine taps in one gather: coordinate index p*9 + k pairs each
    # output position p with tap k, matching the row-major tap order of the
    # kernel when it is flattened to (9 * cin, cout).
    gy, gx = np.meshgrid(np.arange(H, dtype=np.float32), np.arange(W, dtype=np.float32),
                         indexing="ij")
    base_y = np.repeat(gy.ravel(), 9) + np.tile(np.array([t[0] for t in _TAPS], np.float32), H * W)
    base_x = np.repeat(gx.ravel(), 9) + np.tile(np.array([t[1] for t in _TAPS], np.float32), H * W)

    ys = add(oy, Tensor(base_y))
    xs = add(ox, Tensor(base_x))
    sampled = bilinear_gather(x, ys, xs)            # (H*W*9, cin)
    cols = reshape(sampled, (H * W, 9 * cin))
    out = linear(cols, reshape(weight, (9 * cin, cout)), bias)
    return reshape(out, (H, W, cout))


# -- prior head / fusion net -------------------------------------------------------


@dataclass
class ConvHeadParams:
    """1x1 conv -> LayerNorm -> GELU -> 3x3 deformable conv (no residual)."""

    pw_w: Tensor
    pw_b: Tensor
    norm_w: Tensor
    norm_b: Tensor
    offset_w: Tensor
    offset_b: Tensor
    dcn_w: Tensor
    dcn_b: Tensor

    def named(self):
        yield "pw.weight", self.pw_w
        yield "pw.bias", self.pw_b
        yield "norm.weight", self.norm_w
        yield "norm.bias", self.norm_b
        yield "offset.weight", self.offset_w
        yield "offset.bias", self.offset_b
        yield "dcn.weight", self.dcn_w
        yield "dcn.bias", self.dcn_b

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]


def init_conv_head(c_in: int, d: int, rng: Rng) -> ConvHeadParams:
    t = lambda a: Tensor(a, requires_grad=True)
    return ConvHeadParams(
        pw_w=t(rng.normal((1, 1, c_in, d), std=0.02)),
        pw_b=t(np.zeros(d, np.float32)),
        norm_w=t(np.ones(d, np.float32)),
        norm_b=t(np.zeros(d, np.float32)),
        # Zero-initialized offsets: the deformable conv starts as a plain conv.
        offset_w=t(np.zeros((3, 3, d, 18), np.float32)),
        offset_b=t(np.zeros(18, np.float32)),
        dcn_w=t(rng.normal((3, 3, d, d), std=0.02)),
        dcn_b=t(np.zeros(d, np.float32)),
    )


def _conv_head_forward(x: Tensor, p: ConvHeadParams) -> Tensor:
    x = conv2d(x, p.pw_w, p.pw_b)
    x = gelu(layernorm(x, p.norm_w, p.norm_b))
    return deformable_conv2d(x, p.dcn_w, p.dcn_b, p.offset_w, p.offset_b)


def prior_head_forward(f_p: Tensor, params: ConvHeadParams) -> Tensor:
    """Compress the h x w x (K_p * D) prior stack to h x w x D."""
    if f_p.shape[2] != params.pw_w.shape[2]:
        raise ValueError(
            f"prior head expects {params.pw_w.shape[2]} channels, got {f_p.shape[2]}"
        )
    return _conv_head_forward(f_p, params)


def fusion_forward(f_prior: Tensor, f_task: Tensor, params: ConvHeadParams) -> Tensor:
    """Fuse the two h x w x D paths: channel concat then the two-conv head."""
    if f_prior.shape != f_task.shape:
        raise ValueError(f"fusion inputs differ: {f_prior.shape} vs {f_task.shape}")
    both = concat([f_prior, f_task], axis=2)
    if both.shape[2] != params.pw_w.shape[2]:
        raise ValueError(
            f"fusion net expects {params.pw_w.shape[2]} channels, got {both.shape[2]}"
        )
    return _conv_head_forward(both, params)


# -- downstream transforms ----------------------------------------------------------


@dataclass
class SegHeadParams:
    """Two stride-2 transposed convs (x4 upsampling) then 1x1 to classes."""

    up1_w: Tensor
    up1_b: Tensor
    up2_w: Tensor
    up2_b: Tensor
    proj_w: Tensor
    proj_b: Tensor

    def named(self):
        yield "deconv1.weight", self.up1_w
        yield "deconv1.bias", self.up1_b
        yield "deconv2.weight", self.up2_w
        yield "deconv2.bias", self.up2_b
        yield "proj.weight", self.proj_w
        yield "proj.bias", self.proj_b

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]


def init_seg_head(d: int, num_classes: int, rng: Rng) -> SegHeadParams:
    c1, c2 = max(d // 2, num_classes), max(d // 4, num_classes)
    t = lambda a: Tensor(a, requires_grad=True)
    return SegHeadParams(
        up1_w=t(rng.normal((2, 2, d, c1), std=0.02)),
        up1_b=t(np.zeros(c1, np.float32)),
        up2_w=t(rng.normal((2, 2, c1, c2), std=0.02)),
        up2_b=t(np.zeros(c2, np.float32)),
        proj_w=t(rng.normal((1, 1, c2, num_classes), std=0.02)),
        proj_b=t(np.zeros(num_classes, np.float32)),
    )


def seg_transform(f_o: Tensor, params: SegHeadParams) -> Tensor:
    """h x w x D fused map -> 4h x 4w x num_classes logits."""
    x = conv_transpose2d(f_o, params.up1_w, params.up1_b, stride=2)
    x = conv_transpose2d(x, params.up2_w, params.up2_b, stride=2)
    return conv2d(x, params.proj_w, params.proj_b)


@dataclass
class DetHeadParams:
    """Independent branches producing the x4 / x2 / x1 / x0.5 pyramid."""

    p4a_w: Tensor
    p4a_b: Tensor
    p4b_w: Tensor
    p4b_b: Tensor
    p2_w: Tensor
    p2_b: Tensor
    p1_w: Tensor
    p1_b: Tensor
    p05_w: Tensor
    p05_b: Tensor

    def tensors(self) -> list[Tensor]:
        return [self.p4a_w, self.p4a_b, self.p4b_w, self.p4b_b, self.p2_w, self.p2_b,
                self.p1_w, self.p1_b, self.p05_w, self.p05_b]


def init_det_head(d: int, rng: Rng) -> DetHeadParams:
    t = lambda a: Tensor(a, requires_grad=True)
    return DetHeadParams(
        p4a_w=t(rng.normal((2, 2, d, d), std=0.02)), p4a_b=t(np.zeros(d, np.float32)),
        p4b_w=t(rng.normal((2, 2, d, d), std=0.02)), p4b_b=t(np.zeros(d, np.float32)),
        p2_w=t(rng.normal((2, 2, d, d), std=0.02)), p2_b=t(np.zeros(d, np.float32)),
        p1_w=t(rng.normal((1, 1, d, d), std=0.02)), p1_b=t(np.zeros(d, np.float32)),
        p05_w=t(rng.normal((1, 1, d, d), std=0.02)), p05_b=t(np.zeros(d, np.float32)),
    )


def det_transform(f_o: Tensor, params: DetHeadParams) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Four-scale pyramid (x4, x2, x1, x0.5), all with D channels."""
    h, w, _ = f_o.shape
    if h % 2 or w % 2:
        raise ValueError(f"det_transform x0.5 branch needs even spatial dims, got {h}x{w}")
    p4 = conv_transpose2d(f_o, params.p4a_w, params.p4a_b, stride=2)
    p4 = conv_transpose2d(p4, params.p4b_w, params.p4b_b, stride=2)
    p2 = conv_transpose2d(f_o, params.p2_w, params.p2_b, stride=2)
    p1 = conv2d(f_o, params.p1_w, params.p1_b)
    p05 = conv2d(maxpool2x2(f_o), params.p05_w, params.p05_b)
    return p4, p2, p1, p05


def seq_transform(f_o: Tensor) -> Tensor:
    """Row-major flatten of the fused map to (h*w) x D; pure reshape."""
    h, w, d = f_o.shape
    return reshape(f_o, (h * w, d))
