"""Toy segmentation training in three regimes, plus pretext pretraining,
mIoU, and wall-clock step benchmarking.

Regimes
-------
* ``vitsplit``     — frozen backbone; trainable task head (reduced lr), prior
                     head, fusion net, segmentation head, and optionally the
                     sparse selection gate.  Ablation variants drop the prior
                     path (``task_only``) or replace fusion by addition
                     (``task_prior_add``).
* ``full_ft``      — every backbone weight plus the segmentation head.
* ``linear_probe`` — segmentation head only, reading frozen last-layer features.

Targets are the class masks subsampled to the logit grid (the segmentation
head upsamples the token grid by 4, i.e. one logit per patch/4 pixels).
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass

import numpy as np

from . import adapter as ad
from .data import ToySegSample, make_toy_dataset
from .optim import AdamW
from .rng import Rng, derive_seed
from .tensor import Tensor, add, backward, cross_entropy_mean, linear, mul, narrow, reshape, sub
from .vit import (
    BackboneParams,
    FeatureStack,
    ViTConfig,
    checkpoint_bytes,
    forward_collect,
    init_backbone,
)

REGIMES = ("vitsplit", "full_ft", "linear_probe")
COMPONENT_MODES = ("full", "task_only", "task_prior_add")
SELECTIONS = ("uniform", "sparse_gate")


class _FrozenFeatureCache:
    """Per-image layer stacks of a frozen backbone, computed once and reused.

    Frozen weights make every backbone forward a pure function of the image,
    so repeated epochs can skip it entirely — the usual frozen-encoder
    optimization.  Keyed by image bytes; only valid while the backbone's
    weights stay untouched (trainable regimes must not use this).
    """

    def __init__(self, backbone: BackboneParams):
        if not backbone.frozen:
            raise ValueError("feature cache requires a frozen backbone")
        self._store: dict[bytes, list[np.ndarray]] = {}

    def stack_for(self, image, backbone: BackboneParams, cfg: ViTConfig):
        raw = image.data if isinstance(image, Tensor) else np.asarray(image, np.float32)
        key = hashlib.sha1(np.ascontiguousarray(raw).tobytes()).digest()
        hit = self._store.get(key)
        if hit is not None:
            return FeatureStack([Tensor(a) for a in hit], cfg.h, cfg.w)
        stack = forward_collect(image, backbone, cfg)
        self._store[key] = [t.data for t in stack]
        return stack


@dataclass
class TrainConfig:
    regime: str = "vitsplit"
    base_lr: float = 2e-4
    weight_decay: float = 1e-2
    task_head_lr_mult: float = 0.1
    batch: int = 2
    steps: int = 100
    K_t: int = 3
    K_p: int = 4
    b: int = 2
    seed: int = 0
    selection: str = "uniform"
    components: str = "full"
    num_classes: int = 5

    def validate(self, vit_cfg: ViTConfig) -> None:
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; choose from {REGIMES}")
        if self.selection not in SELECTIONS:
            raise ValueError(f"unknown selection {self.selection!r}; choose from {SELECTIONS}")
        if self.components not in COMPONENT_MODES:
            raise ValueError(f"unknown components mode {self.components!r}")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if not 0.0 < self.task_head_lr_mult <= 1.0:
            raise ValueError("task_head_lr_mult must lie in (0, 1]")
        if self.batch < 1:
            raise ValueError("batch must be at least 1")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if vit_cfg.patch % 4:
            raise ValueError("patch size must be divisible by 4 to align logits with masks")
        if self.regime == "vitsplit":
            if not 1 <= self.K_t <= vit_cfg.L - 1:
                raise ValueError(f"K_t={self.K_t} outside [1, {vit_cfg.L - 1}]")
            if self.selection == "uniform":
                ad.uniform_select(vit_cfg.L, self.b, self.K_p)  # raises when invalid
            elif self.K_p > vit_cfg.L:
                raise ValueError(f"K_p={self.K_p} exceeds layer count {vit_cfg.L}")


# -- models ---------------------------------------------------------------------


class VitSplitSegModel:
    """Frozen backbone + split adapter + segmentation head."""

    def __init__(self, backbone: BackboneParams, cfg: TrainConfig, rng: Rng):
        if not backbone.frozen:
            raise ValueError("vitsplit regime requires a frozen backbone")
        self.backbone = backbone
        self.cfg = cfg
        vc = backbone.cfg
        self.task = ad.task_head_init(backbone, cfg.K_t)
        self.plan = None
        self.gate = None
        self.prior = None
        self.fusion = None
        if cfg.components != "task_only":
            if cfg.selection == "uniform":
                self.plan = ad.uniform_select(vc.L, cfg.b, cfg.K_p)
            else:
                self.gate = ad.init_gate(vc.L, cfg.K_p, rng)
            self.prior = ad.init_conv_head(cfg.K_p * vc.D, vc.D, rng)
            if cfg.components == "full":
                self.fusion = ad.init_conv_head(2 * vc.D, vc.D, rng)
        self.seg = ad.init_seg_head(vc.D, cfg.num_classes, rng)
        self._cache = _FrozenFeatureCache(backbone)

    def logits(self, image) -> Tensor:
        vc = self.backbone.cfg
        stack = self._cache.stack_for(image, self.backbone, vc)
        f_in = stack[vc.L - self.cfg.K_t - 1]
        f_task = ad.task_head_forward(f_in, self.task, vc.heads, vc.h, vc.w)
        if self.cfg.components == "task_only":
            fused = f_task
        else:
            if self.plan is not None:
                prior_in = ad.gather_prior(stack, self.plan)
            else:
                prior_in = ad.sparse_gate_forward(stack, self.gate)
            f_prior = ad.prior_head_forward(prior_in, self.prior)
            if self.cfg.components == "task_prior_add":
                fused = add(f_task, f_prior)
            else:
                fused = ad.fusion_forward(f_prior, f_task, self.fusion)
        return ad.seg_transform(fused, self.seg)

    def param_groups(self) -> list[dict]:
        task_params = [t for blk in self.task for t in blk.tensors()]
        rest = list(self.seg.tensors())
        if self.prior is not None:
            rest.extend(self.prior.tensors())
        if self.fusion is not None:
            rest.extend(self.fusion.tensors())
        if self.gate is not None:
            rest.append(self.gate.G)
        return [
            {"name": "task_head", "params": task_params, "lr_mult": self.cfg.task_head_lr_mult},
            {"name": "adapter", "params": rest, "lr_mult": 1.0},
        ]


class LastLayerSegModel:
    """Segmentation head over last-layer features; backbone frozen or trained."""

    def __init__(self, backbone: BackboneParams, cfg: TrainConfig, rng: Rng, train_backbone: bool):
        if train_backbone:
            self.backbone = backbone.copy(trainable=True)
        else:
            if not backbone.frozen:
                raise ValueError("linear_probe regime requires a frozen backbone")
            self.backbone = backbone
        self.cfg = cfg
        self.train_backbone = train_backbone
        self.seg = ad.init_seg_head(backbone.cfg.D, cfg.num_classes, rng)
        self._cache = None if train_backbone else _FrozenFeatureCache(self.backbone)

    def logits(self, image) -> Tensor:
        vc = self.backbone.cfg
        if self._cache is not None:
            stack = self._cache.stack_for(image, self.backbone, vc)
        else:
            stack = forward_collect(image, self.backbone, vc)
        last = stack[vc.L - 1]
        n, d = last.shape
        fmap = reshape(narrow(last, 0, 1, n - 1), (vc.h, vc.w, d))
        return ad.seg_transform(fmap, self.seg)

    def param_groups(self) -> list[dict]:
        params = list(self.seg.tensors())
        if self.train_backbone:
            params = self.backbone.tensors() + params
        return [{"name": "model", "params": params, "lr_mult": 1.0}]


def build_model(cfg: TrainConfig, backbone: BackboneParams, rng: Rng | None = None):
    cfg.validate(backbone.cfg)
    rng = rng or Rng(derive_seed(cfg.seed, 29))
    if cfg.regime == "vitsplit":
        return VitSplitSegModel(backbone, cfg, rng)
    return LastLayerSegModel(backbone, cfg, rng, train_backbone=(cfg.regime == "full_ft"))


def trainable_parameter_count(model) -> int:
    return sum(p.size for g in model.param_groups() for p in g["params"])


# -- metrics ----------------------------------------------------------------------


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    """Mean IoU over the classes present in the ground truth."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    scores = []
    for c in np.unique(gt):
        p, g = pred == c, gt == c
        union = np.logical_or(p, g).sum()
        inter = np.logical_and(p, g).sum()
        scores.append(inter / union)
    return float(np.mean(scores))


def _target_for(sample: ToySegSample, sub: int) -> np.ndarray:
    return sample.mask[::sub, ::sub]


def sample_loss(model, sample: ToySegSample) -> Tensor:
    """Mean per-pixel cross-entropy at the logit resolution."""
    vc = model.backbone.cfg
    logits = model.logits(sample.image)
    lh, lw, k = logits.shape
    sub = vc.H // lh
    target = _target_for(sample, sub)
    if target.shape != (lh, lw):
        raise ValueError(f"target grid {target.shape} does not match logits {lh}x{lw}")
    return cross_entropy_mean(reshape(logits, (lh * lw, k)), target.reshape(-1))


def batch_loss(model, samples: list[ToySegSample]) -> Tensor:
    acc = sample_loss(model, samples[0])
    for s in samples[1:]:
        acc = add(acc, sample_loss(model, s))
    return mul(acc, 1.0 / len(samples)) if len(samples) > 1 else acc


def predict(model, sample: ToySegSample) -> np.ndarray:
    return np.argmax(model.logits(sample.image).data, axis=-1)


def evaluate_miou(model, samples: list[ToySegSample], num_classes: int) -> float:
    """Pooled mIoU over a sample list (maps stacked into one tall image)."""
    vc = model.backbone.cfg
    preds, gts = [], []
    for s in samples:
        pred = predict(model, s)
        sub = vc.H // pred.shape[0]
        preds.append(pred)
        gts.append(_target_for(s, sub))
    return miou(np.concatenate(preds, axis=0), np.concatenate(gts, axis=0), num_classes)


# -- training ---------------------------------------------------------------------


@dataclass
class RunReport:
    regime: str
    selection: str
    components: str
    seed: int
    steps: int
    batch: int
    base_lr: float
    weight_decay: float
    task_head_lr_mult: float
    trainable_params: int
    loss_curve: list[float]
    final_miou: float
    backbone_checksum_before: str
    backbone_checksum_after: str
    mean_step_ms: float = 0.0
    std_step_ms: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        out = {
            "regime": self.regime,
            "selection": self.selection,
            "components": self.components,
            "seed": self.seed,
            "steps": self.steps,
            "batch": self.batch,
            "base_lr": self.base_lr,
            "weight_decay": self.weight_decay,
            "task_head_lr_mult": self.task_head_lr_mult,
            "trainable_params": self.trainable_params,
            "final_miou": self.final_miou,
            "backbone_checksum_before": self.backbone_checksum_before,
            "backbone_checksum_after": self.backbone_checksum_after,
            "loss_curve": self.loss_curve,
        }
        if include_timing:
            # Wall-clock noise is never part of the deterministic report body.
            out["timing"] = {"mean_step_ms": self.mean_step_ms, "std_step_ms": self.std_step_ms}
        return out

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2) + "\n"


def _checksum(backbone: BackboneParams) -> str:
    return hashlib.sha256(checkpoint_bytes(backbone)).hexdigest()


def split_dataset(dataset: list[ToySegSample]) -> tuple[list[ToySegSample], list[ToySegSample]]:
    """Deterministic split: last 20% held out for evaluation."""
    if len(dataset) < 5:
        raise ValueError("dataset too small to hold out 20%")
    cut = len(dataset) - len(dataset) // 5
    return dataset[:cut], dataset[cut:]


def adapter_state(model: VitSplitSegModel) -> dict[str, Tensor]:
    """Canonically named adapter tensors for serialization."""
    state: dict[str, Tensor] = {}
    for i, blk in enumerate(model.task):
        for suffix, t in blk.named():
            state[f"task.layer{i}.{suffix}"] = t
    if model.prior is not None:
        for suffix, t in model.prior.named():
            state[f"prior.{suffix}"] = t
    if model.fusion is not None:
        for suffix, t in model.fusion.named():
            state[f"fusion.{suffix}"] = t
    if model.gate is not None:
        state["gate.G"] = model.gate.G
    for suffix, t in model.seg.named():
        state[f"head.seg.{suffix}"] = t
    return state


def train_model(cfg: TrainConfig, backbone: BackboneParams,
                dataset: list[ToySegSample]) -> tuple[object, RunReport]:
    """Run the configured regime; returns (model, report).

    The passed backbone is never mutated: ``full_ft`` trains a copy (the
    report's checksums refer to the copy), frozen regimes leave it untouched.
    """
    cfg.validate(backbone.cfg)
    train_set, heldout = split_dataset(dataset)
    if any(int(s.mask.max()) >= cfg.num_classes for s in dataset):
        raise ValueError("dataset contains class ids beyond num_classes")

    model = build_model(cfg, backbone, Rng(derive_seed(cfg.seed, 29)))
    opt = AdamW(model.param_groups(), lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    checksum_before = _checksum(model.backbone)

    batch_rng = Rng(derive_seed(cfg.seed, 77))
    losses: list[float] = []
    times: list[float] = []
    for _ in range(cfg.steps):
        idxs = batch_rng.randint(0, len(train_set), (cfg.batch,))
        t0 = time.perf_counter()
        loss = batch_loss(model, [train_set[int(i)] for i in idxs])
        backward(loss)
        opt.step()
        opt.zero_grad()
        times.append((time.perf_counter() - t0) * 1e3)
        losses.append(float(loss.data))

    report = RunReport(
        regime=cfg.regime,
        selection=cfg.selection,
        components=cfg.components,
        seed=cfg.seed,
        steps=cfg.steps,
        batch=cfg.batch,
        base_lr=cfg.base_lr,
        weight_decay=cfg.weight_decay,
        task_head_lr_mult=cfg.task_head_lr_mult,
        trainable_params=trainable_parameter_count(model),
        loss_curve=losses,
        final_miou=evaluate_miou(model, heldout, cfg.num_classes),
        backbone_checksum_before=checksum_before,
        backbone_checksum_after=_checksum(model.backbone),
        mean_step_ms=float(np.mean(times)),
        std_step_ms=float(np.std(times)),
    )
    return model, report


def train(cfg: TrainConfig, backbone: BackboneParams, dataset: list[ToySegSample]) -> RunReport:
    return train_model(cfg, backbone, dataset)[1]


# -- pretext pretraining ------------------------------------------------------------


def _to_patches(img: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    p, h, w = cfg.patch, cfg.h, cfg.w
    return img.reshape(h, p, w, p, 3).transpose(0, 2, 1, 3, 4).reshape(h * w, p * p * 3)


def _from_patches(patches: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    p, h, w = cfg.patch, cfg.h, cfg.w
    return patches.reshape(h, w, p, p, 3).transpose(0, 2, 1, 3, 4).reshape(cfg.H, cfg.W, 3)


def pretrain_backbone(cfg: ViTConfig, steps: int, seed: int, *, batch: int = 2,
                      mask_ratio: float = 0.5, lr: float = 1e-3, data_n: int = 32,
                      record: list | None = None) -> BackboneParams:
    """Masked-patch reconstruction pretext; returns a frozen backbone.

    Random patches are zeroed in the input image and a throwaway linear
    decoder must reconstruct their original pixels from the final-layer
    tokens.  Deterministic in (cfg, steps, seed).
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    params = init_backbone(cfg, Rng(derive_seed(seed, 11)))
    dec_rng = Rng(derive_seed(seed, 17))
    dec_w = Tensor(dec_rng.normal((cfg.D, cfg.patch * cfg.patch * 3), std=0.02), requires_grad=True)
    dec_b = Tensor(np.zeros(cfg.patch * cfg.patch * 3, np.float32), requires_grad=True)
    images = [s.image.data for s in make_toy_dataset(data_n, cfg.H, cfg.W, 5, derive_seed(seed, 5))]
    patches = [_to_patches(img, cfg) for img in images]

    opt = AdamW([{"params": params.tensors() + [dec_w, dec_b], "lr_mult": 1.0}],
                lr=lr, weight_decay=0.0)
    rng = Rng(derive_seed(seed, 23))
    hw = cfg.h * cfg.w
    pdim = cfg.patch * cfg.patch * 3

    for _ in range(steps):
        terms = []
        for i in rng.randint(0, len(images), (batch,)):
            i = int(i)
            zeroed = rng.uniform((hw,)) < mask_ratio
            if not zeroed.any():
                zeroed[int(rng.randint(0, hw))] = True
            masked = patches[i].copy()
            masked[zeroed] = 0.0
            stack = forward_collect(_from_patches(masked, cfg), params, cfg)
            tokens = narrow(stack[cfg.L - 1], 0, 1, hw)
            recon = linear(tokens, dec_w, dec_b)
            diff = sub(recon, Tensor(patches[i]))
            weights = np.zeros((hw, pdim), np.float32)
            weights[zeroed] = 1.0
            masked_sq = mul(mul(diff, diff), Tensor(weights))
            terms.append(mul(masked_sq.sum(), 1.0 / (float(zeroed.sum()) * pdim)))
        loss = terms[0] if batch == 1 else mul(_sum_terms(terms), 1.0 / batch)
        backward(loss)
        opt.step()
        opt.zero_grad()
        if record is not None:
            record.append(float(loss.data))

    return params.freeze()


def _sum_terms(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    return acc


# -- benchmarking -------------------------------------------------------------------


def benchmark_step_time(backbone: BackboneParams, dataset: list[ToySegSample],
                        regimes: list[str], *, steps: int = 200, warmup: int = 50,
                        seed: int = 0, K_t: int = 3, K_p: int = 4, b: int = 2,
                        selection: str = "uniform", batch: int = 2,
                        num_classes: int = 5) -> dict[str, dict[str, float]]:
    """Mean/std wall-clock per optimization step, identical data order per regime."""
    if steps < warmup:
        raise ValueError(f"measured steps ({steps}) fewer than warm-up ({warmup})")
    if not regimes:
        raise ValueError("no regimes requested")
    train_set, _ = split_dataset(dataset)
    order_rng = Rng(derive_seed(seed, 777))
    order = order_rng.randint(0, len(train_set), (warmup + steps, batch))

    results: dict[str, dict[str, float]] = {}
    for regime in regimes:
        cfg = TrainConfig(regime=regime, steps=steps, batch=batch, seed=seed,
                          K_t=K_t, K_p=K_p, b=b, selection=selection,
                          num_classes=num_classes)
        model = build_model(cfg, backbone, Rng(derive_seed(seed, 29)))
        opt = AdamW(model.param_groups(), lr=cfg.base_lr, weight_decay=cfg.weight_decay)
        measured: list[float] = []
        for step in range(warmup + steps):
            samples = [train_set[int(i)] for i in order[step]]
            t0 = time.perf_counter()
            loss = batch_loss(model, samples)
            backward(loss)
            opt.step()
            opt.zero_grad()
            elapsed = (time.perf_counter() - t0) * 1e3
            if step >= warmup:
                measured.append(elapsed)
        results[regime] = {
            "mean_ms": float(np.mean(measured)),
            "std_ms": float(np.std(measured)),
            "steps": float(steps),
            "warmup": float(warmup),
        }
    return results
