"""Hybrid objective: pixel (BCE), region (IoU), boundary (SSIM) and
semantic (CE) terms, gradient supervision for the outward reference,
multi-stage aggregation and the IoU-only fine-tuning objective."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .model import STAGES, PredictionSet
from .references import stage_gradient_target

EPS = 1e-7


@dataclass
class LossConfig:
    lambda_bce: float = 30.0
    lambda_iou: float = 0.5
    lambda_ssim: float = 10.0
    lambda_ce: float = 5.0
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_c1: float = 0.01**2
    ssim_c2: float = 0.03**2
    stage_weights: dict[int, float] = field(default_factory=lambda: {3: 1.0, 2: 1.0, 1: 1.0})
    gradient_weight: float = 1.0
    # dilation radius at the deepest supervised stage; doubles per shallower stage
    mask_radius: int = 2
    # "pred": mask from the stage prediction; "gt": from the downsampled ground truth
    mask_source: str = "pred"
    ssim_on_stages: bool = True
    finetune: bool = False

    def validate(self) -> None:
        for name in ("lambda_bce", "lambda_iou", "lambda_ssim", "lambda_ce", "gradient_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ValueError("ssim_window must be odd and >= 3")
        if self.mask_source not in ("pred", "gt"):
            raise ValueError("mask_source must be 'pred' or 'gt'")
        if any(w < 0 for w in self.stage_weights.values()):
            raise ValueError("stage weights must be >= 0")

    def radius(self, stage: int) -> int:
        return self.mask_radius * 2 ** (3 - stage)

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown loss config keys: {sorted(unknown)}")
        d = dict(d)
        if "stage_weights" in d:
            d["stage_weights"] = {int(k): float(v) for k, v in d["stage_weights"].items()}
        return cls(**d)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    terms: dict[str, float]  # unweighted: bce, iou, ssim (final map), ce, grad (summed over stages)
    stages: dict[int, dict[str, float]]  # unweighted bce/iou/ssim per intermediate stage
    weights: dict[str, float]

    def recompute(self) -> float:
        w = self.weights
        t = self.terms
        total = w["bce"] * t["bce"] + w["iou"] * t["iou"] + w["ssim"] * t["ssim"] + w["ce"] * t["ce"]
        total += w["grad"] * t["grad"]
        for s, st in self.stages.items():
            total += w[f"stage{s}"] * (w["bce"] * st["bce"] + w["iou"] * st["iou"] + w["ssim"] * st["ssim"])
        return total

    def to_dict(self) -> dict:
        return {
            "total": self.total.item(),
            "terms": dict(self.terms),
            "stages": {str(k): dict(v) for k, v in self.stages.items()},
        }


def _check_shapes(pred, gt):
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(gt.shape)} differ in shape")


def bce_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    _check_shapes(pred, gt)
    p = pred.clamp(EPS, 1 - EPS)
    return -(gt * torch.log(p) + (1 - gt) * torch.log(1 - p)).mean()


def iou_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """1 - soft IoU, averaged over the batch for N x 1 x H x W inputs."""
    _check_shapes(pred, gt)
    dims = tuple(range(1, pred.dim())) if pred.dim() == 4 else tuple(range(pred.dim()))
    inter = (pred * gt).sum(dims)
    union = (pred + gt - pred * gt).sum(dims)
    return (1 - (inter + EPS) / (union + EPS)).mean()


def _gaussian_window(size: int, sigma: float, like: torch.Tensor) -> torch.Tensor:
    x = torch.arange(size, dtype=like.dtype, device=like.device) - size // 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return (g[:, None] * g[None, :])[None, None]


def ssim_map(x: torch.Tensor, y: torch.Tensor, window=11, sigma=1.5, c1=0.01**2, c2=0.03**2) -> torch.Tensor:
    """Per-pixel SSIM over Gaussian-weighted windows, reflect-padded to keep size."""
    while x.dim() < 4:
        x, y = x[None], y[None]
    pad = window // 2
    mode = "reflect" if min(x.shape[-2:]) > pad else "replicate"
    xp = F.pad(x, (pad,) * 4, mode=mode)
    yp = F.pad(y, (pad,) * 4, mode=mode)
    k = _gaussian_window(window, sigma, x).expand(x.shape[1], 1, window, window)
    groups = x.shape[1]
    mu_x = F.conv2d(xp, k, groups=groups)
    mu_y = F.conv2d(yp, k, groups=groups)
    sxx = F.conv2d(xp * xp, k, groups=groups) - mu_x**2
    syy = F.conv2d(yp * yp, k, groups=groups) - mu_y**2
    sxy = F.conv2d(xp * yp, k, groups=groups) - mu_x * mu_y
    return ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2))


def ssim_loss(pred: torch.Tensor, gt: torch.Tensor, cfg: LossConfig | None = None) -> torch.Tensor:
    _check_shapes(pred, gt)
    cfg = cfg or LossConfig()
    return 1 - ssim_map(pred, gt, cfg.ssim_window, cfg.ssim_sigma, cfg.ssim_c1, cfg.ssim_c2).mean()


def ce_loss(logits: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    if logits.dim() == 1:
        logits, label = logits[None], torch.as_tensor(label).reshape(1)
    return F.cross_entropy(logits, label)


def gradient_loss(pred_grad: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return bce_loss(pred_grad, target)


def stage_targets(gt: torch.Tensor, size) -> tuple[torch.Tensor, torch.Tensor]:
    """(binary target for BCE/IoU, soft target for SSIM) at ``size``."""
    if tuple(gt.shape[-2:]) == tuple(size):
        return gt, gt
    soft = F.interpolate(gt, size=size, mode="area")
    return (soft >= 0.5).to(gt.dtype), soft


def _map_terms(pred, hard, soft, cfg, with_ssim=True):
    bce = bce_loss(pred, hard)
    iou = iou_loss(pred, hard)
    ssim = ssim_loss(pred, soft, cfg) if with_ssim else pred.new_zeros(())
    return bce, iou, ssim


def hybrid_loss(preds: PredictionSet, targets: dict, cfg: LossConfig) -> LossBreakdown:
    """``targets``: ``gt`` (N x 1 x H x W), ``label`` (N), ``grad`` (full-resolution
    gradient map, N x 1 x H x W; required when gradient supervision is on)."""
    gt = targets["gt"]
    w = {
        "bce": cfg.lambda_bce,
        "iou": cfg.lambda_iou,
        "ssim": cfg.lambda_ssim,
        "ce": cfg.lambda_ce,
        "grad": cfg.gradient_weight,
    }
    bce, iou, ssim = _map_terms(preds.m, gt, gt, cfg)
    ce = ce_loss(preds.logits, targets["label"])
    total = w["bce"] * bce + w["iou"] * iou + w["ssim"] * ssim + w["ce"] * ce

    stages = {}
    for s in STAGES:
        ws = cfg.stage_weights.get(s, 0.0)
        w[f"stage{s}"] = ws
        if ws == 0:
            continue
        if s not in preds.intermediates:
            raise ValueError(f"stage weight for stage {s} is nonzero but no intermediate map was predicted")
        m = preds.intermediates[s]
        hard, soft = stage_targets(gt, m.shape[-2:])
        sb, si, ss = _map_terms(m, hard, soft, cfg, cfg.ssim_on_stages)
        total = total + ws * (w["bce"] * sb + w["iou"] * si + w["ssim"] * ss)
        stages[s] = {"bce": sb.item(), "iou": si.item(), "ssim": ss.item()}

    grad_total = gt.new_zeros(())
    if cfg.gradient_weight > 0 and preds.gradients:
        if "grad" not in targets:
            raise ValueError("gradient supervision needs targets['grad']")
        for s, g_hat in preds.gradients.items():
            if cfg.mask_source == "gt" or cfg.stage_weights.get(s, 0.0) == 0:
                # an unsupervised stage head gives no usable mask
                ref = stage_targets(gt, g_hat.shape[-2:])[1]
            else:
                ref = preds.intermediates[s]
            target = stage_gradient_target(targets["grad"], ref, cfg.radius(s))
            grad_total = grad_total + gradient_loss(g_hat, target)
        total = total + w["grad"] * grad_total

    terms = {"bce": bce.item(), "iou": iou.item(), "ssim": ssim.item(), "ce": ce.item(), "grad": grad_total.item()}
    return LossBreakdown(total=total, terms=terms, stages=stages, weights=w)


def finetune_loss(preds: PredictionSet, targets: dict) -> torch.Tensor:
    return iou_loss(preds.m, targets["gt"])
