"""Training objectives: SSIM/L1 appearance, multi-scale reconstruction for the
three networks, the two self-distillation terms and the total loss."""
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .warp import (SYNTHESIZE_LEFT, SYNTHESIZE_RIGHT, area_downsample, area_downsample_op,
                   to_scale_units, upsample_disparity_full, warp)

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
NUM_SCALES = 4

DIST_MODES = ("disparity", "feature", "none")
RECON_VARIANTS = ("upsample_full", "downsampled_compare")
DIST_PRESETS = {"disparity": 0.1, "feature": 0.005, "none": 0.0}


@dataclass(frozen=True)
class LossWeights:
    lambda_s: float = 1.0
    lambda_b: float = 0.1
    lambda_t: float = 0.0
    alpha: float = 0.85
    lambda_dist: float = 0.0
    dist_mode: str = "none"
    recon_variant: str = "upsample_full"

    def __post_init__(self):
        for name in ("lambda_s", "lambda_b", "lambda_t", "lambda_dist"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.dist_mode not in DIST_MODES:
            raise ValueError(f"dist_mode must be one of {DIST_MODES}, got {self.dist_mode!r}")
        if self.recon_variant not in RECON_VARIANTS:
            raise ValueError(f"recon_variant must be one of {RECON_VARIANTS}, got {self.recon_variant!r}")


@dataclass
class LossBreakdown:
    """Weighted loss components; ``total`` is the differentiable scalar."""
    total: Tensor
    rec_per_scale: List[float]
    rec_per_network: List[float]  # weighted G_s, G_b, G_i contributions
    dist: float = 0.0
    rec: Optional[Tensor] = None

    def record(self, **extra) -> dict:
        rec = {"total": self.total.item(), "rec_s": self.rec_per_network[0],
               "rec_b": self.rec_per_network[1], "rec_t": self.rec_per_network[2],
               "dist": self.dist}
        return {**extra, **rec}


def ssim_map(x: Tensor, y: Tensor) -> Tensor:
    """Per-pixel SSIM on 3x3 windows, shape ``(N, C, H-2, W-2)``."""
    if x.shape != y.shape:
        raise ValueError(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    pool = ad.avg_pool3x3
    mu_x, mu_y = pool(x), pool(y)
    mu_xy = mu_x * mu_y
    mu_xx, mu_yy = mu_x * mu_x, mu_y * mu_y
    sigma_x = pool(x * x) - mu_xx
    sigma_y = pool(y * y) - mu_yy
    sigma_xy = pool(x * y) - mu_xy
    num = (mu_xy * 2.0 + SSIM_C1) * (sigma_xy * 2.0 + SSIM_C2)
    den = (mu_xx + mu_yy + SSIM_C1) * (sigma_x + sigma_y + SSIM_C2)
    return num / den


def ssim_loss(x: Tensor, y: Tensor) -> Tensor:
    """Mean of ``(1 - SSIM) / 2``."""
    return 0.5 - ad.mean(ssim_map(x, y)) * 0.5


def appearance_loss(synth: Tensor, real: Tensor, alpha: float) -> Tensor:
    real = ad.as_tensor(real, dtype=synth.dtype)
    if synth.shape != real.shape:
        raise ValueError(f"appearance_loss: shape mismatch {synth.shape} vs {real.shape}")
    l1 = ad.mean_abs(synth - real)
    if alpha == 0:
        return l1
    if alpha == 1:
        return ssim_loss(synth, real)
    return ssim_loss(synth, real) * alpha + l1 * (1.0 - alpha)


def _branch_images(out, images_left, images_right, weights: LossWeights, n: int):
    """Synthesized/target pairs for each network at scale ``n``.

    Returns ``[(weight, synth, target, alpha), ...]`` for branches with a
    non-zero weight.
    """
    full = weights.recon_variant == "upsample_full"
    alpha = weights.alpha if (n == 0 or not full) else 0.0
    dtype = images_left.dtype
    if full or n == 0:
        I_l, I_r = images_left, images_right
    else:
        I_l = area_downsample(images_left, n)
        I_r = area_downsample(images_right, n)
    I_l_t, I_r_t = Tensor(I_l.astype(dtype)), Tensor(I_r.astype(dtype))

    def disp(seq, name):
        if seq is None:
            raise ValueError(f"reconstruction_loss: branch {name} weighted but not computed")
        d = seq[n]
        if n == 0:
            return d
        return upsample_disparity_full(d, n) if full else to_scale_units(d, n)

    terms = []
    if weights.lambda_s > 0:
        if n == 0:
            synth = out.I_l_hat
        else:
            synth = warp(disp(out.d_l, "G_s"), I_r_t, SYNTHESIZE_LEFT)
        terms.append((0, weights.lambda_s, synth, I_l_t, alpha))
    if weights.lambda_b > 0:
        if out.d_r is None:
            raise ValueError("reconstruction_loss: lambda_b > 0 but the backward branch is absent")
        if n == 0:
            synth = out.I_r_hat
        else:
            src = out.I_l_hat if full else area_downsample_op(out.I_l_hat, n)
            synth = warp(disp(out.d_r, "G_b"), src, SYNTHESIZE_RIGHT)
        terms.append((1, weights.lambda_b, synth, I_r_t, alpha))
    if weights.lambda_t > 0:
        if out.d_l_refined is None:
            raise ValueError("reconstruction_loss: lambda_t > 0 but the refinement branch is absent")
        if n == 0:
            synth = out.I_l_hat_refined
        else:
            synth = warp(disp(out.d_l_refined, "G_i"), I_r_t, SYNTHESIZE_LEFT)
        terms.append((2, weights.lambda_t, synth, I_l_t, alpha))
    return terms


def reconstruction_loss(cycle_out, images_left: np.ndarray, images_right: np.ndarray,
                        weights: LossWeights) -> LossBreakdown:
    """Sum over scales 0..3 of the weighted per-network appearance terms.

    ``upsample_full``: every disparity is upsampled to full resolution before
    warping and scales above 0 use L1 only. ``downsampled_compare``: scale-n
    synthesis happens on the 2^n-downsampled grid against area-downsampled
    targets, SSIM+L1 at every scale.
    """
    if weights.recon_variant == "downsampled_compare":
        h, w = images_left.shape[-2:]
        if min(h, w) >> (NUM_SCALES - 1) < 3:
            raise ValueError(f"downsampled_compare needs H, W >= {3 << (NUM_SCALES - 1)} "
                             f"for SSIM at the coarsest scale, got {h}x{w}")
    per_scale, per_net = [], [0.0, 0.0, 0.0]
    scale_totals = []
    for n in range(NUM_SCALES):
        parts = []
        for idx, lam, synth, target, alpha in _branch_images(cycle_out, images_left, images_right, weights, n):
            term = appearance_loss(synth, target, alpha) * lam
            per_net[idx] += term.item()
            parts.append(term)
        if parts:
            s = ad.add_all(parts)
            scale_totals.append(s)
            per_scale.append(s.item())
        else:
            per_scale.append(0.0)
    if scale_totals:
        total = ad.add_all(scale_totals)
    else:
        total = Tensor(np.zeros((), dtype=images_left.dtype))
    return LossBreakdown(total=total, rec_per_scale=per_scale, rec_per_network=per_net, rec=total)


def disparity_distillation_loss(d_l: Tensor, d_l_ref: Tensor) -> Tensor:
    """``mean |d_l - S(d_l_ref)|``; gradient reaches only ``d_l``."""
    if d_l.shape != d_l_ref.shape:
        raise ValueError(f"disparity distillation: scale mismatch {d_l.shape} vs {d_l_ref.shape}")
    return ad.mean_abs(d_l - ad.stop_gradient(d_l_ref))


def feature_distillation_loss(student_feats: Sequence[Tensor], teacher_feats: Sequence[Tensor],
                              scales=(0, 1, 2)) -> Tensor:
    """Sum over scales of ``mean (xi - S(xi'))^2``."""
    terms = []
    for n in scales:
        s, t = student_feats[n], teacher_feats[n]
        if s.shape != t.shape:
            raise ValueError(f"feature distillation: scale {n} shape mismatch {s.shape} vs {t.shape}")
        terms.append(ad.mean_sq(s - ad.stop_gradient(t)))
    return ad.add_all(terms)


def distillation_loss(cycle_out, weights: LossWeights) -> Optional[Tensor]:
    if weights.dist_mode == "none":
        return None
    if cycle_out.d_l_refined is None:
        raise ValueError("distillation needs the refinement network outputs")
    if weights.dist_mode == "disparity":
        return disparity_distillation_loss(cycle_out.d_l[0], cycle_out.d_l_refined[0])
    return feature_distillation_loss(cycle_out.features, cycle_out.features_refined)


def total_loss(rec: LossBreakdown, dist: Optional[Tensor], weights: LossWeights) -> Tensor:
    """``L_rec + lambda_dist * L_dist`` (the dist term is dropped when mode is none)."""
    if dist is None or weights.dist_mode == "none" or weights.lambda_dist == 0:
        return rec.total
    return rec.total + dist * weights.lambda_dist


def compute_losses(cycle_out, images_left, images_right, weights: LossWeights) -> LossBreakdown:
    """Reconstruction + distillation for one batch, as a single breakdown."""
    rec = reconstruction_loss(cycle_out, images_left, images_right, weights)
    dist = distillation_loss(cycle_out, weights)
    total = total_loss(rec, dist, weights)
    return LossBreakdown(total=total, rec_per_scale=rec.rec_per_scale,
                         rec_per_network=rec.rec_per_network,
                         dist=0.0 if dist is None else dist.item(), rec=rec.total)
