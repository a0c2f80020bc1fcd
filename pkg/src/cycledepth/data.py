"""Synthetic rectified stereo scenes with exact disparity, dataset I/O,
flip augmentation and disparity/depth conversion.

Scenes are fronto-parallel textured rectangles over a textured background,
painted far to near. Each layer's texture lives on the right-view pixel grid
and is linearly interpolated when rendered into the left view, so bilinear
warping of the right image by the true disparity reproduces the left image
exactly (up to 8-bit quantization) wherever the surface is visible in both
views.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .pnm import load_pfm, load_ppm, save_pfm, save_ppm

DEFAULT_BASELINE = 0.54
MAX_DISPARITY_FRACTION = 0.15
MANIFEST = "manifest.json"


@dataclass(frozen=True)
class CameraParams:
    focal_length: float  # pixels
    baseline: float  # meters

    def __post_init__(self):
        if not (self.focal_length > 0 and self.baseline > 0):
            raise ValueError("focal_length and baseline must be positive")

    @property
    def fb(self) -> float:
        return self.focal_length * self.baseline

    @classmethod
    def from_fb(cls, fb: float, baseline: float = DEFAULT_BASELINE) -> "CameraParams":
        return cls(fb / baseline, baseline)


@dataclass
class StereoSample:
    left: np.ndarray  # (3, H, W) float32 in [0, 1]
    right: np.ndarray
    camera: CameraParams
    id: str = ""
    gt_disparity: Optional[np.ndarray] = None  # (H, W), left grid, full-res pixels
    gt_disparity_right: Optional[np.ndarray] = None  # (H, W), right grid
    noc_mask: Optional[np.ndarray] = None  # left pixels visible in both views

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise ValueError(f"left {self.left.shape} and right {self.right.shape} differ")

    @property
    def height(self) -> int:
        return self.left.shape[1]

    @property
    def width(self) -> int:
        return self.left.shape[2]


@dataclass(frozen=True)
class LayerSpec:
    x0: int
    y0: int
    x1: int  # exclusive, left-view columns
    y1: int
    disparity: float
    texture_seed: int


@dataclass(frozen=True)
class SceneSpec:
    width: int
    height: int
    background_disparity: float
    layers: Tuple[LayerSpec, ...] = ()
    seed: int = 0
    fb: Optional[float] = None

    def __post_init__(self):
        if self.background_disparity < 0:
            raise ValueError("background_disparity must be >= 0")
        for layer in self.layers:
            if layer.disparity < self.background_disparity:
                raise ValueError("layer disparities must not be below the background disparity")


FAR_TINT = np.array([0.15, 0.40, 0.90]).reshape(3, 1, 1)
NEAR_TINT = np.array([0.90, 0.50, 0.10]).reshape(3, 1, 1)
NEAR_FLOOR = 0.04


def _nearness(disparity, max_disparity):
    """Log-disparity position in [0, 1]: equal depth ratios get equal cue steps."""
    if disparity <= 0:
        return 0.0
    r = np.log(disparity / (NEAR_FLOOR * max_disparity)) / np.log(1 / NEAR_FLOOR)
    return float(np.clip(r, 0.0, 1.0))


def _texture(rng, height, cols, nearness):
    """Smoothed-noise texture carrying monocular depth cues.

    ``nearness`` in [0, 1] is log-disparity rescaled to the generator's range.
    The surface tint runs from cool (far) to warm (near) and the noise only
    modulates brightness, so chromaticity encodes depth at every pixel. Near
    surfaces also show magnified (coarser) texture.
    """
    tint = (1 - nearness) * FAR_TINT + nearness * NEAR_TINT
    sigma = 0.6 + 1.6 * nearness
    fine = gaussian_filter(rng.standard_normal((height, cols)), sigma=sigma, mode="wrap")
    coarse = gaussian_filter(rng.standard_normal((height, cols)), sigma=3 * sigma, mode="wrap")
    fine /= fine.std() + 1e-12
    coarse /= coarse.std() + 1e-12
    shade = 1.0 + 0.25 * fine + 0.15 * coarse
    return np.clip(tint * shade, 0.0, 1.0)


def _quantize(img):
    return (np.rint(img * 255) / 255).astype(np.float32)


def generate_scene(spec: SceneSpec) -> StereoSample:
    """Render a stereo pair with exact left-frame (and right-frame) disparity."""
    w, h = spec.width, spec.height
    all_d = [spec.background_disparity] + [l.disparity for l in spec.layers]
    margin = int(math.ceil(max(all_d))) + 2
    cols = w + 2 * margin

    left = np.zeros((3, h, w))
    right = np.zeros((3, h, w))
    lab_l = np.zeros((h, w), dtype=np.int64)
    lab_r = np.zeros((h, w), dtype=np.int64)
    disp_l = np.zeros((h, w))
    disp_r = np.zeros((h, w))

    bg = LayerSpec(0, 0, w, h, spec.background_disparity, 0)
    # far to near; stable sort keeps spec order among equal disparities
    order = [bg] + sorted(spec.layers, key=lambda l: l.disparity)
    xs = np.arange(w)
    for idx, layer in enumerate(order):
        d = layer.disparity
        nearness = _nearness(d, MAX_DISPARITY_FRACTION * w)
        tex = _texture(np.random.default_rng([spec.seed, layer.texture_seed, idx]), h, cols, nearness)
        y0, y1 = max(layer.y0, 0), min(layer.y1, h)
        if y1 <= y0:
            continue
        if idx == 0:
            in_l = np.ones(w, dtype=bool)
            in_r = np.ones(w, dtype=bool)
        else:
            in_l = (xs >= layer.x0) & (xs < layer.x1)
            in_r = (xs + d >= layer.x0) & (xs + d < layer.x1)
        # left column x samples the texture at right-grid position x - d
        u = xs - d + margin
        lo = np.floor(u).astype(np.int64)
        frac = u - lo
        left_vals = tex[:, :, lo] * (1 - frac) + tex[:, :, lo + 1] * frac
        right_vals = tex[:, :, margin : margin + w]
        rows = slice(y0, y1)
        left[:, rows][:, :, in_l] = left_vals[:, rows][:, :, in_l]
        right[:, rows][:, :, in_r] = right_vals[:, rows][:, :, in_r]
        lab_l[rows][:, in_l] = idx
        lab_r[rows][:, in_r] = idx
        disp_l[rows][:, in_l] = d
        disp_r[rows][:, in_r] = d

    # visible in both views: the right-image neighbours used by bilinear
    # sampling at x - d belong to the same layer
    src = xs[None, :] - disp_l
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, w - 1)
    ok = (src >= 0) & (src <= w - 1)
    lo_c, hi_c = np.clip(lo, 0, w - 1), np.clip(hi, 0, w - 1)
    rows = np.arange(h)[:, None]
    noc = ok & (lab_r[rows, lo_c] == lab_l) & (lab_r[rows, hi_c] == lab_l)

    fb = spec.fb if spec.fb is not None else MAX_DISPARITY_FRACTION * w
    return StereoSample(
        left=_quantize(left), right=_quantize(right), camera=CameraParams.from_fb(fb),
        id=f"scene{spec.seed}", gt_disparity=disp_l.astype(np.float32),
        gt_disparity_right=disp_r.astype(np.float32), noc_mask=noc,
    )


def random_scene_spec(rng: np.random.Generator, width: int, height: int, seed: int,
                      max_disparity: float, fb: Optional[float] = None) -> SceneSpec:
    """Draw 1-4 foreground layers over a background, all disparities in [0, max_disparity]."""
    bg = rng.uniform(0.05, 0.5) * max_disparity
    layers = []
    for k in range(int(rng.integers(1, 5))):
        lw = int(rng.integers(int(0.2 * width), int(0.5 * width) + 1))
        lh = int(rng.integers(int(0.3 * height), int(0.75 * height) + 1))
        x0 = int(rng.integers(0, width - lw + 1))
        y0 = int(rng.integers(0, height - lh + 1))
        d = rng.uniform(bg + 0.15 * (max_disparity - bg), max_disparity)
        layers.append(LayerSpec(x0, y0, x0 + lw, y0 + lh, float(d), k + 1))
    return SceneSpec(width, height, float(bg), tuple(layers), seed=seed, fb=fb)


def make_dataset(count: int, width: int = 64, height: int = 32, seed: int = 0,
                 max_disparity_fraction: float = MAX_DISPARITY_FRACTION,
                 fb: Optional[float] = None) -> Tuple[List[StereoSample], List[StereoSample]]:
    """Deterministic synthetic dataset split 90/10 into (train, held-out)."""
    if count < 2:
        raise ValueError("count must be >= 2")
    max_d = max_disparity_fraction * width
    if fb is None:
        fb = max_d  # the largest disparity sits at 1 m; 80 m is fb / 80 px
    samples = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        spec = random_scene_spec(rng, width, height, seed=seed * 1_000_003 + i, max_disparity=max_d, fb=fb)
        samples.append(replace(generate_scene(spec), id=f"{i:06d}"))
    n_held = max(1, int(round(count * 0.1)))
    held = set(np.random.default_rng([seed, 7919]).permutation(count)[:n_held].tolist())
    train = [s for i, s in enumerate(samples) if i not in held]
    heldout = [s for i, s in enumerate(samples) if i in held]
    return train, heldout


def augment_flip(sample: StereoSample, coin: bool) -> StereoSample:
    """Mirror both views and swap their roles, keeping the pair rectified.

    The new left view is the mirrored old right view, so the new left-frame
    disparity is the mirrored old right-frame disparity (and vice versa).
    Applying the flip twice gives back the original sample.
    """
    if not coin:
        return sample

    def mirror(a):
        return None if a is None else np.ascontiguousarray(a[..., ::-1])

    return StereoSample(
        left=mirror(sample.right), right=mirror(sample.left), camera=sample.camera, id=sample.id,
        gt_disparity=mirror(sample.gt_disparity_right),
        gt_disparity_right=mirror(sample.gt_disparity),
    )


def disparity_to_depth(disp, camera: CameraParams, min_disp: float = 0.01) -> np.ndarray:
    """``depth = f*b / max(disp, min_disp)`` in meters."""
    if not min_disp > 0:
        raise ValueError(f"min_disp must be > 0, got {min_disp}")
    disp = np.asarray(getattr(disp, "data", disp), dtype=np.float64)
    return camera.fb / np.maximum(disp, min_disp)


def stack_batch(samples: Sequence[StereoSample]):
    """``(left, right, gt)`` as NCHW float32 arrays; gt is ``None`` if any sample lacks it."""
    left = np.stack([s.left for s in samples]).astype(np.float32)
    right = np.stack([s.right for s in samples]).astype(np.float32)
    if all(s.gt_disparity is not None for s in samples):
        gt = np.stack([s.gt_disparity for s in samples])[:, None].astype(np.float32)
    else:
        gt = None
    return left, right, gt


# -- on-disk layout -------------------------------------------------------------

def save_dataset(root, train: Sequence[StereoSample], heldout: Sequence[StereoSample], seed: int) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    samples = list(train) + list(heldout)
    for s in samples:
        save_ppm(root / f"{s.id}_left.ppm", s.left)
        save_ppm(root / f"{s.id}_right.ppm", s.right)
        if s.gt_disparity is not None:
            save_pfm(root / f"{s.id}_disp.pfm", s.gt_disparity)
    cam = samples[0].camera
    manifest = {
        "train": [s.id for s in train],
        "heldout": [s.id for s in heldout],
        "split": {"train": len(train), "heldout": len(heldout)},
        "fb": cam.fb,
        "baseline": cam.baseline,
        "width": samples[0].width,
        "height": samples[0].height,
        "seed": seed,
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n")
    return root


def load_dataset(root):
    """Return ``(train, heldout, manifest)`` from a dataset directory."""
    root = Path(root)
    manifest = json.loads((root / MANIFEST).read_text())
    camera = CameraParams.from_fb(manifest["fb"], manifest.get("baseline", DEFAULT_BASELINE))

    def load(i):
        disp_path = root / f"{i}_disp.pfm"
        return StereoSample(
            left=load_ppm(root / f"{i}_left.ppm"), right=load_ppm(root / f"{i}_right.ppm"),
            camera=camera, id=i, gt_disparity=load_pfm(disp_path) if disp_path.exists() else None,
        )

    return [load(i) for i in manifest["train"]], [load(i) for i in manifest["heldout"]], manifest
