"""U-Net disparity networks: student, backward (shared encoder) and the
inconsistency-aware refinement network.

Topology, per encoder level k = 1..L (channels base * 2**(k-1)):
    conv3x3/2 -> elu -> conv3x3 -> elu                         = e_k  (H/2**k)
Decoder, per level n = L-1..0:
    upsample x2 -> conv3x3 -> elu -> concat skip e_n (n >= 1)
    -> conv3x3 -> elu                                          = xi_n (H/2**n)
    disparity head (n <= 3): d_n = d_max * sigmoid(conv3x3(xi_n))
    (xi_n ++ d_n / d_max) feeds the next level up.

The refinement encoder takes (I_r, inconsistency, d_0 / d_max) and, after
levels 1..3, appends d_k / d_max to the features passed to the next block.
Its heads are residual: d'_n = d_max * sigmoid(z_n + residual_n), where z_n is
the student's head pre-activation, and start at zero.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

GROUPS = ("encoder_shared", "decoder_s", "decoder_b", "encoder_i", "decoder_i")
NUM_DISP_SCALES = 4
IMAGE_CHANNELS = 3
REFINE_CHANNELS = 2 * IMAGE_CHANNELS + 1


@dataclass(frozen=True)
class NetworkConfig:
    base_channels: int = 8
    num_encoder_levels: int = 4
    d_max_fraction: float = 0.3
    init_disparity_fraction: float = 0.04
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        if self.num_encoder_levels < NUM_DISP_SCALES:
            raise ValueError(f"num_encoder_levels must be >= {NUM_DISP_SCALES} "
                             f"to produce disparities at {NUM_DISP_SCALES} scales")
        if not 0 < self.d_max_fraction <= 1:
            raise ValueError("d_max_fraction must lie in (0, 1]")
        if not 0 < self.init_disparity_fraction < self.d_max_fraction:
            raise ValueError("init_disparity_fraction must lie in (0, d_max_fraction)")

    def head_bias(self) -> float:
        """Disparity-head bias so an untrained network predicts ``init_disparity_fraction * W``."""
        p = self.init_disparity_fraction / self.d_max_fraction
        return float(np.log(p / (1 - p)))

    def widths(self) -> List[int]:
        """Feature width at encoder level k (index 0 is the full-res decoder level)."""
        b = self.base_channels
        return [b] + [b * 2 ** (k - 1) for k in range(1, self.num_encoder_levels + 1)]


@dataclass
class ForwardOutputs:
    disparities: List[Tensor]  # scale n -> (N, 1, H/2**n, W/2**n), full-res pixel units
    features: List[Tensor]  # decoder xi_n for the same scales
    logits: List[Tensor]  # head pre-activations: disparity = d_max * sigmoid(logit)


def _glorot(rng, c_out, c_in, k, dtype):
    limit = np.sqrt(6.0 / (c_in * k * k + c_out * k * k))
    return rng.uniform(-limit, limit, size=(c_out, c_in, k, k)).astype(dtype)


class _Builder:
    def __init__(self, group: str, seed: int, dtype):
        self.group = group
        self.rng = np.random.default_rng([seed, GROUPS.index(group)])
        self.dtype = dtype
        self.params: Dict[str, Parameter] = {}

    def conv(self, name, c_in, c_out, k=3):
        self.params[f"{name}.weight"] = Parameter(_glorot(self.rng, c_out, c_in, k, self.dtype),
                                                  name=f"{self.group}/{name}.weight")
        self.params[f"{name}.bias"] = Parameter(np.zeros(c_out, dtype=self.dtype),
                                                name=f"{self.group}/{name}.bias")


def _build_encoder(b: _Builder, widths, in_channels, inject_levels=()):
    c_prev = in_channels
    for k in range(1, len(widths)):
        b.conv(f"enc{k}.down", c_prev, widths[k])
        b.conv(f"enc{k}.conv", widths[k], widths[k])
        c_prev = widths[k] + (1 if k in inject_levels else 0)
    return b.params


def _build_decoder(b: _Builder, widths, head_bias: float = 0.0, zero_heads: bool = False):
    levels = len(widths) - 1
    c_prev = widths[levels]
    for n in range(levels - 1, -1, -1):
        b.conv(f"dec{n}.up", c_prev, widths[n])
        skip = widths[n] if n >= 1 else 0
        b.conv(f"dec{n}.iconv", widths[n] + skip, widths[n])
        if n < NUM_DISP_SCALES:
            b.conv(f"dec{n}.disp", widths[n], 1)
            b.params[f"dec{n}.disp.bias"].data[:] = head_bias
            if zero_heads:
                b.params[f"dec{n}.disp.weight"].data[:] = 0
            c_prev = widths[n] + 1
        else:
            c_prev = widths[n]
    return b.params


def _conv(params, name, x, stride=1):
    return ad.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], stride=stride, padding=1)


def encode(params, x: Tensor, levels: int, inject: Optional[Dict[int, Tensor]] = None) -> List[Tensor]:
    feats = []
    for k in range(1, levels + 1):
        x = ad.elu(_conv(params, f"enc{k}.down", x, stride=2))
        x = ad.elu(_conv(params, f"enc{k}.conv", x))
        feats.append(x)
        if inject and k in inject:
            x = ad.concat_channels([x, inject[k]])
    return feats


def decode(params, feats: Sequence[Tensor], d_max: float,
           prior_logits: Optional[Sequence[Tensor]] = None) -> ForwardOutputs:
    """With ``prior_logits`` the heads predict a residual added to them."""
    levels = len(feats)
    disps: List[Optional[Tensor]] = [None] * NUM_DISP_SCALES
    xis: List[Optional[Tensor]] = [None] * NUM_DISP_SCALES
    logits: List[Optional[Tensor]] = [None] * NUM_DISP_SCALES
    x = feats[-1]
    for n in range(levels - 1, -1, -1):
        u = ad.elu(_conv(params, f"dec{n}.up", ad.upsample_nearest(x, 2)))
        cat = ad.concat_channels([u, feats[n - 1]]) if n >= 1 else u
        xi = ad.elu(_conv(params, f"dec{n}.iconv", cat))
        if n < NUM_DISP_SCALES:
            z = _conv(params, f"dec{n}.disp", xi)
            if prior_logits is not None:
                z = z + prior_logits[n]
            unit = ad.sigmoid(z)
            disps[n] = unit * d_max
            xis[n] = xi
            logits[n] = z
            x = ad.concat_channels([xi, unit])
        else:
            x = xi
    return ForwardOutputs(disparities=disps, features=xis, logits=logits)


class NetworkBundle:
    """Parameters of G_s, G_b and G_i.

    G_s and G_b read the very same ``encoder_shared`` Parameter objects, so an
    update through either network is seen by both.
    """

    def __init__(self, config: NetworkConfig, height: int, width: int):
        div = 2 ** config.num_encoder_levels
        if height % div or width % div:
            raise ValueError(f"input {height}x{width} not divisible by 2**{config.num_encoder_levels}")
        self.config = config
        self.height, self.width = height, width
        self.d_max = config.d_max_fraction * width
        dtype = np.dtype(config.dtype)
        widths = config.widths()
        hb = config.head_bias()
        self.groups: Dict[str, Dict[str, Parameter]] = {
            "encoder_shared": _build_encoder(_Builder("encoder_shared", config.seed, dtype), widths, IMAGE_CHANNELS),
            "decoder_s": _build_decoder(_Builder("decoder_s", config.seed, dtype), widths, hb),
            "decoder_b": _build_decoder(_Builder("decoder_b", config.seed, dtype), widths, hb),
            "encoder_i": _build_encoder(_Builder("encoder_i", config.seed, dtype), widths,
                                        REFINE_CHANNELS, inject_levels=(1, 2, 3)),
            # residual heads start at zero so G_i initially reproduces the student
            "decoder_i": _build_decoder(_Builder("decoder_i", config.seed, dtype), widths, 0.0, zero_heads=True),
        }

    # -- parameter bookkeeping ------------------------------------------------

    def parameters(self, groups: Optional[Sequence[str]] = None) -> List[Parameter]:
        groups = GROUPS if groups is None else groups
        return [p for g in groups for p in self.groups[g].values()]

    def named_parameters(self) -> Dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def num_parameters(self, groups: Optional[Sequence[str]] = None) -> int:
        return sum(p.size for p in self.parameters(groups))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise ValueError(f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} vs parameter {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
            p.grad = None

    def set_trainable(self, groups: Sequence[str]) -> None:
        unknown = set(groups) - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")
        for g in GROUPS:
            for p in self.groups[g].values():
                p.requires_grad = g in groups

    def meta(self) -> dict:
        return {"network": asdict(self.config), "height": self.height, "width": self.width}

    # -- forward passes ---------------------------------------------------------

    def _check_input(self, x: Tensor, channels: int):
        expect = (channels, self.height, self.width)
        if x.data.ndim != 4 or x.shape[1:] != expect:
            raise ValueError(f"expected input (N, {channels}, {self.height}, {self.width}), got {x.shape}")

    def student_forward(self, I_r: Tensor) -> ForwardOutputs:
        self._check_input(I_r, IMAGE_CHANNELS)
        feats = encode(self.groups["encoder_shared"], I_r, self.config.num_encoder_levels)
        return decode(self.groups["decoder_s"], feats, self.d_max)

    def backward_forward(self, I_l_hat: Tensor) -> ForwardOutputs:
        self._check_input(I_l_hat, IMAGE_CHANNELS)
        feats = encode(self.groups["encoder_shared"], I_l_hat, self.config.num_encoder_levels)
        return decode(self.groups["decoder_b"], feats, self.d_max)

    def inconsistency_forward(self, I_r: Tensor, inc: Tensor, d_l: Tensor, d_l_multi: Sequence[Tensor],
                              prior_logits: Sequence[Tensor]) -> ForwardOutputs:
        """``d_l_multi`` holds the student's disparities at scales 1, 2, 3 and
        ``prior_logits`` its head pre-activations at scales 0..3; the refined
        disparity at scale n is ``d_max * sigmoid(prior_logits[n] + residual)``.
        """
        self._check_input(I_r, IMAGE_CHANNELS)
        self._check_input(inc, IMAGE_CHANNELS)
        self._check_input(d_l, 1)
        if len(d_l_multi) != NUM_DISP_SCALES - 1:
            raise ValueError(f"expected {NUM_DISP_SCALES - 1} low-resolution disparities, got {len(d_l_multi)}")
        if len(prior_logits) != NUM_DISP_SCALES:
            raise ValueError(f"expected {NUM_DISP_SCALES} prior logits, got {len(prior_logits)}")
        inv = 1.0 / self.d_max
        x = ad.concat_channels([I_r, inc, d_l * inv])
        inject = {k: d * inv for k, d in enumerate(d_l_multi, start=1)}
        feats = encode(self.groups["encoder_i"], x, self.config.num_encoder_levels, inject)
        return decode(self.groups["decoder_i"], feats, self.d_max, prior_logits)


def student_forward(I_r: Tensor, bundle: NetworkBundle) -> ForwardOutputs:
    return bundle.student_forward(I_r)


def backward_forward(I_l_hat: Tensor, bundle: NetworkBundle) -> ForwardOutputs:
    return bundle.backward_forward(I_l_hat)


def inconsistency_forward(I_r: Tensor, inc: Tensor, d_l: Tensor, d_l_multi: Sequence[Tensor],
                          prior_logits: Sequence[Tensor], bundle: NetworkBundle) -> ForwardOutputs:
    return bundle.inconsistency_forward(I_r, inc, d_l, d_l_multi, prior_logits)


@contextmanager
def trainable(bundle: NetworkBundle, groups: Sequence[str]):
    """Temporarily restrict gradient tracking to ``groups``."""
    bundle.set_trainable(groups)
    try:
        yield
    finally:
        bundle.set_trainable(GROUPS)
