"""Finite-difference verification of every differentiable op.

Each registered case builds a scalar function of a few float64 input arrays
(non-scalar ops are contracted with a fixed random projection). The analytic
gradient from :func:`autodiff.backward` is compared against central
differences on a random subset of coordinates.

Ops flagged ``kinked`` (warp interpolation cells, elu, absolute value) skip
coordinates where the one-sided differences disagree, since a central
difference across a kink measures neither side.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import networks as nets
from . import warp as W
from .autodiff import Tensor

STEP = 1e-5
REL_TOL = 1e-4
FD_FLOOR = 1e-8
# Deep composites accumulate ~1e-11 of central-difference noise, so below this
# the comparison there becomes absolute (|a - fd| < REL_TOL * floor).
COMPOSITE_FD_FLOOR = 1e-6
ABS_TOL = 1e-12
MAX_COORDS = 24
KINK_TOL = 1e-3
KINK_FLOOR = 1e-9  # well above float64 one-sided difference noise for O(1) losses


@dataclass
class GradCase:
    name: str
    module: str
    build: Callable[[np.random.Generator], tuple]  # -> (fn(dict of Tensor) -> Tensor, dict of arrays)
    kinked: bool = False
    fd_floor: float = FD_FLOOR


@dataclass
class GradResult:
    name: str
    module: str
    max_rel_err: float
    checked: int
    skipped: int
    passed: bool
    detail: str = ""

    def row(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{self.name:<34} {self.module:<16} {self.max_rel_err:10.3e} "
                f"{self.checked:5d} {self.skipped:4d}  {status} {self.detail}").rstrip()


REGISTRY: Dict[str, GradCase] = {}


def register(name: str, module: str, kinked: bool = False, fd_floor: float = FD_FLOOR):
    def deco(build):
        REGISTRY[name] = GradCase(name, module, build, kinked, fd_floor)
        return build
    return deco


def _img(rng, *shape, lo=0.0, hi=1.0):
    return rng.uniform(lo, hi, size=shape)


def _project(out: Tensor, proj: np.ndarray) -> Tensor:
    return ad.mean(out * Tensor(proj))


def _projected(op, shapes_out, rng):
    proj = rng.standard_normal(shapes_out)
    return lambda t: _project(op(t), proj)


def _non_integer(rng, shape, lo, hi):
    """Values in [lo, hi] kept at least 0.1 away from integers (warp cell edges)."""
    v = rng.uniform(lo, hi, size=shape)
    f = v - np.floor(v)
    return np.floor(v) + np.clip(f, 0.1, 0.9)


# -- tensor_autodiff ------------------------------------------------------------

def _binary(name, fn, positive_b=False):
    @register(name, "tensor_autodiff")
    def build(rng):
        shape = (2, 3, 4, 5)
        b = _img(rng, *shape, lo=0.5, hi=2.0) if positive_b else rng.standard_normal(shape)
        return _projected(lambda t: fn(t["a"], t["b"]), shape, rng), {"a": rng.standard_normal(shape), "b": b}


_binary("add", lambda a, b: ad.add(a, b))
_binary("sub", lambda a, b: ad.sub(a, b))
_binary("mul", lambda a, b: ad.mul(a, b))
_binary("div", lambda a, b: ad.div(a, b), positive_b=True)


def _unary(name, fn, kinked=False):
    @register(name, "tensor_autodiff", kinked=kinked)
    def build(rng):
        shape = (2, 3, 4, 5)
        return _projected(lambda t: fn(t["a"]), shape, rng), {"a": 2 * rng.standard_normal(shape)}


_unary("scale", lambda a: ad.scale(a, -1.7))
_unary("add_scalar", lambda a: ad.add_scalar(a, 0.3))
_unary("sigmoid", lambda a: ad.sigmoid(a))
_unary("elu", lambda a: ad.elu(a), kinked=True)


@register("upsample_nearest", "tensor_autodiff")
def _upsample(rng):
    return (_projected(lambda t: ad.upsample_nearest(t["a"], 2), (2, 3, 8, 10), rng),
            {"a": rng.standard_normal((2, 3, 4, 5))})


@register("avg_pool3x3", "tensor_autodiff")
def _pool(rng):
    return (_projected(lambda t: ad.avg_pool3x3(t["a"]), (2, 3, 2, 3), rng),
            {"a": rng.standard_normal((2, 3, 4, 5))})


@register("mean", "tensor_autodiff")
def _mean(rng):
    return (lambda t: ad.mean(t["a"] * t["a"])), {"a": rng.standard_normal((2, 3, 4, 5))}


@register("mean_abs", "tensor_autodiff", kinked=True)
def _mean_abs(rng):
    return (lambda t: ad.mean_abs(t["a"])), {"a": rng.standard_normal((2, 3, 4, 5))}


@register("mean_sq", "tensor_autodiff")
def _mean_sq(rng):
    return (lambda t: ad.mean_sq(t["a"])), {"a": rng.standard_normal((2, 3, 4, 5))}


@register("add_all", "tensor_autodiff")
def _add_all(rng):
    def fn(t):
        return ad.add_all([ad.mean_sq(t["a"]), ad.mean(t["b"]), ad.mean_sq(t["a"] * t["b"])])
    return fn, {"a": rng.standard_normal((1, 2, 3, 3)), "b": rng.standard_normal((1, 2, 3, 3))}


@register("concat_channels", "tensor_autodiff")
def _concat(rng):
    return (_projected(lambda t: ad.concat_channels([t["a"], t["b"]]), (2, 5, 4, 4), rng),
            {"a": rng.standard_normal((2, 2, 4, 4)), "b": rng.standard_normal((2, 3, 4, 4))})


def _conv_case(name, stride, padding, bias):
    @register(name, "tensor_autodiff")
    def build(rng):
        x = rng.standard_normal((2, 3, 6, 6))
        w = 0.5 * rng.standard_normal((4, 3, 3, 3))
        ho = (6 + 2 * padding - 3) // stride + 1
        inputs = {"x": x, "w": w}
        if bias:
            inputs["b"] = rng.standard_normal(4)
        op = lambda t: ad.conv2d(t["x"], t["w"], t.get("b"), stride=stride, padding=padding)
        return _projected(op, (2, 4, ho, ho), rng), inputs


_conv_case("conv2d", 1, 1, True)
_conv_case("conv2d_stride2", 2, 1, True)
_conv_case("conv2d_valid_nobias", 1, 0, False)


@register("stop_gradient", "tensor_autodiff")
def _stop(rng):
    # d/da of mean(a * S(a)) is S(a)/n: the stopped branch contributes nothing
    a = rng.standard_normal((1, 2, 3, 3))
    return (lambda t: ad.mean(t["a"] * ad.stop_gradient(t["a"]))), {"a": a}


# stop_gradient intentionally disagrees with finite differences; its expected
# gradient is supplied analytically instead.
_EXPECTED = {"stop_gradient": lambda inputs: {"a": inputs["a"] / inputs["a"].size}}


# -- warp -----------------------------------------------------------------------

def _warp_case(name, direction):
    @register(name, "warp", kinked=True)
    def build(rng):
        n, c, h, w = 2, 3, 4, 8
        d = _non_integer(rng, (n, 1, h, w), 0.0, 3.0)
        op = lambda t: W.warp(t["d"], t["src"], direction)
        return _projected(op, (n, c, h, w), rng), {"d": d, "src": _img(rng, n, c, h, w)}


_warp_case("warp_synthesize_left", W.SYNTHESIZE_LEFT)
_warp_case("warp_synthesize_right", W.SYNTHESIZE_RIGHT)


@register("upsample_disparity_full", "warp")
def _up_full(rng):
    return (_projected(lambda t: W.upsample_disparity_full(t["d"], 2), (1, 1, 8, 8), rng),
            {"d": _img(rng, 1, 1, 2, 2)})


@register("to_scale_units", "warp")
def _units(rng):
    return _projected(lambda t: W.to_scale_units(t["d"], 2), (1, 1, 2, 4), rng), {"d": _img(rng, 1, 1, 2, 4)}


@register("area_downsample_op", "warp")
def _area(rng):
    return (_projected(lambda t: W.area_downsample_op(t["a"], 2), (1, 3, 2, 2), rng),
            {"a": _img(rng, 1, 3, 8, 8)})


# -- losses ---------------------------------------------------------------------

@register("ssim_map", "losses")
def _ssim_map(rng):
    return (_projected(lambda t: L.ssim_map(t["x"], t["y"]), (2, 3, 3, 4), rng),
            {"x": _img(rng, 2, 3, 5, 6), "y": _img(rng, 2, 3, 5, 6)})


@register("ssim_loss", "losses")
def _ssim_loss(rng):
    return (lambda t: L.ssim_loss(t["x"], t["y"])), {"x": _img(rng, 1, 3, 5, 5), "y": _img(rng, 1, 3, 5, 5)}


@register("appearance_loss", "losses", kinked=True)
def _appearance(rng):
    return ((lambda t: L.appearance_loss(t["x"], t["y"], 0.85)),
            {"x": _img(rng, 1, 3, 5, 5), "y": _img(rng, 1, 3, 5, 5)})


@register("disparity_distillation_loss", "losses", kinked=True)
def _dist_disp(rng):
    # the teacher map enters through a stop-gradient, so only the student is an input
    ref = _img(rng, 1, 1, 4, 4, hi=3.0)
    return (lambda t: L.disparity_distillation_loss(t["d"], Tensor(ref))), {"d": _img(rng, 1, 1, 4, 4, hi=3.0)}


@register("feature_distillation_loss", "losses")
def _dist_feat(rng):
    shapes = [(1, 2, 8, 8), (1, 2, 4, 4), (1, 4, 2, 2)]
    teacher = [Tensor(rng.standard_normal(s)) for s in shapes]

    def fn(t):
        return L.feature_distillation_loss([t["x0"], t["x1"], t["x2"]], teacher)

    return fn, {f"x{i}": rng.standard_normal(s) for i, s in enumerate(shapes)}


def _tiny_bundle(seed) -> nets.NetworkBundle:
    cfg = nets.NetworkConfig(base_channels=2, num_encoder_levels=4, seed=seed, dtype="float64")
    bundle = nets.NetworkBundle(cfg, 16, 16)
    # G_i's residual heads start at zero, which would hide every gradient behind them
    rng = np.random.default_rng([seed, 99])
    for name, p in bundle.groups["decoder_i"].items():
        if ".disp." in name:
            p.data = 0.3 * rng.standard_normal(p.shape)
    return bundle


def _fake_cycle(rng, d_scale=2.0):
    """Cycle outputs whose disparities are leaves, for the reconstruction loss.

    32x32 keeps the scale-3 grid (4x4) large enough for 3x3 SSIM windows.
    """
    n, h, w = 1, 32, 32
    inputs = {}
    for branch in ("dl", "dr", "dt"):
        for s in range(L.NUM_SCALES):
            hs, ws = h >> s, w >> s
            inputs[f"{branch}{s}"] = _non_integer(rng, (n, 1, hs, ws), 0.0, d_scale)
    left, right = _img(rng, n, 3, h, w), _img(rng, n, 3, h, w)
    return inputs, left, right


def _reconstruction_case(name, variant):
    @register(name, "losses", kinked=True)
    def build(rng):
        inputs, left, right = _fake_cycle(rng)
        weights = L.LossWeights(lambda_s=1.0, lambda_b=0.1, lambda_t=1.0, recon_variant=variant)

        def fn(t):
            from .pipeline import CycleOutputs
            I_r = Tensor(right)
            d_l = [t[f"dl{s}"] for s in range(L.NUM_SCALES)]
            d_r = [t[f"dr{s}"] for s in range(L.NUM_SCALES)]
            d_t = [t[f"dt{s}"] for s in range(L.NUM_SCALES)]
            I_l_hat = W.warp(d_l[0], I_r, W.SYNTHESIZE_LEFT)
            I_r_hat = W.warp(d_r[0], I_l_hat, W.SYNTHESIZE_RIGHT)
            out = CycleOutputs(d_l=d_l, features=[], I_l_hat=I_l_hat, d_r=d_r, I_r_hat=I_r_hat,
                               inc=I_r - I_r_hat, d_l_refined=d_t,
                               I_l_hat_refined=W.warp(d_t[0], I_r, W.SYNTHESIZE_LEFT))
            return L.reconstruction_loss(out, left, right, weights).total

        return fn, inputs


_reconstruction_case("reconstruction_loss_upsample_full", "upsample_full")
_reconstruction_case("reconstruction_loss_downsampled", "downsampled_compare")


# -- networks and the full pipeline (parameter subsets) ----------------------------

def _bundle_case(name, forward_kind, module):
    @register(name, module, kinked=True, fd_floor=COMPOSITE_FD_FLOOR)
    def build(rng):
        bundle = _tiny_bundle(int(rng.integers(1 << 30)))
        right, left = _img(rng, 1, 3, 16, 16), _img(rng, 1, 3, 16, 16)
        params = bundle.named_parameters()
        # one weight tensor per group keeps the finite-difference cost small
        chosen = {}
        for g in nets.GROUPS:
            names = [k for k in params if k.startswith(g + "/") and k.endswith(".weight")]
            pick = names[int(rng.integers(len(names)))]
            chosen[pick] = params[pick]
        inc = rng.standard_normal((1, 3, 16, 16)) * 0.1

        def fn(t):
            for k, p in chosen.items():
                p.data = t[k].data
            if forward_kind == "student":
                return ad.mean(bundle.student_forward(Tensor(right)).disparities[0])
            if forward_kind == "backward":
                return ad.mean(bundle.backward_forward(Tensor(left)).disparities[1])
            if forward_kind == "inconsistency":
                s = bundle.student_forward(Tensor(right))
                o = bundle.inconsistency_forward(Tensor(right), Tensor(inc), s.disparities[0], s.disparities[1:4],
                                                s.logits)
                return ad.add_all([ad.mean(o.disparities[0]), ad.mean_sq(o.features[1])])
            from .pipeline import cycle_forward
            out = cycle_forward(Tensor(right), bundle, include_teacher=True)
            # no distillation here: its stop-gradient makes the analytic gradient
            # differ from finite differences on purpose (checked separately)
            weights = L.LossWeights(lambda_s=1.0, lambda_b=0.1, lambda_t=1.0)
            return L.compute_losses(out, left, right, weights).total

        return fn, {k: p.data.copy() for k, p in chosen.items()}, chosen


_bundle_case("student_forward", "student", "networks")
_bundle_case("backward_forward", "backward", "networks")
_bundle_case("inconsistency_forward", "inconsistency", "networks")
_bundle_case("cycle_total_loss", "cycle", "pipeline")


# -- driver ---------------------------------------------------------------------

def _evaluate(fn, arrays: Dict[str, np.ndarray], bound=None) -> float:
    with ad.no_grad():
        return float(fn(_wrap(arrays, grad=False, bound=bound)).data)


def _wrap(arrays, grad, bound=None):
    out = {}
    for k, v in arrays.items():
        if bound and k in bound:
            p = bound[k]
            p.data = v
            p.requires_grad = grad
            p.grad = None
            out[k] = p
        else:
            out[k] = Tensor(v, requires_grad=grad)
    return out


def _analytic(fn, arrays, bound=None) -> Dict[str, np.ndarray]:
    tensors = _wrap({k: v.copy() for k, v in arrays.items()}, grad=True, bound=bound)
    loss = fn(tensors)
    ad.backward(loss)
    return {k: (t.grad if t.grad is not None else np.zeros_like(arrays[k])) for k, t in tensors.items()}


def check_case(case: GradCase, rng: np.random.Generator, max_coords: int = MAX_COORDS,
               corrupt: float = 0.0) -> GradResult:
    built = case.build(rng)
    fn, arrays = built[0], built[1]
    bound = built[2] if len(built) > 2 else None
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
    if bound is not None:
        for p in bound.values():
            p.grad = None
    try:
        grads = _analytic(fn, arrays, bound)
        if case.name in _EXPECTED:
            expected = _EXPECTED[case.name](arrays)
            err = max(float(np.max(np.abs(grads[k] - expected[k]))) for k in arrays)
            return GradResult(case.name, case.module, err, sum(a.size for a in arrays.values()), 0,
                              err <= ABS_TOL and corrupt == 0.0)
        worst, checked, skipped, detail = 0.0, 0, 0, ""
        for key, base in arrays.items():
            g = grads[key].astype(np.float64) * (1.0 + corrupt)
            n = base.size
            idx = rng.choice(n, size=min(n, max_coords), replace=False)
            for flat in idx:
                work = {k: v.copy() for k, v in arrays.items()}
                x = work[key].reshape(-1)
                x0 = x[flat]
                x[flat] = x0 + STEP
                f_plus = _evaluate(fn, work, bound)
                x[flat] = x0 - STEP
                f_minus = _evaluate(fn, work, bound)
                fd = (f_plus - f_minus) / (2 * STEP)
                if case.kinked:
                    x[flat] = x0
                    f0 = _evaluate(fn, work, bound)
                    right, left = (f_plus - f0) / STEP, (f0 - f_minus) / STEP
                    if abs(right - left) > KINK_TOL * max(abs(right), abs(left)) + KINK_FLOOR:
                        skipped += 1
                        continue
                a = float(g.reshape(-1)[flat])
                checked += 1
                rel = abs(a - fd) / max(abs(fd), abs(a), case.fd_floor)
                if rel > worst:
                    worst = rel
                    detail = f"worst at {key}[{flat}]: analytic {a:.6e} vs fd {fd:.6e}"
        passed = worst < REL_TOL and checked > 0
        return GradResult(case.name, case.module, worst, checked, skipped, passed,
                          "" if passed else detail or "no coordinates checked")
    finally:
        if bound is not None:
            for k, p in bound.items():
                p.data = arrays[k].copy()
                p.requires_grad = True
                p.grad = None


def run_gradcheck(seed: int = 0, names: Optional[Sequence[str]] = None, max_coords: int = MAX_COORDS,
                  corrupt: Optional[str] = None) -> List[GradResult]:
    """Check every registered op (or ``names``) with inputs drawn from ``seed``.

    ``corrupt`` names one op whose analytic gradient is scaled by 1.01 before
    comparison; it exists so the harness's own sensitivity can be tested.
    """
    names = list(REGISTRY) if names is None else list(names)
    unknown = [n for n in names if n not in REGISTRY]
    if unknown:
        raise KeyError(f"unknown gradcheck ops {unknown}")
    if corrupt is not None and corrupt not in REGISTRY:
        raise KeyError(f"unknown gradcheck op {corrupt!r}")
    results = []
    for i, name in enumerate(names):
        rng = np.random.default_rng([seed, i])
        results.append(check_case(REGISTRY[name], rng, max_coords, 0.01 if name == corrupt else 0.0))
    return results


def format_table(results: Sequence[GradResult], seed: Optional[int] = None) -> str:
    head = f"{'op':<34} {'module':<16} {'max_rel':>10} {'coords':>5} {'skip':>4}  status"
    lines = [f"# gradcheck seed={seed}" if seed is not None else "# gradcheck", head, "-" * len(head)]
    lines += [r.row() for r in results]
    failed = [r.name for r in results if not r.passed]
    lines.append(f"{len(results) - len(failed)}/{len(results)} passed"
                 + (f"; FAILED: {', '.join(failed)}" if failed else ""))
    return "\n".join(lines)
