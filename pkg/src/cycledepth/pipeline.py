"""Cycle forward pass, staged training schedule and evaluation."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .data import StereoSample, augment_flip, disparity_to_depth, stack_batch
from .losses import DIST_PRESETS, LossWeights, compute_losses
from .metrics import EvalReport, compute_metrics
from .networks import GROUPS, NetworkBundle
from .optim import OptimizerConfig, adam_step
from .warp import SYNTHESIZE_LEFT, SYNTHESIZE_RIGHT, warp

logger = logging.getLogger(__name__)

STAGE_ORDER = ("half_cycle", "backward_decoder", "joint_cycle", "teacher_pretrain", "joint_finetune")


class StageOrderError(RuntimeError):
    def __init__(self, stage: str, missing: str):
        super().__init__(f"stage {stage!r} requires {missing!r} to be completed first")
        self.stage = stage
        self.missing = missing


class NumericError(FloatingPointError):
    pass


class ScheduleError(RuntimeError):
    def __init__(self, message, completed):
        super().__init__(f"{message} (completed stages: {list(completed)})")
        self.completed = list(completed)


@dataclass
class CycleOutputs:
    d_l: List[Tensor]
    features: List[Tensor]
    I_l_hat: Tensor
    d_r: Optional[List[Tensor]] = None
    I_r_hat: Optional[Tensor] = None
    inc: Optional[Tensor] = None
    d_l_refined: Optional[List[Tensor]] = None
    features_refined: Optional[List[Tensor]] = None
    I_l_hat_refined: Optional[Tensor] = None


def cycle_forward(I_r: Tensor, bundle, include_teacher: bool, include_backward: bool = True) -> CycleOutputs:
    """I_r -> d_l -> I_l_hat -> d_r -> I_r_hat, inconsistency, and optionally G_i.

    ``include_backward=False`` stops after the student half-cycle (only
    allowed without the teacher, which needs the inconsistency).
    """
    s = bundle.student_forward(I_r)
    out = CycleOutputs(d_l=s.disparities, features=s.features,
                       I_l_hat=warp(s.disparities[0], I_r, SYNTHESIZE_LEFT))
    if not (include_backward or include_teacher):
        return out
    b = bundle.backward_forward(out.I_l_hat)
    out.d_r = b.disparities
    out.I_r_hat = warp(b.disparities[0], out.I_l_hat, SYNTHESIZE_RIGHT)
    out.inc = I_r - out.I_r_hat
    if include_teacher:
        t = bundle.inconsistency_forward(I_r, out.inc, s.disparities[0], s.disparities[1:4], s.logits)
        out.d_l_refined = t.disparities
        out.features_refined = t.features
        out.I_l_hat_refined = warp(t.disparities[0], I_r, SYNTHESIZE_LEFT)
    return out


# -- schedule -------------------------------------------------------------------

@dataclass(frozen=True)
class StageConfig:
    name: str
    epochs: int
    weights: LossWeights
    trainable: tuple
    steps_per_epoch: Optional[int] = None

    def __post_init__(self):
        if self.name not in STAGE_ORDER:
            raise ValueError(f"unknown stage {self.name!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.trainable:
            raise ValueError("a stage must train at least one parameter group")
        bad = set(self.trainable) - set(GROUPS)
        if bad:
            raise ValueError(f"unknown parameter groups {sorted(bad)}")

    @property
    def index(self) -> int:
        return STAGE_ORDER.index(self.name)


def stage_preset(name: str, dist_mode: str = "disparity", recon_variant: str = "upsample_full",
                 alpha: float = 0.85) -> StageConfig:
    common = dict(alpha=alpha, recon_variant=recon_variant)
    presets = {
        # the backward branch does not exist yet, so its weight is zero here
        "half_cycle": (10, dict(lambda_s=1.0, lambda_b=0.0, lambda_t=0.0),
                       ("encoder_shared", "decoder_s")),
        "backward_decoder": (5, dict(lambda_s=1.0, lambda_b=0.1, lambda_t=0.0), ("decoder_b",)),
        "joint_cycle": (10, dict(lambda_s=1.0, lambda_b=0.1, lambda_t=0.0),
                        ("encoder_shared", "decoder_s", "decoder_b")),
        "teacher_pretrain": (5, dict(lambda_s=0.0, lambda_b=0.0, lambda_t=1.0), ("encoder_i", "decoder_i")),
        "joint_finetune": (10, dict(lambda_s=1.0, lambda_b=0.1, lambda_t=1.0,
                                    dist_mode=dist_mode, lambda_dist=DIST_PRESETS[dist_mode]), GROUPS),
    }
    if name not in presets:
        raise ValueError(f"unknown stage {name!r}")
    epochs, lam, groups = presets[name]
    return StageConfig(name, epochs, LossWeights(**common, **lam), tuple(groups))


def default_schedule(**kwargs) -> List[StageConfig]:
    return [stage_preset(n, **kwargs) for n in STAGE_ORDER]


def check_stage_order(name: str, completed: Sequence[str]) -> None:
    idx = STAGE_ORDER.index(name)
    for prev in STAGE_ORDER[:idx]:
        if prev not in completed:
            raise StageOrderError(name, prev)


@dataclass(frozen=True)
class TrainSettings:
    batch_size: int = 8
    seed: int = 0
    augment: bool = True
    scale_factor: float = 1.0
    steps_per_epoch: Optional[int] = None


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    if n < batch_size:
        raise ValueError(f"need at least {batch_size} training samples, got {n}")
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield perm[i : i + batch_size]


def stage_steps(stage: StageConfig, n_train: int, settings: TrainSettings):
    per_epoch = stage.steps_per_epoch or settings.steps_per_epoch or n_train // settings.batch_size
    return int(round(stage.epochs * per_epoch * settings.scale_factor)), max(per_epoch, 1)


def run_stage(stage: StageConfig, dataset: Sequence[StereoSample], bundle: NetworkBundle,
              optimizer: OptimizerConfig, settings: TrainSettings = TrainSettings(),
              log: Optional[Callable[[dict], None]] = None) -> List[dict]:
    """Train ``stage.trainable`` under the stage's loss weights; return the step log."""
    total_steps, per_epoch = stage_steps(stage, len(dataset), settings)
    weights = stage.weights
    need_teacher = weights.lambda_t > 0 or weights.dist_mode != "none"
    need_backward = weights.lambda_b > 0 or need_teacher
    dtype = bundle.parameters()[0].dtype
    rng = np.random.default_rng([settings.seed, stage.index])
    stream = _batches(len(dataset), settings.batch_size, rng)
    params = bundle.parameters(stage.trainable)
    for p in params:
        p.reset_optimizer_state()
    records = []
    bundle.set_trainable(stage.trainable)
    try:
        for step in range(total_steps):
            t0 = time.perf_counter()
            idx = next(stream)
            coins = rng.random(len(idx)) < 0.5 if settings.augment else np.zeros(len(idx), bool)
            batch = [augment_flip(dataset[i], bool(c)) for i, c in zip(idx, coins)]
            left, right, _ = stack_batch(batch)
            left, right = left.astype(dtype), right.astype(dtype)

            out = cycle_forward(Tensor(right), bundle, include_teacher=need_teacher,
                                include_backward=need_backward)
            br = compute_losses(out, left, right, weights)
            total = br.total.item()
            if not np.isfinite(total):
                raise NumericError(f"non-finite loss {total} at stage {stage.name} step {step}")
            ad.backward(br.total)
            adam_step(params, optimizer)
            rec = br.record(stage=stage.name, epoch=step // per_epoch, step=step)
            rec["wall_ms"] = round((time.perf_counter() - t0) * 1000, 3)
            records.append(rec)
            if log is not None:
                log(rec)
    finally:
        bundle.set_trainable(GROUPS)
    return records


def checkpoint_name(stage: StageConfig) -> str:
    return f"stage-{stage.index + 1}-{stage.name}.ckpt"


def save_bundle(path, bundle: NetworkBundle, completed: Sequence[str], extra: Optional[dict] = None):
    meta = {**bundle.meta(), "completed": list(completed), **(extra or {})}
    save_checkpoint(path, bundle.state_dict(), meta)


def load_bundle(path, bundle: Optional[NetworkBundle] = None):
    """Load parameters into ``bundle`` (built from checkpoint metadata if None)."""
    from .networks import NetworkConfig

    arrays, meta = load_checkpoint(path)
    if bundle is None:
        bundle = NetworkBundle(NetworkConfig(**meta["network"]), meta["height"], meta["width"])
    bundle.load_state_dict(arrays)
    return bundle, meta


def run_full_schedule(stages: Sequence[StageConfig], dataset: Sequence[StereoSample], bundle: NetworkBundle,
                      optimizer: OptimizerConfig, out_dir, settings: TrainSettings = TrainSettings(),
                      log: Optional[Callable[[dict], None]] = None, resume: bool = True,
                      stop_after: Optional[str] = None) -> Dict[str, List[dict]]:
    """Run the stages in order, checkpointing after each one.

    With ``resume``, stages whose checkpoint already exists in ``out_dir`` are
    skipped and the latest such checkpoint is loaded first.
    """
    names = [s.name for s in stages]
    if names != list(STAGE_ORDER):
        raise ValueError(f"schedule must be exactly {list(STAGE_ORDER)}, got {names}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    completed: List[str] = []
    logs: Dict[str, List[dict]] = {}
    for stage in stages:
        path = out_dir / checkpoint_name(stage)
        if resume and path.exists():
            load_bundle(path, bundle)
            completed.append(stage.name)
            continue
        check_stage_order(stage.name, completed)
        logs[stage.name] = run_stage(stage, dataset, bundle, optimizer, settings, log)
        completed.append(stage.name)
        try:
            save_bundle(path, bundle, completed)
        except OSError as exc:
            raise ScheduleError(f"could not write checkpoint {path}: {exc}", completed[:-1]) from exc
        if stop_after == stage.name:
            break
    return logs


# -- evaluation -------------------------------------------------------------------

def predict_disparity(bundle, right: np.ndarray, use_teacher: bool = False) -> np.ndarray:
    """Full-resolution left-frame disparity ``(N, H, W)`` for a batch of right images."""
    with ad.no_grad():
        x = Tensor(right.astype(bundle.parameters()[0].dtype if hasattr(bundle, "parameters") else right.dtype))
        if use_teacher:
            out = cycle_forward(x, bundle, include_teacher=True)
            d = out.d_l_refined[0]
        else:
            d = bundle.student_forward(x).disparities[0]
    return d.data[:, 0]


def evaluate(bundle, dataset: Sequence[StereoSample], use_teacher: bool = False, cap_meters: float = 80.0,
             batch_size: int = 8, min_disp: float = 0.01) -> EvalReport:
    """Depth metrics of the student (or the refined teacher output) over ``dataset``."""
    if not dataset:
        raise ValueError("empty evaluation set")
    preds, gts = [], []
    for i in range(0, len(dataset), batch_size):
        chunk = dataset[i : i + batch_size]
        if any(s.gt_disparity is None for s in chunk):
            raise ValueError("evaluation needs ground-truth disparity on every sample")
        _, right, _ = stack_batch(chunk)
        disp = predict_disparity(bundle, right, use_teacher)
        for s, d in zip(chunk, disp):
            preds.append(disparity_to_depth(d, s.camera, min_disp).ravel())
            gts.append(disparity_to_depth(s.gt_disparity, s.camera, min_disp).ravel())
    return compute_metrics(np.concatenate(preds), np.concatenate(gts), cap_meters)


def write_jsonl(path) -> Callable[[dict], None]:
    path = Path(path)

    def _write(rec: dict):
        with path.open("a") as f:
            f.write(json.dumps(rec) + "\n")

    return _write
