"""Standard depth-error statistics over capped depths."""
from dataclasses import asdict, dataclass

import numpy as np

THRESHOLD_BASE = 1.25
MIN_DEPTH = 0.1
REPORT_KEYS = ("abs_rel", "sq_rel", "rmse", "rmse_log", "a1", "a2", "a3", "pixels", "cap_meters")


@dataclass(frozen=True)
class EvalReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    a1: float
    a2: float
    a3: float
    pixels: int
    cap_meters: float

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(pred_depth, gt_depth, cap_meters: float = 80.0,
                    min_depth: float = MIN_DEPTH) -> EvalReport:
    """abs rel, sq rel, rmse, rmse log and the three threshold accuracies.

    Pixels with ``gt > 0`` are valid; both depths are clipped to
    ``[min_depth, cap_meters]`` first.
    """
    pred = np.asarray(pred_depth, dtype=np.float64).ravel()
    gt = np.asarray(gt_depth, dtype=np.float64).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"pred has {pred.size} values, gt has {gt.size}")
    valid = gt > 0
    if not valid.any():
        raise ValueError("no valid ground-truth pixels")
    pred = np.clip(pred[valid], min_depth, cap_meters)
    gt = np.clip(gt[valid], min_depth, cap_meters)

    diff = pred - gt
    ratio = np.maximum(gt / pred, pred / gt)
    return EvalReport(
        abs_rel=float(np.mean(np.abs(diff) / gt)),
        sq_rel=float(np.mean(diff ** 2 / gt)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(pred) - np.log(gt)) ** 2))),
        a1=float(np.mean(ratio < THRESHOLD_BASE)),
        a2=float(np.mean(ratio < THRESHOLD_BASE ** 2)),
        a3=float(np.mean(ratio < THRESHOLD_BASE ** 3)),
        pixels=int(valid.sum()),
        cap_meters=float(cap_meters),
    )
