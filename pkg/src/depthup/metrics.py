"""Validity masks, masked RMSE (loss and metric), inpainting statistics and
method evaluation reports."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ShapeError, UndefinedMetricError


def validity_mask(depth) -> np.ndarray:
    """True where the sensor reported depth; zero means invalid."""
    return np.asarray(depth) != 0


def invalid_fraction(mask) -> float:
    mask = np.asarray(mask, dtype=bool)
    return float(np.count_nonzero(~mask)) / mask.size


def _check(pred, gt, mask):
    pred, gt, mask = np.asarray(pred), np.asarray(gt), np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or gt.shape != mask.shape:
        raise ShapeError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, mask {mask.shape}")
    return pred, gt, mask


def masked_rmse(pred, gt, mask) -> float:
    """sqrt(mean((pred - gt)^2)) over pixels where ``mask`` is true.

    Works on any matching shapes, so a stacked batch yields the RMSE over the
    union of its valid pixels (one square root for the whole batch).
    """
    pred, gt, mask = _check(pred, gt, mask)
    n = np.count_nonzero(mask)
    if n == 0:
        raise UndefinedMetricError("masked RMSE undefined: no valid pixels")
    d = pred[mask].astype(np.float64) - gt[mask]
    return float(np.sqrt(np.dot(d, d) / n))


def masked_rmse_grad(pred, gt, mask) -> np.ndarray:
    """d(masked_rmse)/d(pred): (pred - gt) / (N_valid * rmse) on valid pixels.

    At rmse == 0 the loss is at its minimum and a zero gradient is returned.
    """
    pred, gt, mask = _check(pred, gt, mask)
    rmse = masked_rmse(pred, gt, mask)
    grad = np.zeros(pred.shape, dtype=pred.dtype)
    if rmse == 0.0:
        return grad
    n = np.count_nonzero(mask)
    grad[mask] = (pred[mask] - gt[mask]) / (n * rmse)
    return grad


@dataclass
class InpaintingReport:
    inpainted_count: int
    inpainted_fraction: float
    # None when there is nothing to measure
    mean_abs_neighbor_gap: float | None


def inpainting_report(pred, input_mask, gt_mask, gt) -> InpaintingReport:
    """Statistics on pixels the network fills in although neither the input
    depth nor the target carried a measurement there.

    The gap is |pred - gt at the nearest valid gt pixel|, a proxy since no
    ground truth exists at those pixels.
    """
    pred = np.asarray(pred)
    input_mask = np.asarray(input_mask, dtype=bool)
    gt_mask = np.asarray(gt_mask, dtype=bool)
    if not (pred.shape == input_mask.shape == gt_mask.shape == np.shape(gt)):
        raise ShapeError("inpainting_report inputs must share one shape")
    holes = ~input_mask & ~gt_mask
    count = int(np.count_nonzero(holes))
    if count == 0 or not gt_mask.any():
        return InpaintingReport(count, count / pred.size, None)
    _, idx = ndimage.distance_transform_edt(~gt_mask, return_indices=True)
    nearest = np.asarray(gt)[tuple(idx)]
    gap = float(np.mean(np.abs(pred[holes] - nearest[holes])))
    return InpaintingReport(count, count / pred.size, gap)


# --------------------------------------------------------------------------
# evaluation reports

METHODS = ("naive", "flow", "network")


@dataclass
class SequenceResult:
    method: str
    sequence: str
    rmse: float
    n_frames: int
    valid_fraction: float
    delta: int = 1


@dataclass
class EvalReport:
    rows: list[SequenceResult] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def add(self, row: SequenceResult):
        self.rows.append(row)

    def methods(self, delta=1):
        seen = []
        for r in self.rows:
            if r.delta == delta and r.method not in seen:
                seen.append(r.method)
        return seen

    def sequences(self):
        seen = []
        for r in self.rows:
            if r.sequence not in seen:
                seen.append(r.sequence)
        return seen

    def deltas(self):
        return sorted({r.delta for r in self.rows})

    def get(self, method, sequence, delta=1):
        for r in self.rows:
            if (r.method, r.sequence, r.delta) == (method, sequence, delta):
                return r
        raise KeyError((method, sequence, delta))

    def average(self, method, delta=1) -> float:
        vals = [r.rmse for r in self.rows if r.method == method and r.delta == delta]
        if not vals:
            raise KeyError((method, delta))
        return float(np.mean(vals))

    def to_json(self) -> str:
        doc = {
            "results": [
                {"method": r.method, "sequence": r.sequence, "rmse": r.rmse,
                 "n_frames": r.n_frames, "valid_fraction": r.valid_fraction, "delta": r.delta}
                for r in self.rows
            ],
            "averages": [
                {"method": m, "delta": d, "rmse": self.average(m, d)}
                for d in self.deltas() for m in self.methods(d)
            ],
            "notes": list(self.notes),
        }
        return json.dumps(doc, indent=2)

    def to_text(self) -> str:
        lines = []
        seqs = self.sequences()
        for d in self.deltas():
            methods = self.methods(d)
            lines.append(f"masked RMSE (normalized depth), delta = {d} depth period(s)")
            header = f"{'method':<10}" + "".join(f"{s:>12}" for s in seqs) + f"{'avg':>10}"
            lines.append(header)
            lines.append("-" * len(header))
            for m in methods:
                cells = []
                for s in seqs:
                    try:
                        cells.append(f"{self.get(m, s, d).rmse:>12.4f}")
                    except KeyError:
                        cells.append(f"{'-':>12}")
                lines.append(f"{m:<10}" + "".join(cells) + f"{self.average(m, d):>10.4f}")
            lines.append("")
        lines.extend(f"note: {n}" for n in self.notes)
        return "\n".join(lines).rstrip() + "\n"


def evaluate(sequences, methods, delta=1, report=None) -> EvalReport:
    """Per-sequence masked RMSE for each method.

    ``sequences`` maps a name to a list of samples (objects with ``gt`` and
    ``gt_mask`` arrays). ``methods`` maps a method name to a callable returning
    ``(prediction, prediction_mask)`` for one sample; ``prediction_mask`` is
    None for dense predictors. Pixels are scored where the gt is valid and the
    prediction is valid. Network predictions are expected to be clamped by
    the caller. A sequence's value is the mean of its per-frame RMSEs.
    """
    report = report if report is not None else EvalReport()
    for seq_name, samples in sequences.items():
        for method, fn in methods.items():
            errs, valid = [], []
            for i, s in enumerate(samples):
                pred, pmask = fn(s)
                gt = np.asarray(s.gt).reshape(np.shape(s.gt_mask))
                pred = np.asarray(pred).reshape(gt.shape)
                mask = s.gt_mask if pmask is None else (s.gt_mask & np.asarray(pmask).reshape(gt.shape))
                try:
                    errs.append(masked_rmse(pred, gt, mask))
                except UndefinedMetricError as exc:
                    raise UndefinedMetricError(f"{method}: sequence {seq_name!r}, frame {i}: {exc}") from exc
                valid.append(np.count_nonzero(mask) / mask.size)
            if not errs:
                continue
            report.add(SequenceResult(method, seq_name, float(np.mean(errs)), len(errs),
                                      float(np.mean(valid)), delta))
    return report
