"""IoU, Acc, MAE and mBER over the two transparent classes, with all/easy/hard
aggregation.

Per-class counts are one-vs-rest over thing (1) and stuff (2). IoU is
accumulated dataset-wide. MAE and Acc are per-image averages; their per-image
terms are summed with ``math.fsum`` so merged states give identical results
regardless of merge order.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

CLASSES = (1, 2)
TABLE_COLUMNS = ("mae", "acc", "miou", "mber")
REPORT_SPLITS = ("all", "easy", "hard")


@dataclass
class ConfusionState:
    tp: np.ndarray = field(default_factory=lambda: np.zeros(2, np.int64))
    fp: np.ndarray = field(default_factory=lambda: np.zeros(2, np.int64))
    tn: np.ndarray = field(default_factory=lambda: np.zeros(2, np.int64))
    fn: np.ndarray = field(default_factory=lambda: np.zeros(2, np.int64))
    mae_terms: list = field(default_factory=list)
    acc_terms: list = field(default_factory=list)

    @property
    def n_images(self):
        return len(self.mae_terms)

    @property
    def n_pixels(self):
        return int(self.tp[0] + self.fp[0] + self.tn[0] + self.fn[0])

    def update(self, pred, gt):
        """Accumulate one (prediction, ground truth) pair of class-id maps.

        ``pred`` may also be a (C, H, W) score map, which is argmax-ed first.
        """
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.ndim == 3 and gt.ndim == 2:
            pred = pred.argmax(axis=0)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        for k, c in enumerate(CLASSES):
            p, g = pred == c, gt == c
            tp = int(np.count_nonzero(p & g))
            fp = int(np.count_nonzero(p)) - tp
            fn = int(np.count_nonzero(g)) - tp
            self.tp[k] += tp
            self.fp[k] += fp
            self.fn[k] += fn
            self.tn[k] += gt.size - tp - fp - fn

        fg_pred, fg_gt = pred > 0, gt > 0
        self.mae_terms.append(np.count_nonzero(fg_pred != fg_gt) / gt.size)
        n_fg = int(np.count_nonzero(fg_gt))
        if n_fg == 0:
            logger.info("image without ground-truth foreground: Acc term set to 100")
            self.acc_terms.append(1.0)
        else:
            self.acc_terms.append(np.count_nonzero(fg_gt & (pred == gt)) / n_fg)
        return self

    def merge(self, other):
        return ConfusionState(self.tp + other.tp, self.fp + other.fp,
                              self.tn + other.tn, self.fn + other.fn,
                              self.mae_terms + other.mae_terms,
                              self.acc_terms + other.acc_terms)


def update(state, pred, gt):
    return state.update(pred, gt)


def merge(*states):
    out = ConfusionState()
    for s in states:
        out = out.merge(s)
    return out


def _ratio(num, den, what):
    if den == 0:
        logger.warning("degenerate %s (empty set); ratio defined as 1", what)
        return 1.0
    return num / den


def iou(state):
    """``(iou_things, iou_stuff, miou)`` as percentages; empty union counts as 100."""
    vals = []
    for k, name in enumerate(("things", "stuff")):
        union = int(state.tp[k] + state.fp[k] + state.fn[k])
        vals.append(100.0 * _ratio(int(state.tp[k]), union, f"IoU union for {name}"))
    return vals[0], vals[1], (vals[0] + vals[1]) / 2


def mber(state):
    """``(ber_things, ber_stuff, mber)``, each in [0, 100]."""
    vals = []
    for k, name in enumerate(("things", "stuff")):
        tpr = _ratio(int(state.tp[k]), int(state.tp[k] + state.fn[k]), f"positive set for {name}")
        tnr = _ratio(int(state.tn[k]), int(state.tn[k] + state.fp[k]), f"negative set for {name}")
        vals.append((1 - 0.5 * (tpr + tnr)) * 100)
    return vals[0], vals[1], (vals[0] + vals[1]) / 2


def mae(state):
    if not state.n_images:
        raise ValueError("mae needs at least one image")
    return math.fsum(state.mae_terms) / state.n_images


def acc(state):
    if not state.n_images:
        raise ValueError("acc needs at least one image")
    return 100.0 * math.fsum(state.acc_terms) / state.n_images


@dataclass
class MetricReport:
    split: str
    n_images: int
    miou: float | None = None
    iou_things: float | None = None
    iou_stuff: float | None = None
    acc: float | None = None
    mae: float | None = None
    mber: float | None = None
    ber_things: float | None = None
    ber_stuff: float | None = None

    @classmethod
    def from_state(cls, state, split="all"):
        if state.n_images == 0:
            return cls(split=split, n_images=0)
        it, is_, mi = iou(state)
        bt, bs, mb = mber(state)
        return cls(split=split, n_images=state.n_images, miou=mi, iou_things=it,
                   iou_stuff=is_, acc=acc(state), mae=mae(state), mber=mb,
                   ber_things=bt, ber_stuff=bs)

    def to_dict(self):
        return dict(self.__dict__)


def report(states):
    """Reports for ``all``, ``easy`` and ``hard``; ``all`` is computed on the merged state.

    ``states`` maps difficulty ("easy", "hard", or "none" for train) to a
    ConfusionState.
    """
    merged = merge(*states.values())
    out = {"all": MetricReport.from_state(merged, "all")}
    for split in ("easy", "hard"):
        out[split] = MetricReport.from_state(states.get(split, ConfusionState()), split)
    return out


def report_to_json(reports):
    return json.dumps({k: v.to_dict() for k, v in reports.items()}, indent=2)


def report_from_json(text):
    data = json.loads(text)
    return {k: MetricReport(**v) for k, v in data.items()}


def table_row(reports):
    """Flat row ordered MAE, Acc, mIoU, mBER, each over all/easy/hard."""
    row = {}
    for metric in TABLE_COLUMNS:
        for split in REPORT_SPLITS:
            row[f"{metric}_{split}"] = getattr(reports[split], metric)
    return row


def table_csv(reports):
    buf = io.StringIO()
    row = table_row(reports)
    writer = csv.DictWriter(buf, fieldnames=list(row))
    writer.writeheader()
    writer.writerow({k: "" if v is None else f"{v:.4f}" for k, v in row.items()})
    return buf.getvalue()


def find_prediction(pred_dir, record):
    """Predicted mask for a record: ``<stem>_mask.png`` or ``<stem>.png`` in ``pred_dir``."""
    stem = Path(record.mask_path).name[: -len("_mask.png")]
    for name in (f"{stem}_mask.png", f"{stem}.png"):
        candidate = Path(pred_dir) / name
        if candidate.is_file():
            return candidate
    raise FileNotFoundError(f"no prediction for {stem!r} in {pred_dir}")


def evaluate_predictions(pred_dir, records):
    """Score a directory of predicted masks (same encoding as ground truth)."""
    from translab.datasets import decode_mask

    states = {}
    for rec in records:
        gt = decode_mask(rec.mask_path)
        pred = decode_mask(find_prediction(pred_dir, rec))
        states.setdefault(rec.difficulty, ConfusionState()).update(pred, gt)
    return report(states)


def write_reports(reports, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report_to_json(reports))
    (out_dir / "report.csv").write_text(table_csv(reports))
