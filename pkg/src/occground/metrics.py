"""Voxel-set IoU and Acc@theta with the Unique / Multiple / Overall breakdown."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

from .geometry import VoxelSet
from .grounding import GroundingPrediction, GroundingSample, extract_gt_occupancy

logger = logging.getLogger(__name__)

SUBSETS = ("unique", "multiple", "overall")
DEFAULT_THRESHOLDS = (0.25, 0.5)


def iou(gt: VoxelSet, pred: VoxelSet) -> float:
    gt = frozenset(gt)
    pred = frozenset(pred)
    if not gt:
        raise ValueError("empty ground truth set")
    inter = len(gt & pred)
    return inter / (len(gt) + len(pred) - inter)


def _check_threshold(theta: float) -> None:
    if not 0.0 <= theta < 1.0:
        raise ValueError(f"threshold must lie in [0, 1), got {theta}")


def acc_at(ious: Sequence[float], theta: float) -> float:
    """Fraction of IoUs strictly above ``theta``."""
    _check_threshold(theta)
    ious = list(ious)
    if not ious:
        raise ValueError("no samples")
    return sum(1 for x in ious if x > theta) / len(ious)


@dataclass
class EvaluationReport:
    per_sample: List[Tuple[str, float]]
    thresholds: Tuple[float, ...]
    counts: Dict[str, int]
    hits: Dict[Tuple[str, float], int]
    missing: List[str] = field(default_factory=list)
    unmatched: List[str] = field(default_factory=list)

    @property
    def acc(self) -> Dict[Tuple[str, float], float | None]:
        """Acc per (subset, theta); ``None`` for an empty subset."""
        out = {}
        for (subset, theta), h in self.hits.items():
            n = self.counts[subset]
            out[(subset, theta)] = h / n if n else None
        return out

    def to_dict(self) -> dict:
        acc = self.acc
        return {
            "version": 1,
            "thresholds": list(self.thresholds),
            "counts": dict(self.counts),
            "acc": {
                subset: {f"{t:g}": acc[(subset, t)] for t in self.thresholds}
                for subset in SUBSETS
            },
            "hits": {
                subset: {f"{t:g}": self.hits[(subset, t)] for t in self.thresholds}
                for subset in SUBSETS
            },
            "per_sample": [{"sample_id": s, "iou": v} for s, v in self.per_sample],
            "missing_predictions": list(self.missing),
            "unmatched_predictions": list(self.unmatched),
        }


def evaluate(
    samples: Sequence[GroundingSample],
    grids: Mapping[str, object],
    preds: Iterable[GroundingPrediction],
    thresholds: Iterable[float] = DEFAULT_THRESHOLDS,
    workers: int = 1,
) -> EvaluationReport:
    """Score predictions against box-extracted ground truth.

    ``grids`` maps each sample's ``grid_ref`` to its OccupancyGrid. A sample
    without a prediction scores IoU 0; predictions for unknown ids are listed
    in ``unmatched`` and otherwise ignored.
    """
    thresholds = tuple(sorted(set(float(t) for t in thresholds)))
    for t in thresholds:
        _check_threshold(t)

    by_id: Dict[str, GroundingPrediction] = {}
    for p in preds:
        if p.sample_id in by_id:
            logger.warning("duplicate prediction for %s, keeping the last one", p.sample_id)
        by_id[p.sample_id] = p
    known = {s.sample_id for s in samples}
    unmatched = sorted(set(by_id) - known)
    for sid in unmatched:
        logger.warning("prediction for unknown sample %s", sid)

    def score(s: GroundingSample) -> float:
        gt = extract_gt_occupancy(grids[s.grid_ref], s.box)
        pred = by_id.get(s.sample_id)
        if pred is None:
            return 0.0
        return iou(gt, pred.voxels)

    ordered = sorted(samples, key=lambda s: s.sample_id)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as ex:
            values = list(ex.map(score, ordered))
    else:
        values = [score(s) for s in ordered]

    missing = [s.sample_id for s in ordered if s.sample_id not in by_id]
    for sid in missing:
        logger.warning("no prediction for sample %s, scoring IoU 0", sid)

    counts = {k: 0 for k in SUBSETS}
    hits = {(k, t): 0 for k in SUBSETS for t in thresholds}
    for s, v in zip(ordered, values):
        subset = "unique" if s.is_unique else "multiple"
        for k in (subset, "overall"):
            counts[k] += 1
            for t in thresholds:
                hits[(k, t)] += v > t

    return EvaluationReport(
        per_sample=[(s.sample_id, v) for s, v in zip(ordered, values)],
        thresholds=thresholds,
        counts=counts,
        hits=hits,
        missing=missing,
        unmatched=unmatched,
    )


def format_table(report: EvaluationReport, title: str = "Method") -> str:
    """Plain-text table: Unique / Multiple / Overall x Acc@theta in percent."""
    acc = report.acc
    cols = [(s, t) for s in SUBSETS for t in report.thresholds]
    head1 = [title] + [s.capitalize() for s, _ in cols]
    head2 = [""] + [f"Acc@{t:g}(%)" for _, t in cols]
    row = ["result"] + ["-" if acc[c] is None else f"{100 * acc[c]:.2f}" for c in cols]
    row_n = ["n"] + [str(report.counts[s]) for s, _ in cols]
    width = [max(len(r[i]) for r in (head1, head2, row, row_n)) for i in range(len(head1))]
    lines = [
        "  ".join(cell.ljust(width[i]) if i == 0 else cell.rjust(width[i]) for i, cell in enumerate(r))
        for r in (head1, head2, row, row_n)
    ]
    return "\n".join(lines)
