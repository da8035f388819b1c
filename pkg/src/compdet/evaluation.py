"""IoU / AP scoring under the single-proposal protocol.

Per image, only the highest-scoring proposal of the ground-truth class is
considered; it counts as a true positive iff its IoU with the annotated box
exceeds 0.5. AP is reported per (fg_level, bg_level) cell in percent.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

from .boxes import BoundingBox
from .data import DatasetRecord
from .errors import DataError

IOU_THRESHOLD = 0.5


@dataclass
class EvalReport:
    cells: dict = field(default_factory=dict)   # (fg, bg) -> ap percent
    counts: dict = field(default_factory=dict)  # (fg, bg) -> image count

    @property
    def mean(self) -> float:
        if not self.cells:
            return 0.0
        return sum(self.cells.values()) / len(self.cells)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["fg_level", "bg_level", "ap", "count"])
            for key in sorted(self.cells):
                writer.writerow([key[0], key[1], f"{self.cells[key]:.4f}",
                                 self.counts[key]])
            writer.writerow(["mean", "-", f"{self.mean:.4f}",
                             sum(self.counts.values())])

    def table(self) -> str:
        lines = [f"{'fg':>4} {'bg':>4} {'AP@0.5':>8} {'n':>5}"]
        for key in sorted(self.cells):
            lines.append(f"{key[0]:>4} {key[1]:>4} {self.cells[key]:8.2f} "
                         f"{self.counts[key]:5d}")
        lines.append(f"mean      {self.mean:8.2f} {sum(self.counts.values()):5d}")
        return "\n".join(lines)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection area over union area, in [0, 1]."""
    ix = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def evaluate(records: list[DatasetRecord], detections: dict) -> EvalReport:
    """Score detector outputs against a dataset split.

    `detections` maps image_id -> list of BoundingBox (class_id, score set).
    Every annotated image must have an entry, possibly empty.
    """
    missing = [r.image_id for r in records if r.box is not None
               and r.image_id not in detections]
    if missing:
        raise DataError(
            f"missing detection records for {len(missing)} images: "
            + ", ".join(missing[:10])
        )
    hits: dict[tuple, int] = {}
    totals: dict[tuple, int] = {}
    for rec in records:
        if rec.box is None:
            continue
        key = rec.level_key
        totals[key] = totals.get(key, 0) + 1
        candidates = [d for d in detections[rec.image_id]
                      if d.class_id == rec.class_id]
        tp = 0
        if candidates:
            best = max(candidates, key=lambda d: d.score)
            if iou(best, rec.box) > IOU_THRESHOLD:
                tp = 1
        hits[key] = hits.get(key, 0) + tp
    cells = {key: 100.0 * hits[key] / totals[key] for key in totals}
    return EvalReport(cells=cells, counts=totals)
