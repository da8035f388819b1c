"""Scanning detection layer, non-maximum suppression and corner voting.

The scan evaluates a compositional model centered at every lattice position,
producing a spatial log-likelihood map per corner role. Center peaks anchor a
geometric search for the bottom-left / top-right corner maxima, which vote the
final bounding box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as tf
from PIL import Image

from .boxes import BoundingBox
from .errors import ConfigurationError, DataError, GeometryError
from .features import FeatureMap
from .model import CompositionalModel, OccluderModel, CORNER_ROLES, _log_clamped
from .vmf import VmfDictionary, kernel_responses


@dataclass
class LikelihoodMap:
    scores: torch.Tensor   # (H, W) float64 log-likelihood per position
    corner: str
    class_id: int
    mixture: torch.Tensor  # (H, W) int64, best mixture per position
    stride: int = 8
    origin: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.scores.shape)


@dataclass
class Detection:
    box: BoundingBox
    class_id: int
    score: float
    center: tuple[int, int]        # (row, col) cells
    bl: tuple[int, int] | None
    tr: tuple[int, int] | None
    point_scores: dict


def scan_mixture_stack(
    values: torch.Tensor, model: CompositionalModel, dictionary: VmfDictionary,
    occ: OccluderModel | None, omega: float | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Normalized log-score of every mixture at every position.

    Returns (stack (M, H, W), counts (H, W)). Model positions falling outside
    the map contribute nothing; each score is rescaled by grid_size / count so
    border positions stay comparable to interior ones (which are exact window
    sums). Differentiable in the feature values and model coefficients.
    """
    if omega is None:
        omega = model.omega
    h, w, _ = values.shape
    hm, wm = model.grid
    cy, cx = hm // 2, wm // 2
    grid_size = hm * wm
    resp = kernel_responses(values, dictionary)  # (H, W, K)

    occ_term = None
    if occ is not None:
        occ_best = _log_clamped(resp @ occ.beta.T).max(dim=-1).values
        occ_term = math.log(model.rho) + occ_best  # (H, W)
    log_vis_prior = math.log1p(-model.rho) if occ is not None else 0.0

    offsets = []
    counts = torch.zeros((h, w), dtype=torch.float64)
    q = 0
    for i in range(hm):
        for j in range(wm):
            di, dj = i - cy, j - cx
            r0, r1 = max(0, -di), min(h, h - di)
            c0, c1 = max(0, -dj), min(w, w - dj)
            if r0 < r1 and c0 < c1:
                offsets.append((q, di, dj, r0, r1, c0, c1))
                counts[r0:r1, c0:c1] += 1.0
            q += 1

    maps = []
    for m in range(model.mixtures):
        blend = omega * model.chi[m] + (1.0 - omega) * model.A[m]  # (Hm, Wm, K)
        mix = _log_clamped(resp @ blend.reshape(grid_size, -1).T)  # (H, W, Q)
        robust = log_vis_prior + mix
        if occ_term is not None:
            robust = torch.maximum(robust, occ_term.unsqueeze(-1))
        parts = []
        for q, di, dj, r0, r1, c0, c1 in offsets:
            contrib = robust[r0 + di:r1 + di, c0 + dj:c1 + dj, q]
            parts.append(tf.pad(contrib, (c0, w - c1, r0, h - r1)))
        acc = torch.stack(parts, dim=0).sum(dim=0)
        maps.append(acc * (grid_size / counts))
    return torch.stack(maps, dim=0), counts


def scan_likelihood_map(
    fmap: FeatureMap, model: CompositionalModel, dictionary: VmfDictionary,
    occ: OccluderModel | None, omega: float | None = None,
) -> LikelihoodMap:
    """Spatial log-likelihood map R for one model: hard max over mixtures."""
    with torch.no_grad():
        stack, _ = scan_mixture_stack(fmap.values, model, dictionary, occ, omega)
        scores, mixture = stack.max(dim=0)
    return LikelihoodMap(
        scores=scores, corner=model.corner, class_id=model.class_id,
        mixture=mixture, stride=fmap.stride, origin=fmap.origin,
    )


def non_max_suppression(rmap: LikelihoodMap, t: float, radius: int) -> list:
    """Peaks above t that dominate their radius-neighborhood.

    A cell wins a tie against an equal-scored neighbor iff it precedes it in
    row-major order. Result sorted by descending score, row-major on ties.
    """
    if radius < 1:
        raise ConfigurationError(f"nms radius must be >= 1, got {radius}")
    scores = rmap.scores
    h, w = scores.shape
    peaks = []
    s = scores.numpy()
    for r in range(h):
        for c in range(w):
            v = s[r, c]
            if v < t:
                continue
            r0, r1 = max(0, r - radius), min(h, r + radius + 1)
            c0, c1 = max(0, c - radius), min(w, c + radius + 1)
            dominated = False
            for rr in range(r0, r1):
                for cc in range(c0, c1):
                    if (rr, cc) == (r, c):
                        continue
                    u = s[rr, cc]
                    if u > v or (u == v and (rr, cc) < (r, c)):
                        dominated = True
                        break
                if dominated:
                    break
            if not dominated:
                peaks.append(((r, c), float(v)))
    peaks.sort(key=lambda pc: (-pc[1], pc[0]))
    return peaks


def _region_argmax(scores: torch.Tensor, r0, r1, c0, c1, anchor=None,
                   expected: float = 0.0, prior_weight: float = 0.0):
    """Argmax over a region, optionally penalized by squared deviation of the
    per-axis displacement from `anchor` against the `expected` offset.
    Returns (row, col, unpenalized score)."""
    if r0 >= r1 or c0 >= c1:
        return None
    sub = scores[r0:r1, c0:c1]
    if prior_weight > 0.0 and anchor is not None:
        rows = torch.arange(r0, r1, dtype=torch.float64)
        cols = torch.arange(c0, c1, dtype=torch.float64)
        dr = (rows - anchor[0]).abs()
        dc = (cols - anchor[1]).abs()
        pen = prior_weight * ((dr - expected) ** 2).unsqueeze(1) \
            + prior_weight * ((dc - expected) ** 2).unsqueeze(0)
        sub = sub - pen
    flat = int(sub.reshape(-1).argmax())
    rr, cc = divmod(flat, sub.shape[1])
    return (r0 + rr, c0 + cc, float(scores[r0 + rr, c0 + cc]))


def vote_bounding_box(
    center: tuple[tuple[int, int], float], r_bl: LikelihoodMap, r_tr: LikelihoodMap,
    search_window: int, class_id: int | None = None, min_offset: int = 1,
    expected_offset: float = 0.0, prior_weight: float = 0.0,
) -> Detection:
    """Anchor corner search to a center peak and vote the box.

    bl is the best corner-map cell strictly left of and below the center, tr
    strictly right of and above, each between `min_offset` and `search_window`
    cells away per axis. With `prior_weight` > 0 the search subtracts
    prior_weight * (|displacement| - expected_offset)^2 per axis, which keeps
    a flat corner map from pulling the box a cell off. Scores add; cell
    coordinates convert to pixels via the map lattice.
    """
    if r_bl.shape != r_tr.shape:
        raise GeometryError("corner maps must share one lattice")
    if not (1 <= min_offset <= search_window):
        raise GeometryError(
            f"need 1 <= min_offset <= search_window, got {min_offset} vs {search_window}"
        )
    (r, c), ct_score = center
    h, w = r_bl.shape
    bl = _region_argmax(
        r_bl.scores, min(h, r + min_offset), min(h, r + search_window + 1),
        max(0, c - search_window), max(0, c - min_offset + 1),
        anchor=(r, c), expected=expected_offset, prior_weight=prior_weight,
    )
    tr = _region_argmax(
        r_tr.scores, max(0, r - search_window), max(0, r - min_offset + 1),
        min(w, c + min_offset), min(w, c + search_window + 1),
        anchor=(r, c), expected=expected_offset, prior_weight=prior_weight,
    )
    if bl is None or tr is None:
        raise GeometryError(
            f"no feasible corner cells around center {(r, c)} "
            f"(search window {search_window})"
        )
    stride, origin = r_bl.stride, r_bl.origin
    x_min = bl[1] * stride + origin
    y_max = bl[0] * stride + origin
    x_max = tr[1] * stride + origin
    y_min = tr[0] * stride + origin
    cid = r_bl.class_id if class_id is None else class_id
    score = ct_score + bl[2] + tr[2]
    box = BoundingBox(x_min, y_min, x_max, y_max, class_id=cid, score=score)
    return Detection(
        box=box, class_id=cid, score=score, center=(r, c),
        bl=(bl[0], bl[1]), tr=(tr[0], tr[1]),
        point_scores={"ct": ct_score, "bl": bl[2], "tr": tr[2]},
    )


def fixed_size_box(
    center: tuple[tuple[int, int], float], rmap: LikelihoodMap,
    grid: tuple[int, int], class_id: int,
) -> Detection:
    """Baseline: model-grid-sized box anchored at the center peak."""
    (r, c), score = center
    half_h = 0.5 * grid[0] * rmap.stride
    half_w = 0.5 * grid[1] * rmap.stride
    x, y = c * rmap.stride + rmap.origin, r * rmap.stride + rmap.origin
    box = BoundingBox(x - half_w, y - half_h, x + half_w, y + half_h,
                      class_id=class_id, score=score)
    return Detection(box=box, class_id=class_id, score=score, center=(r, c),
                     bl=None, tr=None, point_scores={"ct": score})


def detect(
    fmap: FeatureMap, models: dict, dictionary: VmfDictionary, occ: OccluderModel | None,
    t: float = -1e18, nms_radius: int = 2, search_window: int | None = None,
    omega: float | None = None, box_mode: str = "voted",
    corner_prior_weight: float = 1.0,
) -> list[Detection]:
    """Scan all class models, suppress, vote a box per center peak.

    `models` maps class_id -> {corner role -> CompositionalModel}; every class
    needs all three roles. Returns detections sorted by descending score.
    """
    if not models:
        raise ConfigurationError("no class models supplied")
    if box_mode not in ("voted", "fixed"):
        raise ConfigurationError(f"unknown box mode {box_mode!r}")
    detections = []
    for class_id in sorted(models):
        roles = models[class_id]
        missing = [c for c in CORNER_ROLES if c not in roles]
        if missing:
            raise ConfigurationError(f"class {class_id} lacks corner roles {missing}")
        grid = roles["ct"].grid
        # Corners of an object the size of the model grid sit about half the
        # grid extent from the center; the search band brackets that range so
        # a spurious far-away corner maximum cannot stretch the box.
        sw = search_window if search_window is not None else (3 * max(grid)) // 4
        mo = max(1, max(grid) // 3)
        maps = {c: scan_likelihood_map(fmap, roles[c], dictionary, occ, omega)
                for c in CORNER_ROLES}
        for peak in non_max_suppression(maps["ct"], t, nms_radius):
            if box_mode == "fixed":
                detections.append(fixed_size_box(peak, maps["ct"], grid, class_id))
                continue
            try:
                detections.append(
                    vote_bounding_box(peak, maps["bl"], maps["tr"], sw, class_id,
                                      min_offset=mo, expected_offset=0.5 * max(grid),
                                      prior_weight=corner_prior_weight)
                )
            except GeometryError:
                detections.append(fixed_size_box(peak, maps["ct"], grid, class_id))
    detections.sort(key=lambda d: -d.score)
    return detections


def save_heatmap(rmap: LikelihoodMap, path) -> None:
    """8-bit grayscale PNG scaled to [min, max]; scale in a sidecar .txt."""
    s = rmap.scores.numpy()
    lo, hi = float(s.min()), float(s.max())
    span = hi - lo if hi > lo else 1.0
    img = np.clip((s - lo) / span * 255.0, 0, 255).round().astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)
    with open(str(path) + ".txt", "w") as fh:
        fh.write(f"min {lo!r}\nmax {hi!r}\n")


def write_detections(path, records: dict) -> None:
    """Line-delimited records: id class score x_min y_min x_max y_max.

    Images without detections get an explicit `<id> none` line so evaluation
    can verify coverage.
    """
    with open(path, "w") as fh:
        for image_id in sorted(records):
            dets = records[image_id]
            if not dets:
                fh.write(f"{image_id} none\n")
                continue
            for d in dets:
                b = d.box if isinstance(d, Detection) else d
                fh.write(
                    f"{image_id} {b.class_id} {b.score:.9f} "
                    f"{b.x_min:.4f} {b.y_min:.4f} {b.x_max:.4f} {b.y_max:.4f}\n"
                )


def read_detections(path) -> dict:
    records: dict[str, list[BoundingBox]] = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) == 2 and parts[1] == "none":
                records.setdefault(parts[0], [])
                continue
            if len(parts) != 7:
                raise DataError(f"{path}:{ln}: malformed detection record")
            image_id, cid, score, x0, y0, x1, y1 = parts
            records.setdefault(image_id, []).append(
                BoundingBox(float(x0), float(y0), float(x1), float(y1),
                            class_id=int(cid), score=float(score))
            )
    return records
