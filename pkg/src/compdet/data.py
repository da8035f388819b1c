"""Synthetic detection scenes with calibrated occlusion levels.

Scenes are procedurally textured: each class is a shape family with a
distinctive texture, composited over a low-contrast background. Occluders are
textured patches superimposed both inside the object box and on the
surrounding context, iterated until the realized object-area and context-area
occlusion fractions land inside the requested level bands.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

from .boxes import BoundingBox
from .errors import DataError, DimensionError, GenerationError, GeometryError, InputError
from .features import save_image

LEVELS = ("L0", "L1", "L2", "L3")
# Object-area occlusion bands per level (fractions, half-open).
FG_BANDS = {"L0": (0.0, 0.2), "L1": (0.2, 0.4), "L2": (0.4, 0.6), "L3": (0.6, 0.8)}
# Context-area occlusion bands; L0 only meaningful together with FG L0.
BG_BANDS = {"L0": (0.0, 0.2), "L1": (0.0, 0.2), "L2": (0.2, 0.4), "L3": (0.4, 0.6)}
CONTEXT_DILATION = 0.5  # context region = box dilated by 50% per side, minus box


NUM_BACKGROUND_TEXTURES = 4


@dataclass(frozen=True)
class SceneSpec:
    class_id: int
    seed: int
    canvas: int = 96
    scale: int = 48  # object extent in pixels, fixed across a dataset
    pose: int = 0
    n_poses: int = 2
    background: int | None = None  # texture id; None = drawn from the seed


@dataclass
class Annotation:
    class_id: int
    box: BoundingBox
    object_mask: np.ndarray            # (H, W) bool, unoccluded object
    occluder_mask: np.ndarray          # (H, W) bool, union of occluders
    fg_level: str = "L0"
    bg_level: str = "L0"
    fg_fraction: float = 0.0
    bg_fraction: float = 0.0
    pose: int = 0


def _coords(h: int, w: int):
    return np.meshgrid(np.arange(h), np.arange(w), indexing="ij")


def background_texture(texture_id: int, h: int, w: int) -> np.ndarray:
    """Low-contrast canvas-locked background texture from a small fixed family.

    The family is deliberately finite: the feature dictionary can then cover
    background appearance as tightly as object appearance, so detection scores
    discriminate through the learned mixture coefficients rather than through
    how lucky a background patch happens to be at matching some kernel.
    """
    yy, xx = _coords(h, w)
    if texture_id % NUM_BACKGROUND_TEXTURES == 0:
        pattern = (yy // 4) % 2
        a, b = (0.45, 0.50, 0.62), (0.55, 0.60, 0.72)
    elif texture_id % NUM_BACKGROUND_TEXTURES == 1:
        pattern = ((xx // 8) + (yy // 8)) % 2
        a, b = (0.62, 0.55, 0.48), (0.50, 0.44, 0.38)
    elif texture_id % NUM_BACKGROUND_TEXTURES == 2:
        pattern = ((xx + yy) // 4) % 2
        a, b = (0.44, 0.56, 0.44), (0.56, 0.66, 0.56)
    else:
        pattern = (xx // 8) % 2
        a, b = (0.56, 0.48, 0.62), (0.46, 0.40, 0.52)
    return np.where(pattern[..., None] == 0, np.array(a), np.array(b))


def class_texture(class_id: int, h: int, w: int) -> np.ndarray:
    yy, xx = _coords(h, w)
    if class_id % 3 == 0:
        pattern = (xx // 4) % 2
        a, b = (0.90, 0.10, 0.10), (0.95, 0.85, 0.10)
    elif class_id % 3 == 1:
        pattern = ((xx // 6) + (yy // 6)) % 2
        a, b = (0.10, 0.20, 0.90), (0.10, 0.80, 0.30)
    else:
        pattern = ((xx + yy) // 5) % 2
        a, b = (0.85, 0.10, 0.85), (0.10, 0.85, 0.85)
    tex = np.where(pattern[..., None] == 0, np.array(a), np.array(b))
    return tex


def occluder_texture(texture_id: int, h: int, w: int) -> np.ndarray:
    yy, xx = _coords(h, w)
    if texture_id % 4 == 0:
        pattern = (yy // 3) % 2
        a, b = (0.05, 0.05, 0.05), (0.95, 0.95, 0.95)
    elif texture_id % 4 == 1:
        pattern = (((xx % 8) - 4) ** 2 + ((yy % 8) - 4) ** 2 < 8).astype(int)
        a, b = (0.55, 0.30, 0.05), (0.95, 0.55, 0.10)
    elif texture_id % 4 == 2:
        pattern = ((xx - yy) // 4) % 2
        a, b = (0.05, 0.35, 0.10), (0.35, 0.75, 0.30)
    else:
        pattern = ((xx // 2) + (yy // 5)) % 2
        a, b = (0.40, 0.05, 0.45), (0.75, 0.70, 0.75)
    return np.where(pattern[..., None] == 0, np.array(a), np.array(b))


def default_occluder_bank() -> list[int]:
    return [0, 1, 2, 3]


def _shape_mask(class_id: int, pose: int, scale: int) -> np.ndarray:
    """Binary mask of the object shape inside a scale x scale tile."""
    s = scale
    yy, xx = _coords(s, s)
    if class_id % 3 == 0:
        if pose % 2 == 0:
            return (yy >= s * 0.15) & (yy < s * 0.85)
        return (xx >= s * 0.15) & (xx < s * 0.85)
    if class_id % 3 == 1:
        cy = cx = (s - 1) / 2.0
        ry, rx = (s * 0.5, s * 0.35) if pose % 2 == 0 else (s * 0.35, s * 0.5)
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    if pose % 2 == 0:
        return (xx >= (s - 1 - yy) * 0.5) & (xx <= s - 1 - (s - 1 - yy) * 0.5)
    return (yy >= xx * 0.5) & (yy <= s - 1 - xx * 0.5)


def generate_scene(spec: SceneSpec) -> tuple[np.ndarray, Annotation]:
    """Render one unoccluded scene; deterministic per seed."""
    if spec.scale > spec.canvas:
        raise GeometryError(
            f"object scale {spec.scale} exceeds canvas {spec.canvas}"
        )
    rng = np.random.default_rng(spec.seed)
    h = w = spec.canvas
    bg_id = spec.background
    if bg_id is None:
        bg_id = int(rng.integers(NUM_BACKGROUND_TEXTURES))
    image = background_texture(bg_id, h, w)

    shape = _shape_mask(spec.class_id, spec.pose, spec.scale)
    margin = max(2, (spec.canvas - spec.scale) // 8)
    # Placement is quantized to the texture period (8 px) so that, with the
    # canvas-locked textures, object and boundary appearance is strictly
    # repeatable across scenes; appearance then lives in a small kernel set.
    slots = [p for p in range(0, spec.canvas - spec.scale + 1, 8)
             if margin <= p <= spec.canvas - spec.scale - margin]
    if not slots:
        slots = [(spec.canvas - spec.scale) // 2]
    top = int(rng.choice(slots))
    left = int(rng.choice(slots))

    mask = np.zeros((h, w), dtype=bool)
    mask[top:top + spec.scale, left:left + spec.scale] = shape
    tex = class_texture(spec.class_id, h, w)
    # Object-locked color gradient: blend toward a channel-rotated copy of the
    # texture along the tile diagonal. Without it the class textures are
    # translation invariant and windows that catch the object off-register
    # score as well as the centered one; the gradient ties local appearance to
    # the position inside the object.
    yy, xx = _coords(h, w)
    g = np.clip(((xx - left) + (yy - top)) / (2.0 * spec.scale), 0.0, 1.0)
    lam = (0.5 * g)[..., None]
    tex = (1.0 - lam) * tex + lam * tex[..., [1, 2, 0]]
    image = np.where(mask[..., None], tex, image)

    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    box = BoundingBox(float(cols[0]), float(rows[0]), float(cols[-1] + 1),
                      float(rows[-1] + 1), class_id=spec.class_id)
    ann = Annotation(class_id=spec.class_id, box=box, object_mask=mask,
                     occluder_mask=np.zeros_like(mask), pose=spec.pose)
    return image, ann


def context_region(box: BoundingBox, h: int, w: int) -> np.ndarray:
    """Dilation band around the box (clipped to canvas), excluding the box."""
    dil = box.dilated(CONTEXT_DILATION)
    yy, xx = _coords(h, w)
    in_dil = (xx >= dil.x_min) & (xx < dil.x_max) & (yy >= dil.y_min) & (yy < dil.y_max)
    in_box = (xx >= box.x_min) & (xx < box.x_max) & (yy >= box.y_min) & (yy < box.y_max)
    return in_dil & ~in_box


def compute_occlusion_fraction(object_mask: np.ndarray, occluder_mask: np.ndarray) -> float:
    """|object AND occluder| / |object|."""
    if object_mask.shape != occluder_mask.shape:
        raise DimensionError(
            f"mask shapes differ: {object_mask.shape} vs {occluder_mask.shape}"
        )
    total = int(object_mask.sum())
    if total == 0:
        raise InputError("object mask is empty")
    return float(np.logical_and(object_mask, occluder_mask).sum()) / total


def _stamp_patch(occ_mask, occ_layer, rng, bank, cy, cx, radius):
    h, w = occ_mask.shape
    yy, xx = _coords(h, w)
    ry = radius * (0.7 + 0.6 * rng.random())
    rx = radius * (0.7 + 0.6 * rng.random())
    patch = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    tex = occluder_texture(int(rng.choice(bank)), h, w)
    occ_mask |= patch
    occ_layer[patch] = tex[patch]


def superimpose_occluders(
    image: np.ndarray, ann: Annotation, fg_level: str, bg_level: str,
    bank: list[int] | None = None, seed: int = 0, max_attempts: int = 400,
) -> tuple[np.ndarray, Annotation]:
    """Place occluder patches until both realized fractions hit their bands."""
    if fg_level not in LEVELS or bg_level not in LEVELS:
        raise InputError(f"unknown occlusion level ({fg_level}, {bg_level})")
    if fg_level == "L0" and bg_level == "L0":
        out = replace(ann, fg_level="L0", bg_level="L0",
                      fg_fraction=0.0, bg_fraction=0.0)
        return image.copy(), out
    if fg_level == "L0" or bg_level == "L0":
        raise InputError("L0 must be requested for both foreground and background")
    if bank is None:
        bank = default_occluder_bank()
    if not bank:
        raise InputError("occluder bank is empty")

    h, w = ann.object_mask.shape
    ctx = context_region(ann.box, h, w)
    ctx_area = int(ctx.sum())
    fg_lo, fg_hi = FG_BANDS[fg_level]
    bg_lo, bg_hi = BG_BANDS[bg_level]
    rng = np.random.default_rng(seed)
    box = ann.box
    last = (0.0, 0.0)

    for _ in range(max_attempts):
        occ_mask = np.zeros((h, w), dtype=bool)
        occ_layer = np.zeros_like(image)
        ok = True
        # Foreground phase: patches centered inside the object box.
        for _ in range(200):
            fg = compute_occlusion_fraction(ann.object_mask, occ_mask)
            if fg >= fg_lo:
                break
            cy = rng.uniform(box.y_min + 4, box.y_max - 4)
            cx = rng.uniform(box.x_min + 4, box.x_max - 4)
            # Patches are kept large relative to the backbone receptive field
            # so occluded feature cells see mostly occluder texture instead of
            # unmodelable occluder/object pixel mixtures.
            _stamp_patch(occ_mask, occ_layer, rng, bank, cy, cx,
                         rng.uniform(10.0, 16.0))
        fg = compute_occlusion_fraction(ann.object_mask, occ_mask)
        if not (fg_lo <= fg < fg_hi):
            last = (fg, float((occ_mask & ctx).sum()) / max(ctx_area, 1))
            continue
        # Background phase: patches centered in the context band.
        ctx_points = np.argwhere(ctx)
        for _ in range(200):
            bg = float((occ_mask & ctx).sum()) / ctx_area
            if bg >= bg_lo:
                break
            cy, cx = ctx_points[int(rng.integers(len(ctx_points)))]
            _stamp_patch(occ_mask, occ_layer, rng, bank, float(cy), float(cx),
                         rng.uniform(8.0, 14.0))
            fg = compute_occlusion_fraction(ann.object_mask, occ_mask)
            if fg >= fg_hi:
                ok = False
                break
        bg = float((occ_mask & ctx).sum()) / ctx_area
        fg = compute_occlusion_fraction(ann.object_mask, occ_mask)
        last = (fg, bg)
        if ok and fg_lo <= fg < fg_hi and bg_lo <= bg < bg_hi:
            out_img = np.where(occ_mask[..., None], occ_layer, image)
            out_ann = replace(
                ann, occluder_mask=occ_mask, fg_level=fg_level, bg_level=bg_level,
                fg_fraction=fg, bg_fraction=bg,
            )
            return out_img, out_ann
    raise GenerationError(
        f"could not reach bands fg={fg_level} {FG_BANDS[fg_level]}, "
        f"bg={bg_level} {BG_BANDS[bg_level]} after {max_attempts} attempts "
        f"(last realized fg={last[0]:.3f}, bg={last[1]:.3f})"
    )


def generate_background(canvas: int, seed: int, bank: list[int] | None = None,
                        n_patches: int = 6) -> np.ndarray:
    """Object-free occluder clutter image, for occluder-model learning.

    The canvas is occluder texture throughout (a base layer plus random
    patches of the other bank entries), not scene background. The outlier
    histograms learned from this split then explain occluders only; if they
    also covered the scene background, the occlusion switch would subsidize
    any scan window whose cells disagree with the model over plain
    background, and partially out-of-bounds windows would collect that
    subsidy scaled by the border normalization.
    """
    if bank is None:
        bank = default_occluder_bank()
    rng = np.random.default_rng(seed)
    image = occluder_texture(int(rng.choice(bank)), canvas, canvas)
    occ_mask = np.zeros((canvas, canvas), dtype=bool)
    occ_layer = np.zeros_like(image)
    for _ in range(n_patches):
        _stamp_patch(occ_mask, occ_layer, rng, bank,
                     rng.uniform(0, canvas), rng.uniform(0, canvas),
                     rng.uniform(10.0, 16.0))
    return np.where(occ_mask[..., None], occ_layer, image)


# ---------------------------------------------------------------------------
# Dataset directory layout

@dataclass
class DatasetRecord:
    image_id: str
    path: str
    class_id: int
    box: BoundingBox | None
    fg_level: str = "L0"
    bg_level: str = "L0"
    fg_fraction: float = 0.0
    bg_fraction: float = 0.0
    pose: int = 0

    @property
    def level_key(self) -> tuple[str, str]:
        return (self.fg_level, self.bg_level)


# Seed offsets keep splits disjoint by construction.
SPLIT_SEED_BASE = {"train": 0, "val": 100_000, "test": 200_000, "bg": 300_000}


def generate_dataset(
    out_dir: str, n_classes: int = 3, seed: int = 0, canvas: int = 96,
    scale: int = 48, n_poses: int = 2, train_per_class: int = 12,
    val_per_class: int = 4, test_per_class: int = 8,
    test_levels: list[tuple[str, str]] | None = None, n_background: int = 16,
) -> dict:
    """Write a full dataset (images, masks, annotations, manifest)."""
    if test_levels is None:
        test_levels = [("L0", "L0"), ("L2", "L2"), ("L3", "L3")]
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    manifest: dict[str, list[DatasetRecord]] = {s: [] for s in SPLIT_SEED_BASE}
    ann_lines = []
    counters = {s: 0 for s in SPLIT_SEED_BASE}

    def emit(split, image, ann):
        idx = counters[split]
        counters[split] += 1
        image_id = f"{split}_{idx:05d}"
        rel = f"images/{image_id}.png"
        save_image(image, os.path.join(out_dir, rel))
        if ann is not None:
            for suffix, mask in (("obj", ann.object_mask), ("occ", ann.occluder_mask)):
                out = (mask.astype(np.uint8) * 255)
                Image.fromarray(out, mode="L").save(
                    os.path.join(out_dir, f"masks/{image_id}_{suffix}.png"))
            rec = DatasetRecord(
                image_id=image_id, path=rel, class_id=ann.class_id, box=ann.box,
                fg_level=ann.fg_level, bg_level=ann.bg_level,
                fg_fraction=ann.fg_fraction, bg_fraction=ann.bg_fraction,
                pose=ann.pose,
            )
            b = ann.box
            ann_lines.append(
                f"{image_id} {rel} {ann.class_id} {b.x_min:.1f} {b.y_min:.1f} "
                f"{b.x_max:.1f} {b.y_max:.1f} {ann.fg_level} {ann.bg_level} "
                f"{ann.fg_fraction:.6f} {ann.bg_fraction:.6f} {ann.pose}"
            )
        else:
            rec = DatasetRecord(image_id=image_id, path=rel, class_id=-1, box=None)
            ann_lines.append(f"{image_id} {rel} -1 - - - - L0 L0 0 0 0")
        manifest[split].append(rec)

    for split, per_class in (("train", train_per_class), ("val", val_per_class)):
        base = seed + SPLIT_SEED_BASE[split]
        for cid in range(n_classes):
            for i in range(per_class):
                spec = SceneSpec(class_id=cid, seed=base + 1000 * cid + i,
                                 canvas=canvas, scale=scale, pose=i % n_poses,
                                 n_poses=n_poses)
                image, ann = generate_scene(spec)
                emit(split, image, ann)

    base = seed + SPLIT_SEED_BASE["test"]
    for li, (fg, bg) in enumerate(test_levels):
        for cid in range(n_classes):
            for i in range(test_per_class):
                s = base + 100_00 * li + 1000 * cid + i
                spec = SceneSpec(class_id=cid, seed=s, canvas=canvas, scale=scale,
                                 pose=i % n_poses, n_poses=n_poses)
                image, ann = generate_scene(spec)
                image, ann = superimpose_occluders(image, ann, fg, bg, seed=s + 7)
                emit("test", image, ann)

    base = seed + SPLIT_SEED_BASE["bg"]
    for i in range(n_background):
        emit("bg", generate_background(canvas, base + i), None)

    with open(os.path.join(out_dir, "annotations.txt"), "w") as fh:
        fh.write("\n".join(ann_lines) + "\n")
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        for split in ("train", "val", "test", "bg"):
            for rec in manifest[split]:
                fh.write(f"{split} {rec.image_id} {rec.path}\n")
    return manifest


def load_dataset(root: str) -> dict:
    """Read manifest + annotations back into split -> [DatasetRecord]."""
    ann: dict[str, DatasetRecord] = {}
    ann_path = os.path.join(root, "annotations.txt")
    if not os.path.exists(ann_path):
        raise DataError(f"missing annotations file: {ann_path}")
    with open(ann_path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            image_id, rel, cid = parts[0], parts[1], int(parts[2])
            if cid < 0:
                ann[image_id] = DatasetRecord(image_id=image_id, path=rel,
                                              class_id=-1, box=None)
                continue
            box = BoundingBox(float(parts[3]), float(parts[4]), float(parts[5]),
                              float(parts[6]), class_id=cid)
            ann[image_id] = DatasetRecord(
                image_id=image_id, path=rel, class_id=cid, box=box,
                fg_level=parts[7], bg_level=parts[8],
                fg_fraction=float(parts[9]), bg_fraction=float(parts[10]),
                pose=int(parts[11]),
            )
    manifest: dict[str, list[DatasetRecord]] = {}
    with open(os.path.join(root, "manifest.txt")) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            split, image_id = parts[0], parts[1]
            if image_id not in ann:
                raise DataError(f"manifest references unknown image {image_id}")
            manifest.setdefault(split, []).append(ann[image_id])
    return manifest


def load_mask(root: str, image_id: str, kind: str) -> np.ndarray:
    path = os.path.join(root, f"masks/{image_id}_{kind}.png")
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127
