"""GUI-Overlay synthesis: paste application windows onto desktop backgrounds.

A placement puts a window's top-left corner at `offset` (background
fractions) and stretches it to `scale` of the background in each dimension.
Pixel rectangles are rounded once in `placement_rect`; annotation transfer
uses the same rectangle the compositor pastes into, so boxes match pixels.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from errors import AssetError, DegenerateAnnotationError, OffScreenError, PlanningError, ValidationError
from schema import DatasetManifest, GroundingSample, NormBox, NormPoint, TaskKind, quantize_3dp
from utils import atomic_write, ordered_map

logger = logging.getLogger(__name__)

MIN_INSIDE_FRACTION = 0.25
OCCLUSION_LIMIT = 0.5
PLAN_RETRIES = 100
SOURCE_TAG = 'synthetic/overlay'


@dataclass(frozen=True)
class WindowAsset:
    asset_id: str
    image: Image.Image
    annotations: tuple

    def __post_init__(self):
        object.__setattr__(self, 'annotations', tuple(
            (str(text), box if isinstance(box, NormBox) else NormBox(*box)) for text, box in self.annotations
        ))

    @property
    def size(self):
        return self.image.size


@dataclass(frozen=True)
class Placement:
    window_index: int
    offset: NormPoint
    scale: float
    z_order: int

    def __post_init__(self):
        if self.scale <= 0:
            raise ValidationError(f"placement scale {self.scale} must be positive")


@dataclass(frozen=True)
class CompositionPlan:
    background_id: str
    placements: tuple
    rng_seed: int

    def __post_init__(self):
        object.__setattr__(self, 'placements', tuple(self.placements))


@dataclass(frozen=True)
class SynthConfig:
    k_windows: int = 3
    count: int = 100
    seed: int = 7
    scale_range: tuple = (0.3, 0.7)

    def __post_init__(self):
        lo, hi = self.scale_range
        if self.k_windows < 0 or self.count < 0:
            raise ValidationError("k_windows and count must be non-negative")
        if not 0 < lo <= hi:
            raise ValidationError(f"scale_range {self.scale_range} must satisfy 0 < lo <= hi")


def load_window_asset(asset_dir):
    """`<asset>/image.png` plus `<asset>/annotations.json` ([{"instruction", "box"}])"""
    asset_dir = Path(asset_dir)
    try:
        with Image.open(asset_dir / 'image.png') as image:
            image = image.convert('RGB')
        with open(asset_dir / 'annotations.json', 'r', encoding='utf-8') as file:
            items = json.load(file)
        annotations = tuple((item['instruction'], tuple(item['box'])) for item in items)
    except (OSError, UnidentifiedImageError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise AssetError(f"cannot load window asset {asset_dir}: {e}") from e
    return WindowAsset(asset_dir.name, image, annotations)


def placement_rect(placement, background_size):
    """Integer pixel rectangle (left, top, width, height) the window is pasted into"""
    bg_w, bg_h = background_size
    left = int(round(placement.offset.x * bg_w))
    top = int(round(placement.offset.y * bg_h))
    width = max(1, int(round(placement.scale * bg_w)))
    height = max(1, int(round(placement.scale * bg_h)))
    return left, top, width, height


def _normalized_rect(placement, background_size):
    left, top, width, height = placement_rect(placement, background_size)
    bg_w, bg_h = background_size
    return left / bg_w, top / bg_h, (left + width) / bg_w, (top + height) / bg_h


def inside_fraction(placement, background_size):
    """Fraction of the placed window's area that lies on the background"""
    x0, y0, x1, y1 = _normalized_rect(placement, background_size)
    iw = max(0.0, min(x1, 1.0) - max(x0, 0.0))
    ih = max(0.0, min(y1, 1.0) - max(y0, 0.0))
    return iw * ih / ((x1 - x0) * (y1 - y0))


def transform_annotation(box, placement, background_size):
    """Window-local box to background coordinates: scale, translate, clip, quantize"""
    left, top, width, height = placement_rect(placement, background_size)
    bg_w, bg_h = background_size
    gx0 = (left + box.x0 * width) / bg_w
    gy0 = (top + box.y0 * height) / bg_h
    gx1 = (left + box.x1 * width) / bg_w
    gy1 = (top + box.y1 * height) / bg_h
    cx0, cy0 = max(gx0, 0.0), max(gy0, 0.0)
    cx1, cy1 = min(gx1, 1.0), min(gy1, 1.0)
    if cx0 >= cx1 or cy0 >= cy1:
        raise OffScreenError(f"box {box.as_list()} lands outside the background")
    qx0, qy0, qx1, qy1 = (quantize_3dp(v) for v in (cx0, cy0, cx1, cy1))
    if qx0 >= qx1 or qy0 >= qy1:
        raise DegenerateAnnotationError(f"box {box.as_list()} collapses to zero area at three decimals")
    return NormBox(qx0, qy0, qx1, qy1)


def inverse_transform(box, placement, background_size):
    """Background box back to window-local fractions (no clipping)"""
    left, top, width, height = placement_rect(placement, background_size)
    bg_w, bg_h = background_size
    return ((box.x0 * bg_w - left) / width, (box.y0 * bg_h - top) / height,
            (box.x1 * bg_w - left) / width, (box.y1 * bg_h - top) / height)


def union_coverage(box, rects):
    """Fraction of box covered by the union of rects, exact by coordinate compression"""
    area = (box.x1 - box.x0) * (box.y1 - box.y0)
    if area <= 0 or not rects:
        return 0.0
    clipped = []
    for x0, y0, x1, y1 in rects:
        x0, y0 = max(x0, box.x0), max(y0, box.y0)
        x1, y1 = min(x1, box.x1), min(y1, box.y1)
        if x0 < x1 and y0 < y1:
            clipped.append((x0, y0, x1, y1))
    if not clipped:
        return 0.0
    xs = np.unique([v for r in clipped for v in (r[0], r[2])])
    ys = np.unique([v for r in clipped for v in (r[1], r[3])])
    covered = np.zeros((len(xs) - 1, len(ys) - 1), dtype=bool)
    for x0, y0, x1, y1 in clipped:
        i0, i1 = np.searchsorted(xs, x0), np.searchsorted(xs, x1)
        j0, j1 = np.searchsorted(ys, y0), np.searchsorted(ys, y1)
        covered[i0:i1, j0:j1] = True
    cell_area = np.outer(np.diff(xs), np.diff(ys))
    return float(cell_area[covered].sum() / area)


def occlusion_prune(annotations, placements, background_size):
    """Keep (z_order, payload, box) entries less than half hidden by higher windows

    Boxes are in background coordinates; kept entries are returned unchanged.
    """
    z_values = [p.z_order for p in placements]
    if len(set(z_values)) != len(z_values):
        raise ValidationError("placement z_order values must be unique")
    rects = {p.z_order: _normalized_rect(p, background_size) for p in placements}
    visible = []
    for entry in annotations:
        z, box = entry[0], entry[-1]
        above = [r for other_z, r in rects.items() if other_z > z]
        # tolerance keeps an exact half-cover on the dropped side despite float error
        if union_coverage(box, above) < OCCLUSION_LIMIT - 1e-9:
            visible.append(entry)
    return visible


def validate_plan(plan, assets, background_size):
    z_values = [p.z_order for p in plan.placements]
    if len(set(z_values)) != len(z_values):
        raise ValidationError(f"{plan.background_id}: z_order values must be unique")
    for p in plan.placements:
        if not 0 <= p.window_index < len(assets):
            raise ValidationError(f"{plan.background_id}: window_index {p.window_index} has no asset")
        if inside_fraction(p, background_size) < MIN_INSIDE_FRACTION:
            raise ValidationError(f"{plan.background_id}: window {p.window_index} is less than 25% on screen")


def plan_random(assets, background_size, k_windows, seed, background_id="bg", scale_range=(0.3, 0.7)):
    """Seeded placements of k distinct windows, each at least 25% on screen"""
    if k_windows > len(assets):
        raise PlanningError(f"asked for {k_windows} windows but only {len(assets)} assets exist")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(assets), size=k_windows, replace=False) if k_windows else []
    z_orders = rng.permutation(k_windows)
    placements = []
    for window_index, z in zip(chosen, z_orders):
        for _ in range(PLAN_RETRIES):
            scale = float(rng.uniform(*scale_range))
            ox, oy = rng.uniform(0.0, 1.0, size=2)
            candidate = Placement(int(window_index), NormPoint(quantize_3dp(ox), quantize_3dp(oy)), scale, int(z))
            if inside_fraction(candidate, background_size) >= MIN_INSIDE_FRACTION:
                placements.append(candidate)
                break
        else:
            raise PlanningError(f"could not place window {window_index} after {PLAN_RETRIES} tries")
    return CompositionPlan(background_id, tuple(placements), int(seed))


def compose(assets, background, plan, image_ref=None):
    """Paint windows in ascending z_order and emit a point and a box sample per visible annotation"""
    background_size = background.size
    validate_plan(plan, assets, background_size)
    canvas = background.convert('RGB').copy()
    image_ref = image_ref or f"{plan.background_id}-{plan.rng_seed}.png"

    candidates = []
    for placement in sorted(plan.placements, key=lambda p: p.z_order):
        asset = assets[placement.window_index]
        left, top, width, height = placement_rect(placement, background_size)
        window = asset.image.convert('RGB').resize((width, height), Image.BILINEAR)
        canvas.paste(window, (left, top))
        for k, (instruction, box) in enumerate(asset.annotations):
            try:
                global_box = transform_annotation(box, placement, background_size)
            except (OffScreenError, DegenerateAnnotationError) as e:
                logger.debug(f"Dropping {asset.asset_id} annotation {k}: {e}")
                continue
            candidates.append((placement.z_order, (instruction, placement.window_index, k), global_box))

    samples = []
    for _, (instruction, window_index, k), box in occlusion_prune(candidates, plan.placements, background_size):
        stem = f"{plan.background_id}-s{plan.rng_seed}-w{window_index}-a{k}"
        common = dict(image_ref=image_ref, image_size=background_size, instruction=instruction,
                      source='gui-overlay', stage_tags=frozenset({SOURCE_TAG}))
        samples.append(GroundingSample(id=f"{stem}-point", task=TaskKind.CENTER_POINT,
                                       annotation=box.center.quantized(), **common))
        samples.append(GroundingSample(id=f"{stem}-box", task=TaskKind.BOX_PREDICTION,
                                       annotation=box, **common))
    if not samples:
        logger.warning(f"Composition {plan.background_id} (seed {plan.rng_seed}) yielded no visible annotations")
    return canvas, samples


def _load_backgrounds(backgrounds_dir):
    backgrounds = []
    for path in sorted(Path(backgrounds_dir).iterdir()):
        if path.suffix.lower() not in ('.png', '.jpg', '.jpeg'):
            continue
        try:
            with Image.open(path) as image:
                backgrounds.append((path.stem, image.convert('RGB')))
        except (OSError, UnidentifiedImageError) as e:
            raise AssetError(f"cannot decode background {path}: {e}") from e
    return backgrounds


def synthesize(assets_dir, backgrounds_dir, out_dir, cfg, workers=1):
    """Compose cfg.count images into out_dir/images and return their manifest

    Composition i uses background i mod |backgrounds| and seed cfg.seed + i,
    so a rerun with the same inputs reproduces every image and record.
    """
    assets = [load_window_asset(d) for d in sorted(Path(assets_dir).iterdir()) if d.is_dir()]
    backgrounds = _load_backgrounds(backgrounds_dir)
    if not assets or not backgrounds:
        raise AssetError(f"need at least one window asset and one background "
                         f"(found {len(assets)} and {len(backgrounds)})")
    image_dir = Path(out_dir) / 'images'
    image_dir.mkdir(parents=True, exist_ok=True)

    def build(i):
        background_id, background = backgrounds[i % len(backgrounds)]
        seed = cfg.seed + i
        plan = plan_random(assets, background.size, cfg.k_windows, seed,
                           background_id=background_id, scale_range=cfg.scale_range)
        image_ref = f"images/{background_id}-s{seed}.png"
        canvas, samples = compose(assets, background, plan, image_ref=image_ref)
        with atomic_write(Path(out_dir) / image_ref, mode='wb') as file:
            canvas.save(file, format='PNG')
        return samples

    results = ordered_map(build, range(cfg.count), workers=workers, desc="synth")
    samples = [s for batch in results for s in batch]
    logger.info(f"Synthesized {len(samples)} samples from {cfg.count} compositions",
                extra={'stage': 'synth', 'compositions': cfg.count, 'samples': len(samples)})
    return DatasetManifest(tuple(samples))
