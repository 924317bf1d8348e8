"""Coverage-score screening of annotations against detected UI elements."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from errors import DegenerateAnnotationError, ValidationError
from schema import DatasetManifest, NormBox, TaskKind
from utils import ordered_map

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DetectionSet:
    image_id: str
    boxes: tuple = ()
    detector: str = "unknown"

    def __post_init__(self):
        boxes = tuple(b if isinstance(b, NormBox) else NormBox(*b) for b in self.boxes)
        object.__setattr__(self, 'boxes', boxes)

    def as_array(self):
        if not self.boxes:
            return np.zeros((0, 4))
        return np.array([b.as_list() for b in self.boxes], dtype=float)

    def centers(self):
        return [b.center for b in self.boxes]

    @classmethod
    def from_dict(cls, obj):
        try:
            return cls(image_id=str(obj['image_id']),
                       boxes=tuple(tuple(b) for b in obj.get('boxes', [])),
                       detector=str(obj.get('detector', 'unknown')))
        except (KeyError, TypeError) as e:
            raise ValidationError(f"bad detection record: {e}") from e


@dataclass(frozen=True)
class FilterConfig:
    tau: float = 0.5
    side_l: float = 0.04

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValidationError(f"tau={self.tau} must be in [0, 1]")
        if not 0.0 < self.side_l <= 1.0:
            raise ValidationError(f"side_l={self.side_l} must be in (0, 1]")


@dataclass(frozen=True)
class FilterResult:
    kept: DatasetManifest
    dropped: DatasetManifest
    missing: DatasetManifest
    scores: dict


def load_detections(detections_dir):
    """Read every `<image_id>.json` detection file in a directory"""
    detections = {}
    for path in sorted(Path(detections_dir).glob('*.json')):
        with open(path, 'r', encoding='utf-8') as file:
            try:
                dets = DetectionSet.from_dict(json.load(file))
            except json.JSONDecodeError as e:
                raise ValidationError(f"{path}: malformed detection file: {e}") from e
        detections[dets.image_id] = dets
    logger.info(f"Loaded detections for {len(detections)} images from {detections_dir}")
    return detections


def expand_point_to_box(p, side_l, image_size):
    """Square B_gt of side side_l*min(W, H) pixels centred on p, clipped to the screen"""
    width, height = image_size
    half = side_l * min(width, height) / 2.0
    px, py = p.x * width, p.y * height
    x0, x1 = max(0.0, px - half), min(float(width), px + half)
    y0, y1 = max(0.0, py - half), min(float(height), py + half)
    return NormBox(x0 / width, y0 / height, x1 / width, y1 / height)


def coverage_score(gt, dets):
    """S = sum_i area(gt & det_i) / area(gt), intersections summed independently (no clamp)"""
    area = gt.area
    if area <= 0.0:
        raise DegenerateAnnotationError(f"annotation box {gt.as_list()} has zero area")
    boxes = dets.as_array() if isinstance(dets, DetectionSet) else np.asarray(dets, dtype=float).reshape(-1, 4)
    if len(boxes) == 0:
        return 0.0
    iw = np.clip(np.minimum(boxes[:, 2], gt.x1) - np.maximum(boxes[:, 0], gt.x0), 0.0, None)
    ih = np.clip(np.minimum(boxes[:, 3], gt.y1) - np.maximum(boxes[:, 1], gt.y0), 0.0, None)
    return float(np.sum(iw * ih) / area)


def ground_truth_box(sample, cfg):
    """B_gt: the annotation box itself, or the expanded square around a point"""
    if sample.task is TaskKind.BOX_PREDICTION:
        return sample.annotation
    return expand_point_to_box(sample.annotation, cfg.side_l, sample.image_size)


def _screen(sample, detections, cfg):
    dets = detections.get(sample.image_id)
    if dets is None:
        return 'missing', None
    try:
        score = coverage_score(ground_truth_box(sample, cfg), dets)
    except DegenerateAnnotationError:
        return 'degenerate', None
    return ('kept' if score >= cfg.tau else 'dropped'), score


def filter_dataset(manifest, detections, cfg, workers=1):
    """Partition a manifest into kept / dropped / missing-detections by S >= tau"""
    outcomes = ordered_map(lambda s: _screen(s, detections, cfg), manifest.samples,
                           workers=workers, desc="filter")
    kept, dropped, missing, scores = [], [], [], {}
    for sample, (verdict, score) in zip(manifest.samples, outcomes):
        if verdict == 'missing':
            missing.append(sample.with_tags('missing-detections'))
            continue
        if verdict == 'degenerate':
            dropped.append(sample.with_tags('coverage:degenerate'))
            continue
        scores[sample.id] = score
        tagged = sample.with_tags(f"coverage:{score:.4f}")
        if verdict == 'kept':
            kept.append(tagged.with_tags('filtered'))
        else:
            dropped.append(tagged)

    logger.info(f"Filter kept {len(kept)}, dropped {len(dropped)}, missing detections {len(missing)}",
                extra={'stage': 'filter', 'kept': len(kept), 'dropped': len(dropped),
                       'missing': len(missing), 'tau': cfg.tau, 'side_l': cfg.side_l})
    return FilterResult(DatasetManifest(tuple(kept)), DatasetManifest(tuple(dropped)),
                        DatasetManifest(tuple(missing)), scores)
