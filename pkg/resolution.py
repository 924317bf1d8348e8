"""Train / inference resolution caps with aspect-preserving downscale."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from fractions import Fraction

from PIL import Image

from errors import ValidationError

logger = logging.getLogger(__name__)


class Mode(str, Enum):
    TRAIN = "train"
    INFER = "infer"


@dataclass(frozen=True)
class ResolutionPolicy:
    train_cap: tuple = (3072, 3072)
    infer_cap: tuple = (2000, 2000)

    def __post_init__(self):
        for name in ('train_cap', 'infer_cap'):
            cap = tuple(int(v) for v in getattr(self, name))
            if len(cap) != 2 or min(cap) < 1:
                raise ValidationError(f"{name}={cap} must be two positive integers")
            object.__setattr__(self, name, cap)

    def cap_for(self, mode):
        return self.train_cap if Mode(mode) is Mode.TRAIN else self.infer_cap


def _exact_scale(image_size, cap):
    width, height = image_size
    cap_w, cap_h = cap
    if width < 1 or height < 1:
        raise ValidationError(f"image size {image_size} must be positive")
    if width <= cap_w and height <= cap_h:
        return Fraction(1)
    return min(Fraction(cap_w, width), Fraction(cap_h, height))


def cap_resize(image_size, cap):
    """Fit inside cap by the smaller ratio; dims floored, at least 1 px. Returns (size, scale)"""
    scale = _exact_scale(image_size, cap)
    if scale == 1:
        return (int(image_size[0]), int(image_size[1])), 1.0
    # exact rational arithmetic so 3000 * (2000/6000) floors to 1000, not 999
    new_size = tuple(max(1, math.floor(scale * int(d))) for d in image_size)
    return new_size, float(scale)


def format_scale(scale):
    return format(scale, '.6g')


def apply_policy(sample, mode, policy):
    """Resize a sample record under the mode's cap

    Normalized annotations are scale-free and stay untouched; pixel payloads
    are multiplied by the scale, which is recorded as a `resized:<scale>` tag.
    An image already under the cap keeps its size and is tagged `resized:1`.
    """
    new_size, scale = cap_resize(sample.image_size, policy.cap_for(mode))
    previous = sample.tag_value('resized')
    if scale == 1.0:
        return sample if previous else sample.with_tags(f"resized:{format_scale(1.0)}")
    pixel_boxes = tuple(tuple(v * scale for v in box) for box in sample.pixel_boxes)
    # scale relative to the original image accumulates across passes
    total = scale * float(previous) if previous else scale
    tags = {t for t in sample.stage_tags if not t.startswith('resized:')}
    return replace(sample, image_size=new_size, pixel_boxes=pixel_boxes,
                   stage_tags=frozenset(tags | {f"resized:{format_scale(total)}"}))


def resize_image_file(src, dst, cap):
    """Resample an image file to its capped size with bilinear filtering"""
    with Image.open(src) as image:
        new_size, scale = cap_resize(image.size, cap)
        out = image if scale == 1.0 else image.resize(new_size, Image.BILINEAR)
        out.save(dst)
    return new_size, scale
