"""Unified grounding data model, JSONL manifest format and canonical prompts.

Every stage reads and writes `GroundingSample` records. Coordinates are
fractions of the image size and serialize with exactly three decimals.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from pathlib import PurePosixPath
from typing import Iterable, Union

import jsonlines

from errors import DuplicateIdError, ImageIdCollisionError, ManifestParseError, RangeError, ValidationError
from utils import atomic_write

_THOUSANDTH = Decimal("0.001")


def quantize_3dp(v):
    """Round a fraction in [0, 1] to 3 decimals, halves away from zero"""
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise RangeError(f"coordinate must be a finite number, got {v!r}")
    if not 0.0 <= v <= 1.0:
        raise RangeError(f"coordinate {v!r} outside [0, 1]")
    # repr gives the shortest decimal that round-trips, so 0.9995 rounds as written
    return float(Decimal(repr(float(v))).quantize(_THOUSANDTH, rounding=ROUND_HALF_UP))


def _check_fraction(name, v):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise RangeError(f"{name} must be a finite number, got {v!r}")
    if not 0.0 <= v <= 1.0:
        raise RangeError(f"{name}={v!r} outside [0, 1]")


@dataclass(frozen=True)
class NormPoint:
    x: float
    y: float

    def __post_init__(self):
        _check_fraction('x', self.x)
        _check_fraction('y', self.y)

    def quantized(self):
        return NormPoint(quantize_3dp(self.x), quantize_3dp(self.y))

    def as_list(self):
        return [self.x, self.y]


@dataclass(frozen=True)
class NormBox:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        for name in ('x0', 'y0', 'x1', 'y1'):
            _check_fraction(name, getattr(self, name))
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise ValidationError(f"box corners out of order: {self.as_list()}")

    @property
    def width(self):
        return self.x1 - self.x0

    @property
    def height(self):
        return self.y1 - self.y0

    @property
    def area(self):
        return self.width * self.height

    @property
    def center(self):
        return NormPoint((self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2)

    def contains(self, p):
        return self.x0 <= p.x <= self.x1 and self.y0 <= p.y <= self.y1

    def quantized(self):
        return NormBox(*(quantize_3dp(v) for v in self.as_list()))

    def as_list(self):
        return [self.x0, self.y0, self.x1, self.y1]


Annotation = Union[NormPoint, NormBox]


def _image_path(image_ref):
    return PurePosixPath(str(image_ref).replace('\\', '/'))


def image_id_for(image_ref):
    """Sidecar key for an image: its path without suffix, directories joined by `__`

    `desk/screen.png` -> `desk__screen`; a bare `screen.png` keeps its stem.
    """
    path = _image_path(image_ref)
    parts = [p for p in path.parent.parts if p not in ('/', '.', '..')]
    return "__".join(parts + [path.stem])


class TaskKind(str, Enum):
    BOX_PREDICTION = "box"
    CENTER_POINT = "point"

    @property
    def arity(self):
        return 4 if self is TaskKind.BOX_PREDICTION else 2

    @classmethod
    def for_annotation(cls, annotation):
        return cls.BOX_PREDICTION if isinstance(annotation, NormBox) else cls.CENTER_POINT


@dataclass(frozen=True)
class GroundingSample:
    id: str
    image_ref: str
    image_size: tuple
    instruction: str
    task: TaskKind
    annotation: Annotation
    source: str
    stage_tags: frozenset = frozenset()
    # Optional pixel-space boxes (e.g. detections kept in pixels); rescaled on resize
    pixel_boxes: tuple = ()

    def __post_init__(self):
        if not self.id:
            raise ValidationError("sample id must be non-empty")
        width, height = self.image_size
        if width < 1 or height < 1:
            raise ValidationError(f"{self.id}: image size {self.image_size} must be at least 1x1")
        expected = NormBox if self.task is TaskKind.BOX_PREDICTION else NormPoint
        if not isinstance(self.annotation, expected):
            raise ValidationError(
                f"{self.id}: task {self.task.value!r} needs a {expected.__name__} annotation"
            )
        object.__setattr__(self, 'image_size', (int(width), int(height)))
        object.__setattr__(self, 'stage_tags', frozenset(self.stage_tags))
        object.__setattr__(self, 'pixel_boxes', tuple(tuple(b) for b in self.pixel_boxes))

    @property
    def image_id(self):
        """Key used to look up sidecar files (detections, elements) for this image"""
        return image_id_for(self.image_ref)

    def with_tags(self, *tags):
        return replace(self, stage_tags=self.stage_tags | set(tags))

    def tag_value(self, prefix):
        """Value of the first `prefix:value` tag, or None"""
        for tag in sorted(self.stage_tags):
            if tag.startswith(prefix + ':'):
                return tag[len(prefix) + 1:]
        return None


@dataclass(frozen=True)
class DatasetManifest:
    samples: tuple = ()
    stats: dict = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        samples = tuple(self.samples)
        duplicates = [i for i, n in Counter(s.id for s in samples).items() if n > 1]
        if duplicates:
            raise DuplicateIdError(f"duplicate sample ids: {sorted(duplicates)[:10]}")
        refs = {}
        for s in samples:
            refs.setdefault(s.image_id, set()).add(str(_image_path(s.image_ref)))
        collisions = {key: sorted(paths) for key, paths in refs.items() if len(paths) > 1}
        if collisions:
            raise ImageIdCollisionError(collisions)
        object.__setattr__(self, 'samples', samples)
        object.__setattr__(self, 'stats', {
            'source': dict(Counter(s.source for s in samples)),
            'task': dict(Counter(s.task.value for s in samples)),
            'bucket': dict(Counter(s.tag_value('bucket') or 'unbucketed' for s in samples)),
        })

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def ids(self):
        return [s.id for s in self.samples]


# Prompt templates; the box template optionally names an element description.
BOX_PROMPT = (
    'Output the bounding box in the image of the UI element corresponding to the instruction '
    '"{instruction}"{description} with grounding.\n'
    '\n'
    'Requirements for the output:\n'
    '- Return only the bounding box coordinates (x0, y0, x1, y1)\n'
    '- Coordinates must be normalized to the range [0, 1]\n'
    '- Round each coordinate to three decimal places\n'
    '- Format the output as strictly (x0, y0, x1, y1) without any additional text.'
)

POINT_PROMPT = (
    'You are a GUI agent. Based on the UI screenshot provided, please locate the exact position '
    'of the element that matches the instruction given by the user.\n'
    '\n'
    'Requirements for the output:\n'
    '- Return only the point (x, y) representing the center of the target element\n'
    '- Coordinates must be normalized to the range [0, 1]\n'
    '- Round each coordinate to three decimal places\n'
    '- Format the output as strictly (x, y) without any additional text\n'
    '\n'
    'Instruction: {instruction}'
)


def render_prompt(task, instruction, description=None):
    """Canonical prompt for a task kind with the instruction substituted"""
    if not instruction or not instruction.strip():
        raise ValidationError("instruction must be non-empty")
    task = TaskKind(task)
    if task is TaskKind.BOX_PREDICTION:
        extra = f' and the description "{description}"' if description else ''
        return BOX_PROMPT.format(instruction=instruction, description=extra)
    return POINT_PROMPT.format(instruction=instruction)


def _fmt3(v):
    return f"{quantize_3dp(v):.3f}"


def format_answer(annotation):
    """Target text as the prompts ask for it: "(x, y)" or "(x0, y0, x1, y1)" """
    return "(" + ", ".join(_fmt3(v) for v in annotation.as_list()) + ")"


def to_training_record(sample, description=None):
    """Conversation record for training export; the prompt is rendered here, not stored"""
    return {
        'id': sample.id,
        'image': sample.image_ref,
        'conversations': [
            {'from': 'human', 'value': '<image>\n' + render_prompt(sample.task, sample.instruction, description)},
            {'from': 'gpt', 'value': format_answer(sample.annotation)},
        ],
    }


# --- JSONL manifest -------------------------------------------------------

def sample_to_line(sample):
    """Serialize one sample; coordinates are written with exactly 3 fractional digits"""
    head = {
        'id': sample.id,
        'image': sample.image_ref,
        'width': sample.image_size[0],
        'height': sample.image_size[1],
        'task': sample.task.value,
        'instruction': sample.instruction,
    }
    tail = {
        'source': sample.source,
        'tags': sorted(sample.stage_tags),
    }
    if sample.pixel_boxes:
        tail['pixel_boxes'] = [list(b) for b in sample.pixel_boxes]
    annotation = "[" + ", ".join(_fmt3(v) for v in sample.annotation.as_list()) + "]"
    # json.dumps cannot pin trailing zeros, so the annotation array is spliced in as text
    return (
        json.dumps(head, ensure_ascii=False)[:-1]
        + f', "annotation": {annotation}, '
        + json.dumps(tail, ensure_ascii=False)[1:]
    )


def sample_from_dict(obj):
    """Build a sample from a decoded manifest line; raises ValidationError on bad content"""
    if not isinstance(obj, dict):
        raise ValidationError("manifest line must be a JSON object")
    missing = [k for k in ('id', 'image', 'width', 'height', 'task', 'instruction', 'annotation') if k not in obj]
    if missing:
        raise ValidationError(f"missing fields {missing}")
    try:
        task = TaskKind(obj['task'])
    except ValueError as e:
        raise ValidationError(f"unknown task {obj['task']!r}") from e
    coords = obj['annotation']
    if not isinstance(coords, list) or len(coords) not in (2, 4):
        raise ValidationError(f"annotation must be an array of 2 or 4 numbers, got {coords!r}")
    if len(coords) != task.arity:
        raise ValidationError(f"task {task.value!r} does not match a {len(coords)}-number annotation")
    annotation = NormBox(*coords) if len(coords) == 4 else NormPoint(*coords)
    return GroundingSample(
        id=str(obj['id']),
        image_ref=str(obj['image']),
        image_size=(obj['width'], obj['height']),
        instruction=str(obj['instruction']),
        task=task,
        annotation=annotation,
        source=str(obj.get('source', '')),
        stage_tags=frozenset(obj.get('tags', [])),
        pixel_boxes=tuple(tuple(b) for b in obj.get('pixel_boxes', [])),
    )


def read_manifest(path):
    """Read a JSONL manifest; errors name the offending line number"""
    samples = []
    seen = set()
    with jsonlines.open(path, mode='r') as reader:
        lineno = 0
        try:
            for lineno, obj in enumerate(reader.iter(skip_empty=True), start=1):
                try:
                    sample = sample_from_dict(obj)
                except (ValidationError, TypeError) as e:
                    raise ManifestParseError(lineno, str(e)) from e
                if sample.id in seen:
                    raise DuplicateIdError(f"line {lineno}: duplicate id {sample.id!r}")
                seen.add(sample.id)
                samples.append(sample)
        except jsonlines.InvalidLineError as e:
            raise ManifestParseError(e.lineno, f"malformed JSON: {e}") from e
    return DatasetManifest(tuple(samples))


def write_manifest(manifest, path):
    """Write one sample per line, atomically"""
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest(tuple(manifest))
    with atomic_write(path) as handle:
        for sample in manifest:
            handle.write(sample_to_line(sample) + "\n")


def write_jsonl(records: Iterable[dict], path):
    """Atomically write plain dict records as JSONL"""
    with atomic_write(path) as handle:
        with jsonlines.Writer(handle, sort_keys=True) as writer:
            writer.write_all(records)
