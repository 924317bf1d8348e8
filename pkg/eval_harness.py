"""Point-in-box benchmark scoring with per-category breakdowns."""
from __future__ import annotations

import io
import logging
import re
from dataclasses import dataclass
from typing import Optional

import jsonlines
import pandas as pd

from errors import UnknownPredictionError, ValidationError
from rlvr import binary_reward
from schema import NormBox, NormPoint
from utils import ordered_map

logger = logging.getLogger(__name__)

AVG_COLUMN = "Avg."
MICRO_COLUMN = "Micro"

_POINT_TEXT = re.compile(r'\(\s*([-+]?\d*\.?\d+(?:[eE][-+]?\d+)?)\s*,\s*([-+]?\d*\.?\d+(?:[eE][-+]?\d+)?)\s*\)')


@dataclass(frozen=True)
class BenchRecord:
    sample_id: str
    target: NormBox
    categories: dict

    def __post_init__(self):
        if not self.categories:
            raise ValidationError(f"{self.sample_id}: benchmark record needs at least one category axis")
        object.__setattr__(self, 'categories', {str(k): str(v) for k, v in self.categories.items()})


@dataclass(frozen=True)
class Prediction:
    sample_id: str
    point: NormPoint


@dataclass(frozen=True)
class ScoreTable:
    """Hits and totals per category cell; a cell is one label per axis"""

    axes: tuple
    cells: dict
    hits: int
    total: int
    predicted: int = 0

    @property
    def cell_accuracy(self):
        return {label: h / n for label, (h, n) in self.cells.items()}

    @property
    def micro(self):
        return self.hits / self.total if self.total else 0.0

    @property
    def macro(self):
        acc = list(self.cell_accuracy.values())
        return sum(acc) / len(acc) if acc else 0.0

    def row(self):
        """Column -> accuracy, cells sorted, then the micro and macro ("Avg.") averages"""
        values = {label: self.cell_accuracy[label] for label in sorted(self.cells)}
        values[MICRO_COLUMN] = self.micro
        values[AVG_COLUMN] = self.macro
        return values


def parse_point_text(text):
    """First "(x, y)" pair in raw model output, or None when there is none in [0, 1]^2"""
    m = _POINT_TEXT.search(text or '')
    if not m:
        return None
    x, y = float(m.group(1)), float(m.group(2))
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        return None
    return NormPoint(x, y)


def load_bench(path):
    """JSONL of {"id", "bbox": [x0, y0, x1, y1], "categories": {axis: label}}"""
    records = []
    with jsonlines.open(path, mode='r') as reader:
        for lineno, obj in enumerate(reader.iter(skip_empty=True), start=1):
            try:
                records.append(BenchRecord(str(obj['id']), NormBox(*obj['bbox']), dict(obj['categories'])))
            except (KeyError, TypeError) as e:
                raise ValidationError(f"{path} line {lineno}: bad benchmark record: {e}") from e
    return records


def load_predictions(path):
    """JSONL of {"id", "point": [x, y]} or {"id", "text": raw output}

    Text that holds no parseable point is dropped, so the sample scores as a miss.
    """
    predictions = []
    unparsed = 0
    with jsonlines.open(path, mode='r') as reader:
        for lineno, obj in enumerate(reader.iter(skip_empty=True), start=1):
            try:
                sample_id = str(obj['id'])
                point = NormPoint(*obj['point']) if 'point' in obj else parse_point_text(obj.get('text'))
            except (KeyError, TypeError) as e:
                raise ValidationError(f"{path} line {lineno}: bad prediction: {e}") from e
            if point is None:
                unparsed += 1
                continue
            predictions.append(Prediction(sample_id, point))
    if unparsed:
        logger.warning(f"{unparsed} predictions in {path} had no parseable point; scored as misses")
    return predictions


def _cell_label(record, axes):
    missing = [a for a in axes if a not in record.categories]
    if missing:
        raise ValidationError(f"{record.sample_id}: no label for axes {missing}")
    return "/".join(record.categories[a] for a in axes)


def score(bench, preds, axes=None, workers=1):
    """Accuracy per category cell plus micro and macro averages

    Predictions are matched by id; a benchmark record with no prediction is a miss.
    """
    bench = list(bench)
    preds = list(preds)
    by_id = {}
    for p in preds:
        if p.sample_id in by_id:
            raise ValidationError(f"duplicate prediction id {p.sample_id!r}")
        by_id[p.sample_id] = p.point
    bench_ids = {r.sample_id for r in bench}
    unknown = set(by_id) - bench_ids
    if unknown:
        raise UnknownPredictionError(unknown)

    if axes is None:
        axes = sorted({a for r in bench for a in r.categories})
    axes = tuple(axes)

    def judge(record):
        point = by_id.get(record.sample_id)
        return _cell_label(record, axes), 0 if point is None else binary_reward(point, record.target)

    outcomes = ordered_map(judge, bench, workers=workers, desc="eval")
    cells = {}
    for label, hit in outcomes:
        h, n = cells.get(label, (0, 0))
        cells[label] = (h + hit, n + 1)
    hits = sum(h for h, _ in cells.values())

    table = ScoreTable(axes, cells, hits, len(bench), predicted=len(by_id))
    logger.info(f"Scored {len(bench)} records: micro {table.micro:.4f}, macro {table.macro:.4f}",
                extra={'stage': 'eval', 'records': len(bench), 'hits': hits,
                       'predicted': len(by_id), 'cells': len(cells)})
    return table


def _frame(tables):
    rows = {name: t.row() for name, t in tables.items()}
    columns = sorted({c for row in rows.values() for c in row if c not in (MICRO_COLUMN, AVG_COLUMN)})
    columns += [MICRO_COLUMN, AVG_COLUMN]
    df = pd.DataFrame.from_dict(rows, orient='index', columns=columns) * 100.0
    df.index.name = 'model'
    return df


def render_table(tables, model_name: Optional[str] = None):
    """Aligned text and CSV renderings, accuracies in percent

    `tables` is one ScoreTable or a mapping of model name to ScoreTable. With
    several rows the best value in each column is marked with `*`.
    """
    if isinstance(tables, ScoreTable):
        tables = {model_name or 'model': tables}
    if not tables or any(not t.cells for t in tables.values()):
        raise ValidationError("cannot render an empty score table")
    df = _frame(tables)

    text_df = df.apply(lambda col: col.map(lambda v: '-' if pd.isna(v) else f"{v:.1f}"))
    if len(df) > 1:
        for column in df.columns:
            best = df[column].max()
            marked = df[column] == best
            text_df.loc[marked, column] = text_df.loc[marked, column] + '*'
    text = text_df.to_string() + "\n"

    buffer = io.StringIO()
    df.to_csv(buffer, float_format='%.2f', lineterminator='\n')
    return text, buffer.getvalue()
