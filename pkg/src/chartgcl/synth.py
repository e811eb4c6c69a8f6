"""Deterministic synthetic chart scenes with programmatically correct QA.

Stands in for real chart datasets at desk scale: bar/line/pie layouts with
axis, tick, legend and mark objects, OCR strings equal to the rendered
labels/values, and four QA kinds whose answers are derived from the same
values the objects carry.
"""

import math
from dataclasses import dataclass

import numpy as np

from .scene import BBox, ChartObject, ChartScene, QARecord, SceneError, order_objects

CHART_TYPES = ("bar", "line", "pie")

CATEGORY_POOL = (
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot",
    "golf", "hotel", "india", "juliet", "kilo", "lima",
)

QA_KINDS = ("value_lookup", "argmax_category", "sum_of_two", "comparison")


@dataclass(frozen=True)
class SynthSpec:
    """Parameters for one synthetic batch (single chart type)."""

    n_scenes: int
    chart_type: str = "bar"
    n_categories: tuple[int, int] = (3, 6)
    value_range: tuple[int, int] = (10, 60)
    width: int = 256
    height: int = 256
    patch_size: int = 32

    def __post_init__(self):
        if self.chart_type not in CHART_TYPES:
            raise SceneError(f"chart_type must be one of {CHART_TYPES}, "
                             f"got {self.chart_type!r}")
        if self.n_scenes < 0:
            raise SceneError("n_scenes must be >= 0")
        lo, hi = self.n_categories
        if not (2 <= lo <= hi <= len(CATEGORY_POOL)):
            raise SceneError(f"n_categories range {self.n_categories} invalid")
        vlo, vhi = self.value_range
        if not (0 < vlo < vhi):
            raise SceneError(f"value_range {self.value_range} invalid")
        if vhi - vlo + 1 < hi:
            raise SceneError("value_range too narrow for distinct values per category")


def format_number(v: float) -> str:
    """Canonical short rendering: '42' for integers, '33.4' otherwise."""
    r = round(v, 6)
    if r == int(r):
        return str(int(r))
    return f"{r:.6f}".rstrip("0").rstrip(".")


def _text_box(cx: float, cy: float, text: str, h: float = 10.0) -> BBox:
    w = max(6.0, 5.0 * len(text))
    return BBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


class _SceneBuilder:
    def __init__(self):
        self.objects = []
        self._next_id = 0

    def add(self, cls: str, bbox: BBox, value=None, ocr=()):
        self.objects.append(ChartObject(
            id=self._next_id, cls=cls, bbox=bbox, value=value,
            ocr_texts=tuple(ocr)))
        self._next_id += 1


def _pie_values(raw: np.ndarray) -> list[float]:
    """Normalize to percentages with one decimal that sum to exactly 100."""
    pct = raw / raw.sum() * 100.0
    rounded = [round(float(p), 1) for p in pct]
    residual = 100.0 - sum(rounded)
    rounded[int(np.argmax(rounded))] = round(rounded[int(np.argmax(rounded))] + residual, 6)
    return rounded


def _sample_values(rng, spec: SynthSpec, n: int) -> list[float]:
    vlo, vhi = spec.value_range
    for _ in range(50):
        vals = rng.choice(np.arange(vlo, vhi + 1), size=n, replace=False)
        if spec.chart_type == "pie":
            out = _pie_values(vals.astype(float))
        else:
            out = [float(v) for v in vals]
        # argmax QA needs a unique maximum (pie rounding can collide)
        if out.count(max(out)) == 1:
            return out
    raise SceneError("could not sample values with a unique maximum")


def _cartesian_objects(b: _SceneBuilder, spec, categories, values, mark_cls):
    w, h = spec.width, spec.height
    left, right, base, top = 44.0, w - 12.0, h - 42.0, 34.0
    b.add("title", _text_box(w / 2, 14, "units by category", 12),
          ocr=["units by category"])
    b.add("axis-line", BBox(left - 4, base, right, base + 1))
    b.add("axis-line", BBox(left - 5, top - 4, left - 4, base + 1))
    b.add("axis-title", _text_box(w / 2, h - 10, "category"), ocr=["category"])
    b.add("axis-title", BBox(4, h / 2 - 14, 14, h / 2 + 14), ocr=["units"])
    vmax = max(values)
    slot = (right - left) / len(categories)
    for i, (name, val) in enumerate(zip(categories, values)):
        cx = left + (i + 0.5) * slot
        y_val = base - (val / vmax) * (base - top)
        if mark_cls == "bar":
            half = slot * 0.3
            b.add("bar", BBox(cx - half, y_val, cx + half, base), value=val)
        else:
            b.add("line-point", BBox(cx - 3, y_val - 3, cx + 3, y_val + 3), value=val)
        label = format_number(val)
        b.add("data-label", _text_box(cx, max(y_val - 10, 6), label), ocr=[label])
        b.add("tick-label", _text_box(cx, base + 10, name), ocr=[name])


def _pie_objects(b: _SceneBuilder, spec, categories, values):
    w, h = spec.width, spec.height
    cx, cy, radius = w / 2, h / 2 + 10, min(w, h) * 0.27
    b.add("title", _text_box(w / 2, 14, "share by category", 12),
          ocr=["share by category"])
    angle = -90.0
    for i, (name, val) in enumerate(zip(categories, values)):
        sweep = val / 100.0 * 360.0
        mid = math.radians(angle + sweep / 2)
        # slice stand-in box at the wedge centroid, sized with the share
        sx = cx + 0.55 * radius * math.cos(mid)
        sy = cy + 0.55 * radius * math.sin(mid)
        half = radius * (0.12 + 0.2 * val / 100.0)
        b.add("pie-slice", BBox(sx - half, sy - half, sx + half, sy + half), value=val)
        label = format_number(val)
        lx = cx + 1.25 * radius * math.cos(mid)
        ly = cy + 1.25 * radius * math.sin(mid)
        b.add("data-label", _text_box(lx, ly, label), ocr=[label])
        b.add("legend-item", _text_box(w - 40, 36 + 14 * i, name), ocr=[name])
        angle += sweep


def _clamp_objects(objects, width, height):
    out = []
    for o in objects:
        b = o.bbox
        nb = BBox(min(max(b.x0, 0.0), width), min(max(b.y0, 0.0), height),
                  min(max(b.x1, 0.0), width), min(max(b.y1, 0.0), height))
        out.append(ChartObject(o.id, o.cls, nb, o.value, o.ocr_texts))
    return out


def _make_qa(rng, categories, values) -> list[QARecord]:
    by_name = dict(zip(categories, values))
    n = len(categories)
    qa = []
    c = categories[int(rng.integers(n))]
    qa.append(QARecord(
        question=f"what is the value of {c}?",
        answer=format_number(by_name[c]),
        answer_kind="numeric"))
    argmax = categories[int(np.argmax(values))]
    qa.append(QARecord(
        question="which category has the largest value?",
        answer=argmax,
        answer_kind="textual"))
    i, j = rng.choice(n, size=2, replace=False)
    a, b = categories[int(i)], categories[int(j)]
    qa.append(QARecord(
        question=f"what is the sum of the values of {a} and {b}?",
        answer=format_number(by_name[a] + by_name[b]),
        answer_kind="numeric"))
    i, j = rng.choice(n, size=2, replace=False)
    a, b = categories[int(i)], categories[int(j)]
    qa.append(QARecord(
        question=f"is the value of {a} greater than the value of {b}?",
        answer="yes" if by_name[a] > by_name[b] else "no",
        answer_kind="textual"))
    return qa


def synth_generate(spec: SynthSpec, seed: int) -> list[ChartScene]:
    """Generate ``spec.n_scenes`` scenes, deterministic under (spec, seed)."""
    rng = np.random.default_rng(seed)
    scenes = []
    for idx in range(spec.n_scenes):
        n_cat = int(rng.integers(spec.n_categories[0], spec.n_categories[1] + 1))
        cat_idx = rng.choice(len(CATEGORY_POOL), size=n_cat, replace=False)
        categories = [CATEGORY_POOL[int(i)] for i in cat_idx]
        values = _sample_values(rng, spec, n_cat)
        b = _SceneBuilder()
        if spec.chart_type == "pie":
            _pie_objects(b, spec, categories, values)
        else:
            _cartesian_objects(b, spec, categories, values, spec.chart_type)
        scene = ChartScene(
            scene_id=f"{spec.chart_type}-{seed}-{idx:04d}",
            width=spec.width,
            height=spec.height,
            patch_size=spec.patch_size,
            objects=tuple(order_objects(
                _clamp_objects(b.objects, spec.width, spec.height))),
            qa=tuple(_make_qa(rng, categories, values)),
        )
        scene.validate()
        scenes.append(scene)
    return scenes


def synth_corpus(chart_types, n_scenes: int, seed: int, **spec_kwargs) -> list[ChartScene]:
    """Mixed-type corpus: round-robin over chart types, one sub-batch each."""
    counts = {t: 0 for t in chart_types}
    for i in range(n_scenes):
        counts[chart_types[i % len(chart_types)]] += 1
    scenes = []
    for off, t in enumerate(chart_types):
        spec = SynthSpec(n_scenes=counts[t], chart_type=t, **spec_kwargs)
        scenes.extend(synth_generate(spec, seed + off))
    return scenes
