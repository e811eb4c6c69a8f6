"""Chart scene data model: detected objects, OCR, QA records, patch alignment.

Detection and OCR are upstream concerns; this module consumes their output
through a JSON schema (see ``load_scenes``) and keeps scenes immutable after
load.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

# Closed label vocabulary for detected chart elements. Configs may override.
DEFAULT_CLS_VOCAB = (
    "bar",
    "line-point",
    "pie-slice",
    "axis-line",
    "axis-title",
    "tick-label",
    "legend-item",
    "data-label",
    "title",
)

# Classes whose objects carry an underlying data value.
MARK_CLASSES = ("bar", "line-point", "pie-slice")


class SceneError(ValueError):
    """Invalid scene content (bad geometry, unknown class, schema violation)."""


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, pixel coordinates, origin top-left, x0<=x1, y0<=y1."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        for name in ("x0", "y0", "x1", "y1"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise SceneError(f"bbox.{name} must be finite and >= 0, got {v}")
        if self.x1 < self.x0:
            raise SceneError(f"bbox x1 < x0 ({self.x1} < {self.x0})")
        if self.y1 < self.y0:
            raise SceneError(f"bbox y1 < y0 ({self.y1} < {self.y0})")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    def as_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]


@dataclass(frozen=True)
class ChartObject:
    """One detected chart element with its box, optional data value and OCR."""

    id: int
    cls: str
    bbox: BBox
    value: float | None = None
    ocr_texts: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "ocr_texts", tuple(self.ocr_texts))


@dataclass(frozen=True)
class QARecord:
    question: str
    answer: str
    answer_kind: str  # numeric | textual | open-ended

    _KINDS = ("numeric", "textual", "open-ended")

    def __post_init__(self):
        if not self.answer:
            raise SceneError("qa answer must be non-empty")
        if self.answer_kind not in self._KINDS:
            raise SceneError(f"unknown answer_kind {self.answer_kind!r}")


@dataclass(frozen=True)
class ChartScene:
    """One chart's metadata: canvas size, patch grid, ordered objects, QA."""

    scene_id: str
    width: int
    height: int
    objects: tuple[ChartObject, ...]
    qa: tuple[QARecord, ...] = ()
    patch_size: int = 32
    image_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "qa", tuple(self.qa))
        if self.patch_size <= 0:
            raise SceneError(f"patch_size must be > 0, got {self.patch_size}")

    @property
    def grid_shape(self) -> tuple[int, int]:
        """(rows, cols) of the patch grid."""
        return (
            math.ceil(self.height / self.patch_size),
            math.ceil(self.width / self.patch_size),
        )

    @property
    def n_patches(self) -> int:
        rows, cols = self.grid_shape
        return rows * cols

    def validate(self, cls_vocab=DEFAULT_CLS_VOCAB) -> None:
        """Check scene invariants; raises SceneError naming the bad field."""
        seen = set()
        for i, obj in enumerate(self.objects):
            where = f"scene {self.scene_id!r}: objects[{i}]"
            if obj.id in seen:
                raise SceneError(f"{where}: duplicate object id {obj.id}")
            seen.add(obj.id)
            if obj.cls not in cls_vocab:
                raise SceneError(f"{where}: cls {obj.cls!r} not in vocabulary")
            b = obj.bbox
            if b.x1 > self.width or b.y1 > self.height:
                raise SceneError(f"{where}: bbox {b.as_list()} exceeds canvas "
                                 f"{self.width}x{self.height}")
        if list(self.objects) != order_objects(list(self.objects)):
            raise SceneError(f"scene {self.scene_id!r}: objects not in reading order")


# object_id -> set of row-major patch indices covering that object
PatchAlignment = dict[int, set[int]]


def order_objects(objects: list[ChartObject]) -> list[ChartObject]:
    """Sort objects top-down then left-right: key (bbox.y0, bbox.x0, id)."""
    return sorted(objects, key=lambda o: (o.bbox.y0, o.bbox.x0, o.id))


def _axis_cells(lo: float, hi: float, patch: int, n_cells: int) -> range:
    """Cell indices along one axis where [lo, hi] has positive overlap.

    Degenerate extents (lo == hi) are treated as having positive measure;
    a coordinate falling exactly on a cell boundary goes to the smaller index.
    """
    if lo == hi:
        cell = int(lo // patch)
        if cell > 0 and lo == cell * patch:
            cell -= 1
        return range(min(cell, n_cells - 1), min(cell, n_cells - 1) + 1)
    first = int(lo // patch)
    last = int(math.ceil(hi / patch)) - 1
    first = max(first, 0)
    last = min(last, n_cells - 1)
    return range(first, last + 1)


def align_objects_to_patches(scene: ChartScene) -> PatchAlignment:
    """Map each object to the patch cells its bbox overlaps with positive area.

    Zero-width/height boxes count as lines; boundary coordinates resolve to
    the cell with the smaller index. Raises SceneError for a box entirely
    outside the canvas.
    """
    rows, cols = scene.grid_shape
    p = scene.patch_size
    out: PatchAlignment = {}
    for obj in scene.objects:
        b = obj.bbox
        if b.x0 > scene.width or b.y0 > scene.height:
            raise SceneError(
                f"scene {scene.scene_id!r}: object {obj.id} bbox lies outside the image")
        cells = {
            r * cols + c
            for r in _axis_cells(b.y0, min(b.y1, scene.height), p, rows)
            for c in _axis_cells(b.x0, min(b.x1, scene.width), p, cols)
        }
        out[obj.id] = cells
    return out


def scene_to_dict(scene: ChartScene) -> dict:
    d = {
        "scene_id": scene.scene_id,
        "width": scene.width,
        "height": scene.height,
        "patch_size": scene.patch_size,
        "objects": [
            {
                "id": o.id,
                "cls": o.cls,
                "bbox": o.bbox.as_list(),
                **({"value": o.value} if o.value is not None else {}),
                "ocr_texts": list(o.ocr_texts),
            }
            for o in scene.objects
        ],
        "qa": [
            {"question": q.question, "answer": q.answer, "answer_kind": q.answer_kind}
            for q in scene.qa
        ],
    }
    if scene.image_path is not None:
        d["image_path"] = scene.image_path
    return d


def _require(record: dict, key: str, where: str):
    if key not in record:
        raise SceneError(f"{where}: missing field {key!r}")
    return record[key]


def scene_from_dict(record: dict, cls_vocab=DEFAULT_CLS_VOCAB) -> ChartScene:
    """Parse and validate one scene record; objects are re-ordered."""
    scene_id = str(record.get("scene_id", "<unnamed>"))
    where = f"scene {scene_id!r}"
    objects = []
    for i, o in enumerate(_require(record, "objects", where)):
        ow = f"{where}: objects[{i}]"
        box = _require(o, "bbox", ow)
        if not isinstance(box, (list, tuple)) or len(box) != 4:
            raise SceneError(f"{ow}.bbox: expected [x0,y0,x1,y1], got {box!r}")
        try:
            bbox = BBox(*[float(v) for v in box])
        except (TypeError, ValueError) as e:
            raise SceneError(f"{ow}.bbox: {e}") from e
        value = o.get("value")
        objects.append(ChartObject(
            id=int(_require(o, "id", ow)),
            cls=str(_require(o, "cls", ow)),
            bbox=bbox,
            value=float(value) if value is not None else None,
            ocr_texts=tuple(str(t) for t in o.get("ocr_texts", [])),
        ))
    qa = []
    for i, q in enumerate(record.get("qa", [])):
        qw = f"{where}: qa[{i}]"
        try:
            qa.append(QARecord(
                question=str(_require(q, "question", qw)),
                answer=str(_require(q, "answer", qw)),
                answer_kind=str(q.get("answer_kind", "textual")),
            ))
        except SceneError as e:
            raise SceneError(f"{qw}: {e}") from e
    scene = ChartScene(
        scene_id=scene_id,
        width=int(_require(record, "width", where)),
        height=int(_require(record, "height", where)),
        patch_size=int(record.get("patch_size", 32)),
        objects=tuple(order_objects(objects)),
        qa=tuple(qa),
        image_path=record.get("image_path"),
    )
    scene.validate(cls_vocab)
    return scene


def load_scenes(path, cls_vocab=DEFAULT_CLS_VOCAB) -> list[ChartScene]:
    """Load scenes from a ``{"scenes": [...]}`` JSON file or a JSONL file."""
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.lstrip()
    if not stripped:
        raise SceneError(f"{path}: empty scene file")
    if stripped.startswith("{") and '"scenes"' in stripped.split("\n", 1)[0]:
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as e:
            raise SceneError(f"{path}: invalid JSON: {e}") from e
        records = payload.get("scenes")
        if records is None:
            raise SceneError(f"{path}: top-level 'scenes' key missing")
    else:
        records = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise SceneError(f"{path}:{lineno}: invalid JSON line: {e}") from e
    return [scene_from_dict(r, cls_vocab) for r in records]


def save_scenes(scenes: list[ChartScene], path, jsonl: bool = False) -> None:
    """Write scenes in the canonical schema; deterministic byte output."""
    path = Path(path)
    if jsonl:
        lines = [json.dumps(scene_to_dict(s), separators=(",", ":")) for s in scenes]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    else:
        payload = {"scenes": [scene_to_dict(s) for s in scenes]}
        path.write_text(json.dumps(payload, indent=1), encoding="utf-8")
