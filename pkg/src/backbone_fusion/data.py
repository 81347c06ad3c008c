"""Synthetic shape scenes with exact captions, boxes and phrase spans.

A record is a pure function of ``(seed, index)``; rendering is deterministic
rasterization, so pixels can be dropped from dataset files and regenerated.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import make_rng
from .vocab import PAD_ID, VOCAB, DataError

CANVAS = 64
SHAPES = ("square", "circle", "triangle")
COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 0.8, 0.0),
    "blue": (0.0, 0.3, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "purple": (0.6, 0.0, 0.8),
    "orange": (1.0, 0.5, 0.0),
}
SIZES = tuple(range(8, 29, 2))
ANSWERS = ("yes", "no", "one", "two", "three", "four") + tuple(COLORS)
NUMBER_WORDS = ("one", "two", "three", "four")
MAX_PLACEMENT_TRIES = 100


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cx: int
    cy: int
    size: int

    @property
    def box(self) -> tuple[float, float, float, float]:
        h = self.size / 2
        return (self.cx - h, self.cy - h, self.cx + h, self.cy + h)

    @property
    def phrase(self) -> str:
        return f"{self.color} {self.shape}"


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...]
    canvas: int = CANVAS

    def to_dict(self) -> dict:
        return {"canvas": self.canvas, "objects": [vars(o) for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(tuple(SceneObject(**o) for o in d["objects"]), d.get("canvas", CANVAS))


def _overlaps(a, b) -> bool:
    return not (a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1])


def generate_scene(rng: np.random.Generator, n_objects: int | None = None) -> SceneSpec:
    """1-4 non-overlapping objects with distinct (color, shape) pairs."""
    n = int(rng.integers(1, 5)) if n_objects is None else n_objects
    combos = [(c, s) for c in COLORS for s in SHAPES]
    picks = rng.choice(len(combos), size=n, replace=False)
    max_size = max(SIZES)
    while True:
        sizes = [int(s) for s in rng.choice([s for s in SIZES if s <= max_size], size=n)]
        placed: list[SceneObject] = []
        for k, size in enumerate(sizes):
            color, shape = combos[picks[k]]
            half = size // 2
            for _ in range(MAX_PLACEMENT_TRIES):
                cx = int(rng.integers(half, CANVAS - half + 1))
                cy = int(rng.integers(half, CANVAS - half + 1))
                obj = SceneObject(shape, color, cx, cy, size)
                if not any(_overlaps(obj.box, o.box) for o in placed):
                    placed.append(obj)
                    break
            else:
                break
        if len(placed) == n:
            return SceneSpec(tuple(placed))
        max_size = max(min(SIZES), max_size - 4)


def render(spec: SceneSpec) -> np.ndarray:
    """Filled shapes on a black canvas, float32 ``[H, W, 3]`` in [0, 1]."""
    c = spec.canvas
    img = np.zeros((c, c, 3), dtype=np.float32)
    py, px = np.mgrid[0:c, 0:c] + 0.5
    for o in spec.objects:
        x1, y1, x2, y2 = o.box
        inside_box = (px >= x1) & (px <= x2) & (py >= y1) & (py <= y2)
        if o.shape == "square":
            hit = inside_box
        elif o.shape == "circle":
            hit = (px - o.cx) ** 2 + (py - o.cy) ** 2 <= (o.size / 2) ** 2
        else:
            frac = (py - y1) / (y2 - y1)
            hit = inside_box & (np.abs(px - o.cx) <= frac * o.size / 2)
        img[hit] = COLORS[o.color]
    return img


def caption_order(spec: SceneSpec) -> list[SceneObject]:
    return sorted(spec.objects, key=lambda o: (o.cx, o.cy, o.shape, o.color))


def make_caption(spec: SceneSpec) -> tuple[str, list[tuple[int, int]], list[int]]:
    """Caption, token spans of each object phrase, and the object index per span.

    Objects are listed left to right ("a red square left of a blue circle");
    two objects separated mostly vertically use "above" instead. Spans index
    the tokenized caption, whose position 0 is ``[bos]``.
    """
    objs = list(spec.objects)
    ordered = caption_order(spec)
    relation = "left of"
    if len(ordered) == 2:
        a, b = ordered
        if abs(a.cy - b.cy) > abs(a.cx - b.cx):
            ordered = sorted(objs, key=lambda o: (o.cy, o.cx))
            relation = "above"
    words: list[str] = []
    spans, owners = [], []
    for k, o in enumerate(ordered):
        if k:
            words.extend(relation.split())
        words.append("a")
        start = len(words) + 1
        words.extend([o.color, o.shape])
        spans.append((start, start + 2))
        owners.append(objs.index(o))
    return " ".join(words), spans, owners


def make_question(spec: SceneSpec, rng: np.random.Generator) -> tuple[str, str]:
    """A (question, answer) pair answerable from the scene alone."""
    kind = int(rng.integers(0, 3))
    shapes = [o.shape for o in spec.objects]
    unique_shapes = [s for s in SHAPES if shapes.count(s) == 1]
    if kind == 1:
        return "how many objects", NUMBER_WORDS[len(spec.objects) - 1]
    if kind == 2 and unique_shapes:
        shape = unique_shapes[int(rng.integers(0, len(unique_shapes)))]
        color = next(o.color for o in spec.objects if o.shape == shape)
        return f"what color is the {shape}", color
    present = {(o.color, o.shape) for o in spec.objects}
    if rng.random() < 0.5:
        o = spec.objects[int(rng.integers(0, len(spec.objects)))]
        return f"is there a {o.color} {o.shape}", "yes"
    absent = [(c, s) for c in COLORS for s in SHAPES if (c, s) not in present]
    c, s = absent[int(rng.integers(0, len(absent)))]
    return f"is there a {c} {s}", "no"


@dataclass
class Record:
    index: int
    seed: int
    scene: SceneSpec
    caption: str
    token_ids: list[int]
    boxes: list[tuple[float, float, float, float]]
    spans: list[tuple[int, int]]
    question: str | None = None
    question_ids: list[int] | None = None
    label: int | None = None
    _pixels: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def pixels(self) -> np.ndarray:
        if self._pixels is None:
            self._pixels = render(self.scene)
        return self._pixels

    def to_dict(self, embed_pixels: bool = False) -> dict:
        d = {
            "index": self.index,
            "seed": self.seed,
            "scene": self.scene.to_dict(),
            "caption": self.caption,
            "token_ids": list(self.token_ids),
            "boxes": [list(b) for b in self.boxes],
            "spans": [list(s) for s in self.spans],
            "question": self.question,
            "question_ids": self.question_ids,
            "label": self.label,
            "regenerate": not embed_pixels,
            "pixels": self.pixels.astype("<f4").tobytes().hex() if embed_pixels else None,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Record":
        try:
            scene = SceneSpec.from_dict(d["scene"])
            rec = cls(
                index=int(d["index"]),
                seed=int(d["seed"]),
                scene=scene,
                caption=d["caption"],
                token_ids=[int(t) for t in d["token_ids"]],
                boxes=[tuple(float(v) for v in b) for b in d["boxes"]],
                spans=[(int(s[0]), int(s[1])) for s in d["spans"]],
                question=d.get("question"),
                question_ids=d.get("question_ids"),
                label=d.get("label"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed record: {exc}") from exc
        if d.get("pixels"):
            raw = np.frombuffer(bytes.fromhex(d["pixels"]), dtype="<f4")
            rec._pixels = raw.reshape(scene.canvas, scene.canvas, 3).astype(np.float32)
        elif not d.get("regenerate", False):
            raise DataError(f"record {rec.index} has neither pixels nor the regenerate flag")
        return rec


def make_record(seed: int, index: int) -> Record:
    rng = make_rng(seed, "record", index)
    scene = generate_scene(rng)
    caption, spans, owners = make_caption(scene)
    question, answer = make_question(scene, rng)
    return Record(
        index=index,
        seed=seed,
        scene=scene,
        caption=caption,
        token_ids=VOCAB.tokenize(caption),
        boxes=[scene.objects[k].box for k in owners],
        spans=spans,
        question=question,
        question_ids=VOCAB.tokenize(question),
        label=ANSWERS.index(answer),
    )


def generate_dataset(seed: int, count: int) -> list[Record]:
    return [make_record(seed, i) for i in range(count)]


# ---------------------------------------------------------------------------
# files


def write_dataset(path, records: list[Record], embed_pixels: bool = False) -> str:
    """Write newline-delimited JSON records; returns the file's sha256."""
    lines = [json.dumps(r.to_dict(embed_pixels), sort_keys=True, separators=(",", ":")) for r in records]
    payload = ("\n".join(lines) + "\n").encode("utf-8")
    Path(path).write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


def read_dataset(path) -> list[Record]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file {path} does not exist")
    records = []
    with path.open(encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{n}: {exc}") from exc
            records.append(Record.from_dict(d))
    if not records:
        raise DataError(f"dataset file {path} is empty")
    return records


def manifest_hash(records: list[Record]) -> str:
    """sha256 over the pixel-free serialization of ``records``."""
    h = hashlib.sha256()
    for r in records:
        h.update(json.dumps(r.to_dict(False), sort_keys=True, separators=(",", ":")).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


# ---------------------------------------------------------------------------
# batching


def pad_ids(seqs: list[list[int]], length: int | None = None) -> np.ndarray:
    length = max(len(s) for s in seqs) if length is None else length
    out = np.full((len(seqs), length), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        if len(s) > length:
            raise DataError(f"sequence of length {len(s)} exceeds {length}")
        out[i, : len(s)] = s
    return out


def stack_pixels(records: list[Record]) -> np.ndarray:
    return np.stack([r.pixels for r in records]).astype(np.float32)
