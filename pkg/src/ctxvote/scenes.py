"""Synthetic indoor scenes and the plain-text scene / prediction formats.

Randomness: scene ``i`` of a dataset with seed ``s`` draws every random
number from ``np.random.Generator(PCG64(SeedSequence(s, spawn_key=(i,))))``,
so any scene can be regenerated on its own.

Scene file::

    scene <id> <n_points> <n_boxes> <C>
    x y z                      (n_points lines)
    class cx cy cz w l h       (n_boxes lines)

Prediction file: one ``scene_id class objectness cx cy cz w l h`` line per
detection, sorted by scene id then objectness descending.

Floats are written with ``repr`` so reading back is exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Box3, Detection, boxes_to_array, iou_matrix


class ParseError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass
class Scene:
    id: str
    points: np.ndarray
    boxes: list[Box3] = field(default_factory=list)
    classes: list[int] = field(default_factory=list)
    num_classes: int = 4

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) < 1:
            raise ValueError(f"scene {self.id}: needs at least one point")
        if not self.id or any(c.isspace() for c in self.id):
            raise ValueError(f"scene id must be a non-empty token, got {self.id!r}")
        if len(self.boxes) != len(self.classes):
            raise ValueError(f"scene {self.id}: boxes and classes differ in length")
        for c in self.classes:
            if not 0 <= c < self.num_classes:
                raise ValueError(f"scene {self.id}: class {c} outside [0, {self.num_classes})")

    @property
    def gt_array(self) -> np.ndarray:
        return boxes_to_array(self.boxes)

    def __eq__(self, other):
        return (
            isinstance(other, Scene)
            and self.id == other.id
            and self.num_classes == other.num_classes
            and np.array_equal(self.points, other.points)
            and self.boxes == other.boxes
            and list(self.classes) == list(other.classes)
        )


@dataclass
class SynthConfig:
    seed: int = 0
    min_objects: int = 2
    max_objects: int = 5
    # (w, l, h) mean size per class, flattened: table, chair, bed, cabinet
    class_sizes: tuple[float, ...] = (1.4, 0.8, 0.75, 0.55, 0.55, 0.9, 2.0, 1.5, 0.55, 0.9, 0.5, 1.8)
    size_jitter: float = 0.1
    n_points: int = 1024
    clutter_fraction: float = 0.05
    room_extent: tuple[float, ...] = (6.0, 6.0, 2.5)
    noise_sigma: float = 0.01
    min_gap: float = 0.1
    max_attempts: int = 1000

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if len(self.class_sizes) % 3 or not self.class_sizes or min(self.class_sizes) <= 0:
            raise ValueError("class_sizes must hold positive (w, l, h) triples")
        if not 0.0 <= self.clutter_fraction < 1.0:
            raise ValueError("clutter_fraction must lie in [0, 1)")
        if self.n_points < 1 or len(self.room_extent) != 3 or min(self.room_extent) <= 0:
            raise ValueError("n_points and room_extent must be positive")

    @property
    def num_classes(self) -> int:
        return len(self.class_sizes) // 3

    def prior(self, c: int) -> np.ndarray:
        return np.array(self.class_sizes[3 * c : 3 * c + 3])


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


# five visible faces (no bottom): (axis, sign)
_FACES = ((0, 1), (0, -1), (1, 1), (1, -1), (2, 1))


def _sample_surface(rng, boxes: np.ndarray, n: int) -> np.ndarray:
    areas = []
    for b in boxes:
        for axis, _ in _FACES:
            u, v = [a for a in range(3) if a != axis]
            areas.append(b[3 + u] * b[3 + v])
    areas = np.array(areas)
    face = rng.choice(len(areas), size=n, p=areas / areas.sum())
    uv = rng.uniform(-0.5, 0.5, size=(n, 2))
    pts = np.empty((n, 3))
    for k in range(n):
        b = boxes[face[k] // len(_FACES)]
        axis, sign = _FACES[face[k] % len(_FACES)]
        u, v = [a for a in range(3) if a != axis]
        pts[k, axis] = b[axis] + sign * 0.5 * b[3 + axis]
        pts[k, u] = b[u] + uv[k, 0] * b[3 + u]
        pts[k, v] = b[v] + uv[k, 1] * b[3 + v]
    return pts


def synth_scene(cfg: SynthConfig, index: int) -> Scene:
    """Objects resting on the floor, surface points with noise, uniform clutter."""
    rng = scene_rng(cfg.seed, index)
    room = np.array(cfg.room_extent)
    k = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    placed: list[np.ndarray] = []
    classes: list[int] = []
    attempts = 0
    while len(placed) < k:
        attempts += 1
        if attempts > cfg.max_attempts:
            raise GenerationError(
                f"scene {index}: could not place {k} objects in {cfg.max_attempts} attempts"
            )
        c = int(rng.integers(cfg.num_classes))
        size = cfg.prior(c) * rng.uniform(1 - cfg.size_jitter, 1 + cfg.size_jitter, size=3)
        if np.any(size[:2] >= room[:2]):
            continue
        xy = rng.uniform(size[:2] / 2, room[:2] - size[:2] / 2)
        box = np.array([xy[0], xy[1], size[2] / 2, *size])
        grown = box.copy()
        grown[3:5] += cfg.min_gap
        if placed and iou_matrix(grown[None], np.stack(placed)).max() > 0.0:
            continue
        placed.append(box)
        classes.append(c)
    n_clutter = int(round(cfg.clutter_fraction * cfg.n_points))
    boxes = np.stack(placed)
    surf = _sample_surface(rng, boxes, cfg.n_points - n_clutter)
    surf += rng.normal(0.0, cfg.noise_sigma, size=surf.shape)
    clutter = rng.uniform(0.0, 1.0, size=(n_clutter, 3)) * room
    pts = np.concatenate([surf, clutter])[rng.permutation(cfg.n_points)]
    return Scene(
        f"scene{index:05d}",
        pts,
        [Box3.from_array(b) for b in boxes],
        classes,
        cfg.num_classes,
    )


# -- scene files -------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def format_scene(s: Scene) -> str:
    lines = [f"scene {s.id} {len(s.points)} {len(s.boxes)} {s.num_classes}"]
    lines.extend(" ".join(_fmt(v) for v in p) for p in s.points)
    for b, c in zip(s.boxes, s.classes):
        lines.append(" ".join([str(c)] + [_fmt(v) for v in b.center + b.size]))
    return "\n".join(lines) + "\n"


def write_scene(path, s: Scene) -> None:
    Path(path).write_text(format_scene(s), encoding="utf-8")


def parse_scene(text: str, source: str = "<scene>") -> Scene:
    lines = text.splitlines()
    if not lines:
        raise ParseError(f"{source}: empty file, missing header")
    head = lines[0].split()
    if len(head) != 5 or head[0] != "scene":
        raise ParseError(f"{source}:1: malformed header {lines[0]!r}")
    try:
        sid, n, nb, nc = head[1], int(head[2]), int(head[3]), int(head[4])
    except ValueError:
        raise ParseError(f"{source}:1: malformed header {lines[0]!r}") from None
    if len(lines) < 1 + n:
        raise ParseError(f"{source}: truncated in points section ({len(lines) - 1} of {n} point lines)")
    if len(lines) < 1 + n + nb:
        raise ParseError(f"{source}: truncated in boxes section ({len(lines) - 1 - n} of {nb} box lines)")
    pts = np.empty((n, 3))
    for i in range(n):
        row = lines[1 + i].split()
        try:
            if len(row) != 3:
                raise ValueError
            pts[i] = [float(v) for v in row]
        except ValueError:
            raise ParseError(f"{source}:{2 + i}: bad point line {lines[1 + i]!r}") from None
    boxes, classes = [], []
    for j in range(nb):
        ln = 2 + n + j
        row = lines[1 + n + j].split()
        try:
            if len(row) != 7:
                raise ValueError
            c = int(row[0])
            vals = [float(v) for v in row[1:]]
        except ValueError:
            raise ParseError(f"{source}:{ln}: bad box line {lines[1 + n + j]!r}") from None
        try:
            boxes.append(Box3(vals[:3], vals[3:]))
        except ValueError as e:
            raise ParseError(f"{source}:{ln}: invalid box: {e}") from None
        classes.append(c)
    if any(l.strip() for l in lines[1 + n + nb :]):
        raise ParseError(f"{source}: trailing content after {nb} box lines")
    try:
        return Scene(sid, pts, boxes, classes, nc)
    except ValueError as e:
        raise ParseError(f"{source}: {e}") from None


def read_scene(path) -> Scene:
    return parse_scene(Path(path).read_text(encoding="utf-8"), str(path))


def write_scene_dir(directory, scenes) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for s in scenes:
        write_scene(d / f"{s.id}.txt", s)


def read_scene_dir(directory) -> list[Scene]:
    d = Path(directory)
    files = sorted(d.glob("*.txt"))
    if not files:
        raise FileNotFoundError(f"no scene files in {d}")
    return [read_scene(f) for f in files]


# -- prediction files --------------------------------------------------------


def format_predictions(preds: dict[str, list[Detection]]) -> str:
    lines = []
    for sid in sorted(preds):
        order = sorted(range(len(preds[sid])), key=lambda i: (-preds[sid][i].objectness, i))
        for i in order:
            d = preds[sid][i]
            vals = " ".join(_fmt(v) for v in d.box.center + d.box.size)
            lines.append(f"{sid} {d.class_id} {_fmt(d.objectness)} {vals}")
    return "".join(l + "\n" for l in lines)


def write_predictions(path, preds: dict[str, list[Detection]]) -> None:
    Path(path).write_text(format_predictions(preds), encoding="utf-8")


def parse_predictions(text: str, source: str = "<predictions>") -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    for ln, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        row = line.split()
        try:
            if len(row) != 9:
                raise ValueError("expected 9 fields")
            sid, c, score = row[0], int(row[1]), float(row[2])
            vals = [float(v) for v in row[3:]]
            det = Detection(Box3(vals[:3], vals[3:]), c, score)
        except ValueError as e:
            raise ParseError(f"{source}:{ln}: {e}: {line!r}") from None
        out.setdefault(sid, []).append(det)
    return out


def read_predictions(path) -> dict[str, list[Detection]]:
    return parse_predictions(Path(path).read_text(encoding="utf-8"), str(path))
