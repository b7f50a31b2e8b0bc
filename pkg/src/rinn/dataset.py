"""Procedural symbols, train/test/detection scene synthesis, PGM and manifest I/O."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ManifestError,
    PackingError,
    PGMHeaderError,
    PGMTruncatedError,
    PGMValueError,
    ValidationError,
)
from .tensor import affine_resample, rotate_plane

GLYPH_SIZE = 32
TRAIN_CANVAS = 34
CLASS_COUNT = 15
GLYPH_RADIUS = GLYPH_SIZE / 2 * np.sqrt(2)  # bounding disk of the glyph square
STROKE_HALF_WIDTH = 1.4

# Stroke skeletons in a [-1, 1] box, y pointing down. Each entry is a list of
# polylines; ``("arc", cy, cx, r, a0, a1)`` items are circular arcs (degrees,
# counterclockwise on screen from a0 to a1).
_GLYPHS = [
    [[(1, -0.6), (-1, -0.6), (-1, 0.7)], [(0, -0.6), (0, 0.4)]],  # F
    [[(1, -0.5), (-1, -0.5), (-1, 0.3), (-0.7, 0.6), (-0.3, 0.6), (0, 0.3), (0, -0.5)]],  # P
    [[(-1, -0.1), (-1, 0.8)], [(-1, 0.35), (0.55, 0.35)], ("arc", 0.55, -0.1, 0.45, 0, -180)],  # J
    [("arc", 0, 0, 0.85, 40, 320), [(0.1, 0.85), (0.1, 0.2)]],  # G
    [[(1, 0.3), (-1, 0.3), (0.4, -0.7), (0.4, 0.8)]],  # 4
    [[(-1, -0.7), (-1, 0.7), (1, -0.2)]],  # 7
    [[(-0.85, -0.7), (-1, 0), (-0.85, 0.6), (-0.3, 0.7), (0.2, -0.7), (1, -0.7), (1, 0.8)]],  # 2-like
    [[(-1, 0.6), (-1, -0.5), (-0.15, -0.6), (-0.1, 0.3), (0.4, 0.6), (0.9, 0.2), (1, -0.6)]],  # 5-like
    [[(0, -0.9), (0, 0.9)], [(-0.5, 0.35), (0, 0.9), (0.5, 0.35)]],  # arrow
    [[(-1, -0.7), (-0.1, 0), (-1, 0.7)], [(-0.1, 0), (1, 0)]],  # Y
    [[(-1, -0.6), (1, -0.6)], [(-0.2, -0.6), (-0.1, 0.2), (0.3, 0.6), (1, 0.6)]],  # h-like
    [[(1, -0.5), (-1, -0.5)], [(-1, -0.5), (-0.6, 0.7), (-0.2, -0.5)]],  # flag
    [[(-1, -0.6), (1, -0.6)], [(-0.6, 0.6), (0.1, -0.6), (1, 0.6)]],  # k
    [[(-1, 0), (1, 0)], [(-0.4, -0.6), (-0.4, 0.6)], [(0.55, 0.0), (0.55, 0.5)]],  # dagger + tick
    [[(-1, -0.7), (1, -0.7), (1, 0.7)], [(-0.2, 0.1), (0.2, 0.1)]],  # L + dot
]

# Extra symbols never used for base training; available for one-shot runs.
_NOVEL_GLYPHS = [
    [[(-1, -0.7), (-1, 0.7)], [(-1, 0), (0.9, -0.7)], [(0.2, -0.35), (0.9, 0.5)]],
    [("arc", -0.35, 0, 0.55, 90, 360), [(0.2, 0.0), (1, -0.6)], [(0.2, 0.0), (1, 0.6)]],
]


def _sample_arc(cy, cx, r, a0, a1, steps=24):
    # counterclockwise on screen means y decreases for positive angles
    a = np.deg2rad(np.linspace(a0, a1, steps))
    return [(cy - r * np.sin(t), cx + r * np.cos(t)) for t in a]


def _segment_distance(py, px, a, b):
    ay, ax = a
    by, bx = b
    vy, vx = by - ay, bx - ax
    L2 = vy * vy + vx * vx
    t = np.clip(((py - ay) * vy + (px - ax) * vx) / L2, 0.0, 1.0) if L2 > 0 else 0.0
    return np.hypot(py - (ay + t * vy), px - (ax + t * vx))


def _render(strokes, size):
    scale = (size / 2 - 4.0)
    c = (size - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    dist = np.full((size, size), np.inf)
    for stroke in strokes:
        if stroke[0] == "arc":
            pts = _sample_arc(*stroke[1:])
        else:
            pts = stroke
        pts = [(c + py * scale, c + px * scale) for py, px in pts]
        for a, b in zip(pts[:-1], pts[1:]):
            dist = np.minimum(dist, _segment_distance(yy, xx, a, b))
    return np.clip(STROKE_HALF_WIDTH + 0.5 - dist, 0.0, 1.0)


def rasterize_glyph(class_id: int, size: int = GLYPH_SIZE) -> np.ndarray:
    """Anti-aliased drawing of training symbol ``class_id`` in [0, 1]."""
    if not 0 <= int(class_id) < CLASS_COUNT or int(class_id) != class_id:
        raise ValidationError(f"class_id must be in [0, {CLASS_COUNT}), got {class_id}")
    return _render(_GLYPHS[int(class_id)], size)


def rasterize_novel_glyph(index: int, size: int = GLYPH_SIZE) -> np.ndarray:
    if not 0 <= index < len(_NOVEL_GLYPHS):
        raise ValidationError(f"novel glyph index must be in [0, {len(_NOVEL_GLYPHS)})")
    return _render(_NOVEL_GLYPHS[index], size)


def normalized_correlation(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a @ a) * (b @ b))
    return float(a @ b / den) if den > 0 else 0.0


def asymmetry_scores(glyph, step_deg: float = 30.0) -> list:
    """Normalized correlation of ``glyph`` with each of its non-trivial rotations."""
    return [normalized_correlation(glyph, rotate_plane(glyph, a))
            for a in np.arange(step_deg, 360.0, step_deg)]


# scenes ----------------------------------------------------------------------


@dataclass
class SampleRecord:
    path: str
    class_id: int
    cy: float
    cx: float
    angle_deg: float

    @property
    def center(self):
        return self.cy, self.cx


@dataclass
class Scene:
    canvas: np.ndarray
    placements: list = field(default_factory=list)


def paste_glyph(canvas, glyph, cy, cx, angle_deg):
    """Add ``glyph`` rotated by ``angle_deg`` and centered at (cy, cx) to ``canvas`` in place."""
    gc = ((glyph.shape[0] - 1) / 2.0, (glyph.shape[1] - 1) / 2.0)
    canvas += affine_resample(glyph, canvas.shape, angle_deg, gc, (cy, cx))
    np.clip(canvas, 0.0, 1.0, out=canvas)
    return canvas


def render_sample(record: SampleRecord, canvas: int, glyph=None) -> np.ndarray:
    img = np.zeros((canvas, canvas))
    glyph = rasterize_glyph(record.class_id) if glyph is None else glyph
    return paste_glyph(img, glyph, record.cy, record.cx, record.angle_deg)


def gen_train_set():
    """One centered, upright sample per class on a 34x34 canvas."""
    c = (TRAIN_CANVAS - 1) / 2.0
    records = [SampleRecord(f"train_{k:02d}.pgm", k, c, c, 0.0) for k in range(CLASS_COUNT)]
    images = [render_sample(r, TRAIN_CANVAS) for r in records]
    return records, images


def _center_range(canvas):
    lo = GLYPH_RADIUS
    hi = canvas - 1 - GLYPH_RADIUS
    if hi < lo:
        raise PackingError(f"canvas {canvas} cannot hold a glyph disk of radius {GLYPH_RADIUS:.2f}")
    return lo, hi


def gen_test_set(count: int = 1000, canvas: int = 64, seed: int = 0, glyph=None, class_id=None):
    """Random rotations and translations of the training symbols.

    Returns ``(records, images)``. With ``glyph`` every sample shows that
    drawing instead (labelled ``class_id``).
    """
    if count < 1:
        raise ValidationError("count must be at least 1")
    rng = np.random.default_rng(seed)
    lo, hi = _center_range(canvas)
    glyphs = [rasterize_glyph(k) for k in range(CLASS_COUNT)]
    records, images = [], []
    for s in range(count):
        k = int(rng.integers(CLASS_COUNT)) if glyph is None else int(class_id or 0)
        angle = float(rng.uniform(0.0, 360.0))
        cy, cx = (float(v) for v in rng.uniform(lo, hi, size=2))
        rec = SampleRecord(f"test_{s:04d}.pgm", k, cy, cx, angle)
        records.append(rec)
        images.append(render_sample(rec, canvas, glyphs[k] if glyph is None else glyph))
    return records, images


def disks_separated(placements, min_dist: float = 2 * GLYPH_RADIUS) -> bool:
    pts = [(p.cy, p.cx) for p in placements]
    for a in range(len(pts)):
        for b in range(a + 1, len(pts)):
            if np.hypot(pts[a][0] - pts[b][0], pts[a][1] - pts[b][1]) <= min_dist:
                return False
    return True


def gen_detection_scene(symbol_count: int, canvas: int = 128, seed: int = 0, name: str = "scene.pgm",
                        max_attempts: int = 1000) -> Scene:
    rng = np.random.default_rng(seed)
    lo, hi = _center_range(canvas)
    placed = []
    attempts = 0
    while len(placed) < symbol_count:
        attempts += 1
        if attempts > max_attempts:
            raise PackingError(
                f"could not place {symbol_count} non-overlapping symbols on a {canvas}x{canvas} canvas"
            )
        cy, cx = (float(v) for v in rng.uniform(lo, hi, size=2))
        cand = SampleRecord(name, int(rng.integers(CLASS_COUNT)), cy, cx, float(rng.uniform(0.0, 360.0)))
        if disks_separated(placed + [cand]):
            placed.append(cand)
    img = np.zeros((canvas, canvas))
    for p in placed:
        paste_glyph(img, rasterize_glyph(p.class_id), p.cy, p.cx, p.angle_deg)
    return Scene(img, placed)


def make_background_batch(count: int, canvas: int, seed: int = 0):
    """Background canvases (half all-zero, half low-amplitude noise) with all-zero labels."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for s in range(max(count, 0)):
        if s % 2 == 0:
            img = np.zeros((canvas, canvas))
        else:
            img = np.clip(rng.normal(0.0, 0.05, size=(canvas, canvas)), 0.0, 1.0)
        images.append(img)
        labels.append(np.zeros(CLASS_COUNT))
    return images, labels


# file I/O ----------------------------------------------------------------------


def write_pgm(img, path) -> None:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise PGMValueError(f"PGM images must be 2-D, got shape {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise PGMValueError("pixel values must lie in [0, 1]")
    h, w = img.shape
    data = np.round(img * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def _pgm_tokens(raw, count):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PGMHeaderError("incomplete PGM header")
        tokens.append(raw[start:pos])
    if pos >= len(raw):
        raise PGMHeaderError("incomplete PGM header")
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 file into a float64 array in [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] != b"P5":
        raise PGMHeaderError(f"{path}: not a binary PGM (P5) file")
    (magic, w, h, maxval), pos = _pgm_tokens(raw, 4)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise PGMHeaderError(f"{path}: non-numeric header field") from None
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise PGMHeaderError(f"{path}: unsupported header {w}x{h} maxval {maxval}")
    payload = raw[pos:]
    if len(payload) < w * h:
        raise PGMTruncatedError(f"{path}: expected {w * h} pixel bytes, found {len(payload)}")
    data = np.frombuffer(payload[: w * h], dtype=np.uint8).reshape(h, w)
    if data.max(initial=0) > maxval:
        raise PGMValueError(f"{path}: pixel value exceeds maxval {maxval}")
    return data.astype(np.float64) / maxval


_MANIFEST_FIELDS = ("path", "class_id", "cy", "cx", "angle_deg")


def write_manifest(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(json.dumps({
                "path": r.path,
                "class_id": int(r.class_id),
                "cy": float(r.cy),
                "cx": float(r.cx),
                "angle_deg": float(r.angle_deg),
            }) + "\n")


def read_manifest(path) -> list:
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                records.append(SampleRecord(
                    str(doc["path"]), int(doc["class_id"]), float(doc["cy"]),
                    float(doc["cx"]), float(doc["angle_deg"]),
                ))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ManifestError(f"{path}:{lineno}: bad record ({e})") from None
    return records


def load_split(directory):
    """Read ``manifest.txt`` in ``directory`` plus every image it references (cached by path)."""
    records = read_manifest(os.path.join(directory, "manifest.txt"))
    cache = {}
    images = []
    for r in records:
        if r.path not in cache:
            cache[r.path] = read_pgm(os.path.join(directory, r.path))
        images.append(cache[r.path])
    return records, images
