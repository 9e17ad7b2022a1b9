"""Records, preprocessing geometry, cross-subject splits and a synthetic eye generator.

Landmark layout (0-based, 28 per eye):

    0-7    cornea (iris) outline
    8-19   outer-eye outline; 8 and 14 are the canthi, 11 and 17 the lid midpoints
    20-27  pupil outline

Dataset layout on disk::

    root/manifest.tsv           image_id, subject_id, image_path, head_pitch_rad,
                                head_yaw_rad, gaze_pitch_rad, gaze_yaw_rad
    root/landmarks/<id>.json    {"image_id", "left", "right"} with 28 [x, y] pairs
    root/images/<id>.png        8-bit RGB, 384 wide by 480 high
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import _kernels
from .geometry import angles_to_vector
from .heatmap import (
    N_LANDMARKS,
    as_landmarks,
    bilinear_downscale,
    crop_patch,
    eye_center,
    heatmap_patch,
)

log = logging.getLogger(__name__)

FACE_W, FACE_H = 384, 480
PATCH = 120
EYES = ("left", "right")
MANIFEST_COLUMNS = (
    "image_id",
    "subject_id",
    "image_path",
    "head_pitch_rad",
    "head_yaw_rad",
    "gaze_pitch_rad",
    "gaze_yaw_rad",
)


class DatasetError(ValueError):
    pass


@dataclass
class Record:
    image_id: str
    subject_id: str
    landmarks: dict
    head_pose: np.ndarray
    gaze: np.ndarray
    image_path: str | None = None
    image: np.ndarray | None = field(default=None, repr=False)
    meta: dict = field(default_factory=dict, repr=False, compare=False)

    def load_image(self) -> np.ndarray:
        if self.image is None:
            if self.image_path is None:
                raise DatasetError(f"{self.image_id}: no image data or path")
            try:
                with Image.open(self.image_path) as im:
                    self.image = np.asarray(im.convert("RGB"), dtype=np.uint8)
            except FileNotFoundError:
                raise DatasetError(f"{self.image_id}: missing image {self.image_path}") from None
        return self.image

    def same_fields(self, other: "Record") -> bool:
        return (
            self.image_id == other.image_id
            and self.subject_id == other.subject_id
            and all(np.array_equal(self.landmarks[e], other.landmarks[e]) for e in EYES)
            and np.array_equal(self.head_pose, other.head_pose)
            and np.array_equal(self.gaze, other.gaze)
            and np.array_equal(self.load_image(), other.load_image())
        )


@dataclass
class Sample:
    rgb: np.ndarray
    heatmap: np.ndarray
    landmarks: np.ndarray
    head_pose: np.ndarray
    gaze: np.ndarray
    subject_id: str
    eye: str
    image_id: str = ""


@dataclass
class SplitSpec:
    ratios: tuple = (8, 1, 1)
    seed: int = 0


# ---------------------------------------------------------------------------
# preprocessing geometry
# ---------------------------------------------------------------------------


def resize_image(image, out_h: int, out_w: int) -> np.ndarray:
    img = np.asarray(image)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    out = _kernels.bilinear_resize_kernel(img.astype(np.float64), out_h, out_w)
    return out[:, :, 0] if squeeze else out


def pad_face_crop(image, landmarks=None, size=(FACE_W, FACE_H)):
    """Centre a face crop on a zero canvas of ``size`` (width, height).

    Crops larger than the canvas in either dimension are first scaled down
    with their aspect ratio preserved. Landmarks (a dict of arrays or a single
    array) receive the same scale and shift. Returns ``(canvas, landmarks,
    (scale, dx, dy))``.
    """
    img = np.asarray(image)
    if img.size == 0 or img.ndim < 2:
        raise DatasetError("cannot pad an empty image")
    tw, th = size
    h, w = img.shape[:2]
    scale = 1.0
    if w > tw or h > th:
        scale = min(tw / w, th / h)
        nw, nh = min(tw, int(round(w * scale))), min(th, int(round(h * scale)))
        resized = resize_image(img, nh, nw)
        if img.dtype == np.uint8:
            resized = np.clip(np.rint(resized), 0, 255).astype(np.uint8)
        # per-axis factors keep the landmark mapping exact after rounding
        sx, sy = nw / w, nh / h
        img, h, w = resized, nh, nw
    else:
        sx = sy = 1.0
    dx, dy = (tw - w) // 2, (th - h) // 2
    canvas = np.zeros((th, tw) + img.shape[2:], dtype=img.dtype)
    canvas[dy : dy + h, dx : dx + w] = img

    def move(pts):
        p = np.array(pts, dtype=np.float64)
        return np.stack([p[..., 0] * sx + dx, p[..., 1] * sy + dy], axis=-1)

    if landmarks is None:
        moved = None
    elif isinstance(landmarks, dict):
        moved = {k: move(v) for k, v in landmarks.items()}
    else:
        moved = move(landmarks)
    return canvas, moved, (scale, dx, dy)


def make_sample(
    record: Record,
    eye: str = "left",
    resolution: int = PATCH,
    seed: int | None = None,
    heatmap_scale: float = 1.0,
    patch_size: int = PATCH,
) -> Sample:
    """Crop aligned RGB and heatmap patches around one eye.

    ``eye="random"`` draws left or right from ``seed``.
    """
    if eye == "random":
        eye = EYES[int(np.random.default_rng(seed).integers(2))]
    if eye not in EYES:
        raise ValueError(f"eye must be left, right or random, got {eye!r}")
    lm = as_landmarks(record.landmarks[eye])
    image = record.load_image()
    c = eye_center(lm)
    rgb = crop_patch(image, c, patch_size).astype(np.float32) / np.float32(255.0)
    hm = heatmap_patch(lm, c, patch_size, image.shape, heatmap_scale)
    if resolution != patch_size:
        rgb = bilinear_downscale(rgb, resolution)
        hm = bilinear_downscale(hm, resolution)
    return Sample(
        rgb=np.asarray(rgb, dtype=np.float32),
        heatmap=np.asarray(hm, dtype=np.float32),
        landmarks=lm,
        head_pose=np.asarray(record.head_pose, dtype=np.float64),
        gaze=np.asarray(record.gaze, dtype=np.float64),
        subject_id=record.subject_id,
        eye=eye,
        image_id=record.image_id,
    )


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def split_cross_subject(records, spec: SplitSpec = SplitSpec()):
    """Partition records into subject-disjoint train/val/test lists.

    Subjects are shuffled by ``spec.seed``; the two cut points in that order
    are chosen so cumulative record counts land as close as possible to the
    requested ratios, keeping val and test nonempty when there are at least
    three subjects.
    """
    records = list(records)
    if not records:
        raise DatasetError("cannot split zero records")
    subjects = sorted({r.subject_id for r in records})
    if len(subjects) < 10:
        warnings.warn(f"only {len(subjects)} subjects; an 8:1:1 cross-subject split is degenerate")
    order = list(np.random.default_rng(spec.seed).permutation(len(subjects)))
    shuffled = [subjects[i] for i in order]
    counts = {s: 0 for s in subjects}
    for r in records:
        counts[r.subject_id] += 1
    cum = np.concatenate([[0], np.cumsum([counts[s] for s in shuffled])])
    total = cum[-1]
    ratios = np.asarray(spec.ratios, dtype=np.float64)
    t1, t2 = np.cumsum(ratios)[:2] / ratios.sum() * total
    n = len(shuffled)
    if n >= 3:
        # every split keeps at least one subject
        pairs = [(k1, k2) for k1 in range(1, n - 1) for k2 in range(k1 + 1, n)]
    else:
        pairs = [(k1, k2) for k1 in range(n + 1) for k2 in range(k1, n + 1)]
    best = min((abs(cum[k1] - t1) + abs(cum[k2] - t2), k1, k2) for k1, k2 in pairs)
    _, k1, k2 = best
    which = {}
    for i, s in enumerate(shuffled):
        which[s] = 0 if i < k1 else (1 if i < k2 else 2)
    parts = ([], [], [])
    for r in records:
        parts[which[r.subject_id]].append(r)
    return parts


# ---------------------------------------------------------------------------
# synthetic eyes
# ---------------------------------------------------------------------------

GAZE_RANGE = (math.radians(20.0), math.radians(25.0))  # |pitch|, |yaw|
HEAD_RANGE = math.radians(15.0)


def _ellipse_mask(px, py, cx, cy, a, b):
    return ((px - cx) / a) ** 2 + ((py - cy) / b) ** 2 <= 1.0


def _disc_axes(gaze_vec):
    """In-image axes of a disc whose normal is the gaze direction."""
    gx, gy, gz = gaze_vec
    r = math.hypot(gx, gy)
    v = np.array([1.0, 0.0]) if r < 1e-12 else np.array([gx / r, gy / r])
    u = np.array([-v[1], v[0]])
    return u, v, abs(gz)


def _disc_mask(px, py, c, radius, u, v, squash):
    qx, qy = px - c[0], py - c[1]
    pu = qx * u[0] + qy * u[1]
    pv = qx * v[0] + qy * v[1]
    return (pu / radius) ** 2 + (pv / (radius * squash)) ** 2 <= 1.0


def _disc_points(c, radius, u, v, squash, n=8):
    t = 2.0 * np.pi * np.arange(n) / n
    return c[None, :] + radius * (np.cos(t)[:, None] * u[None, :] + squash * np.sin(t)[:, None] * v[None, :])


def eye_landmarks(center, a, b, pupil_center, iris_r, pupil_r, gaze_vec) -> np.ndarray:
    """Exact 28-point layout for one synthetic eye."""
    u, v, squash = _disc_axes(gaze_vec)
    pts = np.empty((N_LANDMARKS, 2))
    pts[0:8] = _disc_points(pupil_center, iris_r, u, v, squash)
    theta = np.pi - 2.0 * np.pi * np.arange(12) / 12
    pts[8:20, 0] = center[0] + a * np.cos(theta)
    pts[8:20, 1] = center[1] - b * np.sin(theta)
    pts[20:28] = _disc_points(pupil_center, pupil_r, u, v, squash)
    return pts


def _render_eye(canvas, eye, supersample=3):
    """Paint one eye into ``canvas`` (float, H x W x 3) in place."""
    cx, cy, a, b = eye["center"][0], eye["center"][1], eye["a"], eye["b"]
    x0, x1 = int(math.floor(cx - a - 4)), int(math.ceil(cx + a + 4))
    y0, y1 = int(math.floor(cy - b - 4)), int(math.ceil(cy + b + 4))
    s = supersample
    offs = (np.arange(s) + 0.5) / s
    ys = (np.arange(y0, y1)[:, None] + offs[None, :]).reshape(-1)
    xs = (np.arange(x0, x1)[:, None] + offs[None, :]).reshape(-1)
    py, px = np.meshgrid(ys, xs, indexing="ij")
    region = canvas[y0:y1, x0:x1].repeat(s, axis=0).repeat(s, axis=1).copy()
    u, v, squash = _disc_axes(eye["gaze_vec"])
    inside = _ellipse_mask(px, py, cx, cy, a, b)
    lid = _ellipse_mask(px, py, cx, cy, a + 1.6, b + 1.6) & ~inside
    iris = inside & _disc_mask(px, py, eye["pupil_center"], eye["iris_r"], u, v, squash)
    pupil = inside & _disc_mask(px, py, eye["pupil_center"], eye["pupil_r"], u, v, squash)
    region[lid] = eye["lid_color"]
    region[inside] = eye["sclera_color"]
    region[iris] = eye["iris_color"]
    region[pupil] = eye["pupil_color"]
    h, w = y1 - y0, x1 - x0
    canvas[y0:y1, x0:x1] = region.reshape(h, s, w, s, 3).mean(axis=(1, 3))


def _subject_params(seed, s):
    rng = np.random.default_rng([seed, 1, s])
    skin = np.array([205.0, 160.0, 130.0]) * rng.uniform(0.55, 1.1) + rng.normal(0, 6, 3)
    return {
        "skin": np.clip(skin, 30, 250),
        "face_dx": rng.uniform(-8, 8),
        "eye_y": rng.uniform(185, 215),
        "eye_gap": rng.uniform(56, 68),
        "a": rng.uniform(27.0, 33.0),
        "aspect": rng.uniform(0.42, 0.52),
        "iris_ratio": rng.uniform(0.40, 0.46),
        "pupil_ratio": rng.uniform(0.14, 0.18),
        "ball_ratio": 0.9,
        "iris_color": rng.uniform([40, 50, 30], [140, 120, 110]),
        "sclera_color": rng.uniform([220, 215, 205], [245, 240, 235]),
    }


def synth_generate(n: int, seed: int = 0, noise_level: float = 0.0, n_subjects: int | None = None):
    """Render ``n`` synthetic face crops with exact landmarks and labels.

    Gaze is drawn uniformly within +-20 deg pitch and +-25 deg yaw, head pose
    within +-15 deg. The iris and pupil centres sit at ``R * (g_x, g_y)`` from
    the eye centre, the orthographic image of a gaze-aligned eyeball of radius
    R, so the gaze is visible in both pixels and pupil landmarks. Head pose
    only changes how wide the lids open. ``noise_level`` adds Gaussian noise of
    that many pixels to landmarks and ``8 * noise_level`` grey levels to pixels.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if n_subjects is None:
        n_subjects = min(n, max(10, n // 8))
    subjects = [_subject_params(seed, s) for s in range(n_subjects)]
    records = []
    for i in range(n):
        s = i % n_subjects
        sp = subjects[s]
        rng = np.random.default_rng([seed, 2, i])
        gaze = np.array([rng.uniform(-GAZE_RANGE[0], GAZE_RANGE[0]), rng.uniform(-GAZE_RANGE[1], GAZE_RANGE[1])])
        head = rng.uniform(-HEAD_RANGE, HEAD_RANGE, 2)
        gvec = angles_to_vector(gaze)
        canvas = np.empty((FACE_H, FACE_W, 3))
        canvas[...] = sp["skin"]
        shade = np.linspace(-10.0, 10.0, FACE_H)[:, None, None]
        canvas += shade
        landmarks, centers = {}, {}
        for eye, side in (("right", -1.0), ("left", 1.0)):
            c = np.array([FACE_W / 2 + sp["face_dx"] + side * sp["eye_gap"], sp["eye_y"]])
            a = sp["a"]
            b = a * sp["aspect"] * (1.0 + 0.4 * math.sin(head[0]))
            ball = sp["ball_ratio"] * a
            pc = c + ball * gvec[:2]
            e = {
                "center": c,
                "a": a,
                "b": b,
                "pupil_center": pc,
                "iris_r": sp["iris_ratio"] * a,
                "pupil_r": sp["pupil_ratio"] * a,
                "gaze_vec": gvec,
                "lid_color": sp["skin"] * 0.55,
                "sclera_color": sp["sclera_color"],
                "iris_color": sp["iris_color"],
                "pupil_color": np.array([18.0, 16.0, 20.0]),
            }
            _render_eye(canvas, e)
            landmarks[eye] = eye_landmarks(c, a, b, pc, e["iris_r"], e["pupil_r"], gvec)
            centers[eye] = (float(c[0]), float(c[1]))
        if noise_level > 0:
            canvas += rng.normal(0.0, 8.0 * noise_level, canvas.shape)
            for eye in EYES:
                landmarks[eye] = landmarks[eye] + rng.normal(0.0, noise_level, landmarks[eye].shape)
        image = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
        records.append(
            Record(
                image_id=f"img{i:05d}",
                subject_id=f"s{s:03d}",
                landmarks=landmarks,
                head_pose=head,
                gaze=gaze,
                image=image,
                meta={"eye_centers": centers, "eyeball_radius": sp["ball_ratio"] * sp["a"]},
            )
        )
    return records


# ---------------------------------------------------------------------------
# disk layout
# ---------------------------------------------------------------------------


def export_records(records, root) -> None:
    """Write records in the dataset layout; identical input gives identical bytes."""
    root = Path(root)
    (root / "landmarks").mkdir(parents=True, exist_ok=True)
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.tsv", "w", newline="") as fh:
        fh.write("\t".join(MANIFEST_COLUMNS) + "\n")
        for r in records:
            rel = f"images/{r.image_id}.png"
            Image.fromarray(r.load_image()).save(root / rel, format="PNG")
            row = [r.image_id, r.subject_id, rel] + [repr(float(v)) for v in (*r.head_pose, *r.gaze)]
            fh.write("\t".join(row) + "\n")
            doc = {"image_id": r.image_id}
            for eye in EYES:
                doc[eye] = [[float(x), float(y)] for x, y in np.asarray(r.landmarks[eye])]
            (root / "landmarks" / f"{r.image_id}.json").write_text(json.dumps(doc) + "\n")


def _valid_eye(points):
    if points is None:
        return None
    try:
        return as_landmarks(points)
    except ValueError:
        return None


def load_records(root, stats: dict | None = None, load_images: bool = False):
    """Parse ``root/manifest.tsv`` and its landmark files.

    Records without a valid 28-point set for both eyes are excluded and
    counted under ``stats["excluded"]``.
    """
    root = Path(root)
    manifest = root / "manifest.tsv"
    stats = stats if stats is not None else {}
    stats.setdefault("excluded", 0)
    stats.setdefault("loaded", 0)
    records = []
    if not manifest.exists():
        raise DatasetError(f"{manifest}: manifest not found")
    with open(manifest, newline="") as fh:
        lines = fh.read().splitlines()
    if not lines:
        return records
    header = lines[0].split("\t")
    missing = [c for c in MANIFEST_COLUMNS if c not in header]
    if missing:
        raise DatasetError(f"{manifest}:1: missing columns {missing}")
    col = {c: header.index(c) for c in MANIFEST_COLUMNS}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split("\t")
        if len(cells) != len(header):
            raise DatasetError(f"{manifest}:{lineno}: expected {len(header)} fields, got {len(cells)}")
        try:
            nums = [float(cells[col[c]]) for c in MANIFEST_COLUMNS[3:]]
        except ValueError as exc:
            raise DatasetError(f"{manifest}:{lineno}: {exc}") from None
        image_id = cells[col["image_id"]]
        lm_path = root / "landmarks" / f"{image_id}.json"
        eyes = {}
        if lm_path.exists():
            try:
                doc = json.loads(lm_path.read_text())
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{lm_path}:{exc.lineno}: {exc.msg}") from None
            eyes = {e: _valid_eye(doc.get(e)) for e in EYES}
        if any(eyes.get(e) is None for e in EYES):
            stats["excluded"] += 1
            log.info("excluding %s: landmarks missing for at least one eye", image_id)
            continue
        rec = Record(
            image_id=image_id,
            subject_id=cells[col["subject_id"]],
            landmarks=eyes,
            head_pose=np.array(nums[0:2]),
            gaze=np.array(nums[2:4]),
            image_path=str(root / cells[col["image_path"]]),
        )
        if load_images:
            rec.load_image()
        records.append(rec)
    stats["loaded"] += len(records)
    if stats["excluded"]:
        log.warning("excluded %d records with missing landmarks", stats["excluded"])
    return records


# ---------------------------------------------------------------------------
# signal oracle
# ---------------------------------------------------------------------------


def pupil_offset_features(records, eye="left") -> np.ndarray:
    """Pupil centre minus eye centre, divided by the eye half-width."""
    feats = []
    for r in records:
        lm = as_landmarks(r.landmarks[eye])
        c = np.array(eye_center(lm))
        half = 0.5 * np.linalg.norm(lm[14] - lm[8])
        feats.append((lm[20:28].mean(axis=0) - c) / half)
    return np.array(feats)


def _poly(f, degree=3):
    u, v = f[:, 0], f[:, 1]
    cols = [u**i * v**j for i in range(degree + 1) for j in range(degree + 1 - i)]
    return np.stack(cols, axis=1)


def fit_pupil_offset_oracle(records, degree=3):
    """Least-squares polynomial map from pupil offset to (pitch, yaw).

    Independent of the network: it only reads landmarks and labels.
    Returns ``(coefficients, predict)``.
    """
    X = _poly(pupil_offset_features(records), degree)
    Y = np.array([r.gaze for r in records])
    coef, *_ = np.linalg.lstsq(X, Y, rcond=None)

    def predict(recs):
        return _poly(pupil_offset_features(recs), degree) @ coef

    return coef, predict
