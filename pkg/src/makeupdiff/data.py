"""Procedural paired makeup dataset.

Generates parametric faces with exact landmarks and masks, applies procedural
makeup over analytically known regions, and composites non-face pixels back
from the original so every pair carries a bitwise non-face identity guarantee.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .structure import GROUP_SLICES, KeypointSet, face_polygon

PATTERN_KINDS = ("fill", "gradient", "stripes", "dots")

# Regions that may carry a makeup recipe (the keypoint group vocabulary).
REGION_LABELS = tuple(GROUP_SLICES)

_STYLE_WORDS = (
    "rose", "smoky", "coral", "plum", "golden", "ivory", "crimson", "teal",
    "lilac", "bronze", "ruby", "sable", "peach", "cobalt", "amber", "onyx",
)


@dataclass
class FaceSample:
    image: np.ndarray      # (H, W, 3) float32 in [0, 1], no makeup
    keypoints: KeypointSet
    face_mask: np.ndarray  # (H, W) uint8 in {0, 1}
    seed: int


@dataclass
class MakeupStyle:
    style_id: str
    # (region label, RGB color in [0,1], pattern kind, opacity in [0,1])
    region_recipes: list[tuple[str, tuple[float, float, float], str, float]]

    def validate(self):
        if not self.region_recipes:
            raise ValueError("style needs at least one recipe")
        for region, color, pattern, opacity in self.region_recipes:
            if region not in REGION_LABELS:
                raise ValueError(f"unknown region label: {region!r}")
            if pattern not in PATTERN_KINDS:
                raise ValueError(f"unknown pattern kind: {pattern!r}")
            if not 0.0 <= opacity <= 1.0:
                raise ValueError("opacity out of range")

    def to_jsonable(self) -> dict:
        return {
            "style_id": self.style_id,
            "region_recipes": [
                [r, list(map(float, c)), p, float(o)] for r, c, p, o in self.region_recipes
            ],
        }

    @classmethod
    def from_jsonable(cls, obj: dict) -> "MakeupStyle":
        return cls(
            obj["style_id"],
            [(r, tuple(c), p, float(o)) for r, c, p, o in obj["region_recipes"]],
        )


@dataclass
class PairedSample:
    source: FaceSample
    target_image: np.ndarray  # with makeup; equals source outside face_mask
    style: MakeupStyle


@dataclass
class DatasetManifest:
    root: Path
    # (pair_id, source path, target path, keypoints path, mask path, style_id)
    entries: list[tuple[str, str, str, str, str, str]]
    seed: int

    def to_jsonable(self) -> dict:
        return {
            "version": 1,
            "seed": self.seed,
            "entries": [list(e) for e in self.entries],
        }

    @classmethod
    def load(cls, root: Path) -> "DatasetManifest":
        root = Path(root)
        obj = json.loads((root / "manifest.json").read_text())
        return cls(root, [tuple(e) for e in obj["entries"]], obj["seed"])


def generate_style_catalog(n: int, seed: int) -> list[MakeupStyle]:
    """Deterministically sample ``n`` distinct makeup styles."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    styles = []
    for i in range(n):
        word = _STYLE_WORDS[rng.integers(len(_STYLE_WORDS))]
        n_regions = int(rng.integers(1, 5))
        regions = rng.choice(len(REGION_LABELS), size=n_regions, replace=False)
        recipes = []
        for ridx in regions:
            color = tuple(np.round(rng.uniform(0, 1, size=3), 4).tolist())
            pattern = PATTERN_KINDS[rng.integers(len(PATTERN_KINDS))]
            opacity = float(np.round(rng.uniform(0.3, 1.0), 4))
            recipes.append((REGION_LABELS[ridx], color, pattern, opacity))
        style = MakeupStyle(f"{word}-{i:04d}", recipes)
        style.validate()
        styles.append(style)
    return styles


def _ellipse_points(cx, cy, rx, ry, thetas):
    return np.stack([cx + rx * np.cos(thetas), cy + ry * np.sin(thetas)], axis=1)


def render_face(seed: int, size: int) -> FaceSample:
    """Rasterize a parametric face; landmarks and mask share its parameters.

    No anti-aliasing anywhere, so the face mask is exact and compositing
    against it is bitwise-testable.
    """
    if size < 32:
        raise ValueError("size must be >= 32")
    rng = np.random.default_rng(seed)
    s = float(size)

    cx = s * (0.5 + rng.uniform(-0.03, 0.03))
    cy = s * (0.52 + rng.uniform(-0.02, 0.02))
    rx = s * rng.uniform(0.27, 0.33)
    ry = s * rng.uniform(0.34, 0.40)

    bg = rng.uniform(0.15, 0.85, size=3)
    skin = np.array([rng.uniform(0.55, 0.95), rng.uniform(0.45, 0.75), rng.uniform(0.35, 0.65)])
    skin = np.sort(skin)[::-1]  # warm tone: R >= G >= B
    iris = rng.uniform(0.1, 0.6, size=3)
    lip = np.array([rng.uniform(0.5, 0.8), rng.uniform(0.2, 0.4), rng.uniform(0.2, 0.4)])
    brow_c = rng.uniform(0.05, 0.35, size=3)

    # Landmarks, y-down coordinates.
    brow_y = cy - 0.45 * ry
    phi = np.arcsin((brow_y - cy) / ry)  # temple angle on the head ellipse
    jaw = _ellipse_points(cx, cy, rx, ry, np.linspace(np.pi - phi, phi, 17))

    eye_dx = 0.45 * rx
    eye_y = cy - 0.22 * ry
    eye_rx = 0.17 * rx * rng.uniform(0.9, 1.1)
    eye_ry = 0.55 * eye_rx
    eye_th = np.linspace(np.pi, -np.pi, 6, endpoint=False)
    left_eye = _ellipse_points(cx - eye_dx, eye_y, eye_rx, eye_ry, eye_th)
    right_eye = _ellipse_points(cx + eye_dx, eye_y, eye_rx, eye_ry, eye_th)

    brow_w = 1.4 * eye_rx
    brow_arc = rng.uniform(0.02, 0.05) * ry
    bt = np.linspace(-1, 1, 5)
    left_brow = np.stack([cx - eye_dx + brow_w * bt, brow_y - brow_arc * (1 - bt**2)], axis=1)
    right_brow = np.stack([cx + eye_dx + brow_w * bt, brow_y - brow_arc * (1 - bt**2)], axis=1)

    nose_top = cy - 0.18 * ry
    nose_bot = cy + 0.16 * ry
    bridge = np.stack([np.full(4, cx), np.linspace(nose_top, nose_bot, 4)], axis=1)
    base_w = 0.16 * rx
    base = np.stack([cx + base_w * np.linspace(-1, 1, 5), np.full(5, nose_bot)], axis=1)
    nose = np.concatenate([bridge, base])

    mouth_y = cy + 0.55 * ry
    mouth_rx = 0.45 * rx * rng.uniform(0.9, 1.1)
    mouth_ry = 0.16 * ry
    mo_th = np.linspace(np.pi, -np.pi, 12, endpoint=False)
    mi_th = np.linspace(np.pi, -np.pi, 8, endpoint=False)
    mouth_outer = _ellipse_points(cx, mouth_y, mouth_rx, mouth_ry, mo_th)
    mouth_inner = _ellipse_points(cx, mouth_y, 0.55 * mouth_rx, 0.45 * mouth_ry, mi_th)

    pts = np.concatenate(
        [jaw, left_brow, right_brow, nose, left_eye, right_eye, mouth_outer, mouth_inner]
    )
    pts = np.clip(pts, 0.0, s - 1.0)
    kp = KeypointSet(pts)

    # Raster, no AA: boolean region fills.
    # Pixel centers at integer indices, matching the cv2 rasterization frame.
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = bg

    head = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    img[head] = skin

    def fill_ellipse(ecx, ecy, erx, ery, color):
        m = ((xx - ecx) / erx) ** 2 + ((yy - ecy) / ery) ** 2 <= 1.0
        img[m] = color

    fill_ellipse(cx, mouth_y, mouth_rx, mouth_ry, lip)
    fill_ellipse(cx, mouth_y, 0.55 * mouth_rx, 0.45 * mouth_ry, lip * 0.5)
    for ex in (cx - eye_dx, cx + eye_dx):
        fill_ellipse(ex, eye_y, eye_rx, eye_ry, np.array([0.95, 0.95, 0.95]))
        fill_ellipse(ex, eye_y, 0.45 * eye_rx, 0.9 * eye_ry, iris)

    canvas = (np.clip(img, 0, 1) * 255).round().astype(np.uint8)
    for chain in (left_brow, right_brow):
        poly = np.round(chain).astype(np.int32).reshape(-1, 1, 2)
        bgr = tuple(int(round(c * 255)) for c in brow_c[::-1])
        cv2.polylines(canvas, [poly], False, bgr, max(1, size // 48), cv2.LINE_8)
    nose_poly = np.round(nose).astype(np.int32).reshape(-1, 1, 2)
    nose_bgr = tuple(int(round(c * 255)) for c in (skin * 0.8)[::-1])
    cv2.polylines(canvas, [nose_poly], False, nose_bgr, 1, cv2.LINE_8)
    image = canvas[:, :, ::-1].astype(np.float32) / 255.0

    # Analytic mask: head ellipse capped at the brow line. Independent of the
    # polygon-fill route in structure.face_mask_from_keypoints; the 0.3 px
    # growth matches cv2's boundary-inclusive fill convention.
    head_grown = ((xx - cx) / (rx + 0.3)) ** 2 + ((yy - cy) / (ry + 0.3)) ** 2 <= 1.0
    mask = (head_grown & (yy >= brow_y - 0.5)).astype(np.uint8)

    return FaceSample(image, kp, mask, seed)


def region_mask(kp: KeypointSet, label: str, size: int) -> np.ndarray:
    """0/1 mask for a makeup region derived from its landmark group."""
    if label not in kp.groups:
        raise ValueError(f"unknown region label: {label!r}")
    gp = kp.group_points(label)
    mask = np.zeros((size, size), dtype=np.uint8)
    if label == "jaw":
        poly = face_polygon(kp)
        cv2.fillPoly(mask, [np.round(poly).astype(np.int32).reshape(-1, 1, 2)], 1)
    elif label in ("left_eye", "right_eye"):
        # Eyeshadow: eye polygon dilated about its centroid.
        c = gp.mean(axis=0)
        poly = c + (gp - c) * 2.2
        cv2.fillPoly(mask, [np.round(poly).astype(np.int32).reshape(-1, 1, 2)], 1)
    elif label in ("left_brow", "right_brow", "nose"):
        poly = np.round(gp).astype(np.int32).reshape(-1, 1, 2)
        cv2.polylines(mask, [poly], False, 1, max(2, size // 32), cv2.LINE_8)
    else:  # mouth_outer, mouth_inner
        cv2.fillPoly(mask, [np.round(gp).astype(np.int32).reshape(-1, 1, 2)], 1)
    return mask


def _pattern_alpha(mask: np.ndarray, kind: str, rng: np.random.Generator) -> np.ndarray:
    """Per-pixel alpha in [0,1], nonzero only inside ``mask``."""
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    alpha = np.zeros((h, w), dtype=np.float64)
    if len(ys) == 0:
        return alpha
    if kind == "fill":
        alpha[mask > 0] = 1.0
    elif kind == "gradient":
        x0, x1 = xs.min(), xs.max()
        ramp = (np.arange(w) - x0) / max(1, x1 - x0)
        alpha[:] = np.clip(ramp, 0.2, 1.0)[None, :]
        alpha[mask == 0] = 0.0
    elif kind == "stripes":
        period = max(2, (ys.max() - ys.min()) // 3)
        phase = int(rng.integers(period))
        rows = ((np.arange(h) + phase) // max(1, period // 2)) % 2 == 0
        alpha[rows, :] = 1.0
        alpha[mask == 0] = 0.0
    elif kind == "dots":
        step = max(3, (xs.max() - xs.min()) // 4)
        phase = int(rng.integers(step))
        yy, xx = np.mgrid[0:h, 0:w]
        dots = (((yy + phase) % step) <= step // 3) & (((xx + phase) % step) <= step // 3)
        alpha[dots] = 1.0
        alpha[mask == 0] = 0.0
    else:
        raise ValueError(f"unknown pattern kind: {kind!r}")
    return alpha


def apply_makeup(face: FaceSample, style: MakeupStyle, seed: int) -> np.ndarray:
    """Alpha-blend each recipe's pattern over its landmark-derived region.

    Pixels outside the union of recipe regions are returned untouched.
    """
    style.validate()
    size = face.image.shape[0]
    rng = np.random.default_rng(seed)
    out = face.image.astype(np.float64).copy()
    for region, color, pattern, opacity in style.region_recipes:
        if region not in face.keypoints.groups:
            raise ValueError(f"unknown region label: {region!r}")
        rmask = region_mask(face.keypoints, region, size)
        alpha = opacity * _pattern_alpha(rmask, pattern, rng)
        out = out * (1 - alpha[:, :, None]) + np.asarray(color) * alpha[:, :, None]
    return np.clip(out, 0, 1).astype(np.float32)


def composite_non_face(original: np.ndarray, edited: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-pixel select: edited where mask=1, original where mask=0."""
    if original.shape != edited.shape or original.shape[:2] != mask.shape:
        raise ValueError("shape mismatch between images and mask")
    m = (mask > 0)[:, :, None]
    return np.where(m, edited, original)


def make_pair(seed: int, size: int, style: MakeupStyle) -> PairedSample:
    """One face plus its makeup edit, composited so non-face pixels match."""
    face = render_face(seed, size)
    edited = apply_makeup(face, style, seed + 1)
    target = composite_non_face(face.image, edited, face.face_mask)
    return PairedSample(face, target, style)


def _save_png(path: Path, image: np.ndarray):
    arr = (np.clip(image, 0, 1) * 255).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"))
    return arr.astype(np.float32) / 255.0


def load_pair(manifest: DatasetManifest, index: int) -> PairedSample:
    pid, src, tgt, kpp, mp, style_id = manifest.entries[index]
    root = Path(manifest.root)
    kp_obj = json.loads((root / kpp).read_text())
    kp = KeypointSet.from_jsonable(kp_obj["keypoints"])
    mask = (np.asarray(Image.open(root / mp).convert("L")) > 127).astype(np.uint8)
    face = FaceSample(load_png(root / src), kp, mask, int(kp_obj["seed"]))
    style = MakeupStyle.from_jsonable(kp_obj["style"])
    return PairedSample(face, load_png(root / tgt), style)


def build_dataset(n_pairs: int, size: int, seed: int, root) -> DatasetManifest:
    """Write ``n_pairs`` paired samples plus manifest.json under ``root``."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    root = Path(root)
    try:
        (root / "pairs").mkdir(parents=True, exist_ok=True)
        (root / "meta").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IOError(f"cannot create dataset root {root}: {e}") from e

    styles = generate_style_catalog(max(n_pairs, 16), seed)
    entries = []
    for i in range(n_pairs):
        pair_seed = seed * 1_000_003 + i
        style = styles[i % len(styles)]
        pair = make_pair(pair_seed, size, style)
        pid = f"{i:05d}"
        paths = (
            f"pairs/{pid}_src.png",
            f"pairs/{pid}_tgt.png",
            f"meta/{pid}_kp.json",
            f"meta/{pid}_mask.png",
        )
        _save_png(root / paths[0], pair.source.image)
        _save_png(root / paths[1], pair.target_image)
        meta = {
            "seed": pair_seed,
            "keypoints": pair.source.keypoints.to_jsonable(),
            "style": style.to_jsonable(),
        }
        (root / paths[2]).write_text(json.dumps(meta, sort_keys=True))
        Image.fromarray(pair.source.face_mask * 255).save(root / paths[3])
        entries.append((pid, *paths, style.style_id))

    manifest = DatasetManifest(root, entries, seed)
    (root / "manifest.json").write_text(json.dumps(manifest.to_jsonable(), sort_keys=True))
    return manifest
