"""Synthetic planar scenes, random geometric transforms and labeled view pairs.

Conventions: images are float arrays (H, W, 3) in [0, 1]; pixel (row v, column
u) has its center at xy = (u, v); homographies map view-a xy to view-b xy.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .geometry import (
    SingularHomographyError,
    apply_homography,
    check_invertible,
    compose,
    four_point_homography,
    has_collinear_triple,
    is_convex_quad,
    normalize_homography,
    translation,
)

GENERATOR_VERSION = "1.0"

# Primitive kinds in the order used for class assignment; background is class 0.
KINDS = ("quad", "triangle", "stripe", "checker", "dynamic")


def kind_class(kind: str, num_classes: int) -> int:
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    return 1 + KINDS.index(kind) % (num_classes - 1)


def dynamic_class(num_classes: int) -> int:
    return kind_class("dynamic", num_classes)


@dataclass
class TransformRanges:
    max_rotation_deg: float = 30.0
    max_translation_px: float = 15.0
    scale_range: tuple[float, float] = (0.8, 1.2)
    # Max corner displacement as a fraction of the image side; 0 disables it.
    perspective_jitter: float = 0.1
    max_retries: int = 50

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ValueError(f"invalid scale_range {self.scale_range}")
        if self.max_rotation_deg < 0 or self.max_translation_px < 0 or self.perspective_jitter < 0:
            raise ValueError("transform ranges must be non-negative")


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 6
    min_shapes: int = 4
    max_shapes: int = 8
    dynamic_prob: float = 0.15
    # Extra random offset (pixels) applied to dynamic objects in view b only.
    dynamic_displacement_px: float = 0.0
    photometric_jitter: bool = False
    # Uniform background by default; a linear colour ramp when set.
    background_gradient: bool = False


@dataclass
class SynthConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    transform: TransformRanges = field(default_factory=TransformRanges)


@dataclass
class TransformSpec:
    rotation_deg: float = 0.0
    translation_px: tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0
    # (4, 2) corner offsets as fractions of the image side, order TL, TR, BR, BL.
    perspective_jitter: np.ndarray | None = None

    def __post_init__(self):
        if not -30.0 <= self.rotation_deg <= 30.0:
            raise ValueError(f"rotation {self.rotation_deg} outside [-30, 30]")
        if not all(-15.0 <= t <= 15.0 for t in self.translation_px):
            raise ValueError(f"translation {self.translation_px} outside [-15, 15]^2")
        if not 0.8 <= self.scale <= 1.2:
            raise ValueError(f"scale {self.scale} outside [0.8, 1.2]")


@dataclass
class GroundTruthMaps:
    keypoint_map: np.ndarray  # (H, W) uint8 in {0, 1}
    labels: np.ndarray  # (H, W) int class index
    num_classes: int

    @property
    def seg_onehot(self) -> np.ndarray:
        return np.eye(self.num_classes, dtype=np.uint8)[self.labels]


@dataclass
class Primitive:
    kind: str
    class_id: int
    # Convex polygons painted in order; the first one is the outline.
    polygons: list[tuple[np.ndarray, tuple[float, float, float]]]
    keypoints: np.ndarray  # (m, 2) xy

    @property
    def outline(self) -> np.ndarray:
        return self.polygons[0][0]

    def transformed(self, H: np.ndarray, offset=(0.0, 0.0)) -> "Primitive":
        off = np.asarray(offset, float)
        polys = [(apply_homography(H, p) + off, c) for p, c in self.polygons]
        return Primitive(self.kind, self.class_id, polys, apply_homography(H, self.keypoints) + off)


@dataclass
class Scene:
    image: np.ndarray
    gt: GroundTruthMaps
    primitives: list[Primitive]
    background: np.ndarray  # (H, W, 3) background layer
    seed: int


@dataclass
class LabeledSample:
    image_a: np.ndarray
    image_b: np.ndarray
    homography: np.ndarray
    gt_a: GroundTruthMaps
    gt_b: GroundTruthMaps
    valid_mask: np.ndarray  # (H, W) bool, pixels of b whose source lies in a
    seed: int = 0


# ---------------------------------------------------------------- transforms


def sample_transform(ranges: TransformRanges, seed, shape=(64, 64)) -> TransformSpec:
    """Draw a random transform; degenerate perspective jitters are redrawn."""
    rng = np.random.default_rng(seed)
    rot = rng.uniform(-ranges.max_rotation_deg, ranges.max_rotation_deg)
    t = tuple(rng.uniform(-ranges.max_translation_px, ranges.max_translation_px, size=2))
    s = rng.uniform(*ranges.scale_range)
    jitter = None
    if ranges.perspective_jitter > 0:
        h, w = shape
        corners = _corners(h, w)
        for _ in range(ranges.max_retries):
            cand = rng.uniform(-ranges.perspective_jitter, ranges.perspective_jitter, size=(4, 2))
            moved = corners + cand * np.array([w, h])
            if is_convex_quad(moved) and not has_collinear_triple(moved):
                jitter = cand
                break
        else:
            raise SingularHomographyError("could not draw a non-degenerate perspective jitter")
    return TransformSpec(float(rot), (float(t[0]), float(t[1])), float(s), jitter)


def _corners(h: int, w: int) -> np.ndarray:
    return np.array([[0.0, 0.0], [w - 1.0, 0.0], [w - 1.0, h - 1.0], [0.0, h - 1.0]])


def transform_homography(spec: TransformSpec, shape=(64, 64)) -> np.ndarray:
    """Scale and rotate about the image center, translate, then apply corner jitter."""
    h, w = shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    th = math.radians(spec.rotation_deg)
    c, s = math.cos(th), math.sin(th)
    sr = np.array([[spec.scale * c, -spec.scale * s, 0.0], [spec.scale * s, spec.scale * c, 0.0], [0, 0, 1.0]])
    tx, ty = spec.translation_px
    H = compose(translation(-cx, -cy), sr, translation(cx + tx, cy + ty))
    if spec.perspective_jitter is not None:
        corners = _corners(h, w)
        moved = corners + np.asarray(spec.perspective_jitter) * np.array([w, h])
        H = compose(H, four_point_homography(corners, moved))
    check_invertible(H)
    return normalize_homography(H)


# ---------------------------------------------------------------- warping


def _pixel_grid(h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)


def _source_coords(H: np.ndarray, h: int, w: int):
    check_invertible(H)
    src = apply_homography(np.linalg.inv(H), _pixel_grid(h, w))
    eps = 1e-9
    inside = (
        np.isfinite(src).all(axis=1)
        & (src[:, 0] >= -eps) & (src[:, 0] <= w - 1 + eps)
        & (src[:, 1] >= -eps) & (src[:, 1] <= h - 1 + eps)
    )
    return src, inside


def warp_image(image: np.ndarray, H: np.ndarray, src_mask: np.ndarray | None = None):
    """Inverse-warp with bilinear sampling. Returns (warped, valid_mask).

    With src_mask, a pixel is valid only if all four bilinear taps are valid
    in the source.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    src, valid = _source_coords(H, h, w)
    x = np.clip(np.where(valid, src[:, 0], 0.0), 0, w - 1)
    y = np.clip(np.where(valid, src[:, 1], 0.0), 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(int), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(int), max(h - 2, 0))
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    fx, fy = (x - x0)[:, None], (y - y0)[:, None]
    flat = image.reshape(h, w, -1)
    out = (
        flat[y0, x0] * (1 - fx) * (1 - fy)
        + flat[y0, x1] * fx * (1 - fy)
        + flat[y1, x0] * (1 - fx) * fy
        + flat[y1, x1] * fx * fy
    )
    if src_mask is not None:
        m = np.asarray(src_mask, bool)
        valid &= m[y0, x0] & m[y0, x1] & m[y1, x0] & m[y1, x1]
    out[~valid] = 0.0
    return out.reshape(image.shape), valid.reshape(h, w)


def warp_labels(labels: np.ndarray, H: np.ndarray, fill: int = 0):
    """Nearest-neighbor warp of an integer label map. Returns (warped, valid_mask)."""
    h, w = labels.shape
    src, valid = _source_coords(H, h, w)
    xi = np.clip(np.rint(np.where(valid, src[:, 0], 0)).astype(int), 0, w - 1)
    yi = np.clip(np.rint(np.where(valid, src[:, 1], 0)).astype(int), 0, h - 1)
    out = labels[yi, xi].copy()
    out[~valid] = fill
    return out.reshape(h, w), valid.reshape(h, w)


def warp_keypoint_map(kp_map: np.ndarray, H: np.ndarray, valid_mask: np.ndarray) -> np.ndarray:
    """Forward-map keypoint pixels, snap to the nearest pixel, OR collisions."""
    h, w = kp_map.shape
    ys, xs = np.nonzero(kp_map)
    out = np.zeros_like(kp_map, dtype=np.uint8)
    if len(xs) == 0:
        return out
    dst = np.rint(apply_homography(H, np.stack([xs, ys], axis=1)))
    ok = np.isfinite(dst).all(axis=1)
    dst = dst[ok]
    inb = (dst[:, 0] >= 0) & (dst[:, 0] <= w - 1) & (dst[:, 1] >= 0) & (dst[:, 1] <= h - 1)
    dst = dst[inb].astype(int)
    dst = dst[valid_mask[dst[:, 1], dst[:, 0]]]
    out[dst[:, 1], dst[:, 0]] = 1
    return out


# ---------------------------------------------------------------- rendering


def _ccw(poly: np.ndarray) -> np.ndarray:
    poly = np.asarray(poly, float)
    x, y = poly[:, 0], poly[:, 1]
    area = 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
    return poly if area >= 0 else poly[::-1]


def points_in_convex(poly: np.ndarray, pts: np.ndarray, margin: float = 0.0) -> np.ndarray:
    """Points within `margin` pixels of the interior of a convex polygon."""
    poly = _ccw(poly)
    pts = np.asarray(pts, float).reshape(-1, 2)
    inside = np.ones(len(pts), dtype=bool)
    for a, b in zip(poly, np.roll(poly, -1, axis=0)):
        e = b - a
        n = math.hypot(e[0], e[1])
        if n < 1e-12:
            continue
        d = (e[0] * (pts[:, 1] - a[1]) - e[1] * (pts[:, 0] - a[0])) / n
        inside &= d >= -margin
    return inside


def render_primitives(
    primitives: list[Primitive],
    background: np.ndarray,
    num_classes: int,
    canvas: np.ndarray | None = None,
    labels: np.ndarray | None = None,
    kp_margin: float = 1.5,
):
    """Paint primitives in order. Returns (image, labels, keypoint_map).

    A primitive keypoint is kept when it lies at least one pixel inside the
    image and is not covered by any later primitive.
    """
    h, w = background.shape[:2]
    img = background.copy() if canvas is None else canvas.copy()
    lab = np.zeros((h, w), dtype=np.int64) if labels is None else labels.copy()
    grid = _pixel_grid(h, w)
    for prim in primitives:
        if prim.class_id >= num_classes:
            raise ValueError(f"class {prim.class_id} >= num_classes {num_classes}")
        for k, (poly, color) in enumerate(prim.polygons):
            m = points_in_convex(poly, grid).reshape(h, w)
            img[m] = color
            if k == 0:
                lab[m] = prim.class_id
    kp = np.zeros((h, w), dtype=np.uint8)
    for i, prim in enumerate(primitives):
        pts = prim.keypoints
        keep = np.ones(len(pts), dtype=bool)
        for later in primitives[i + 1:]:
            keep &= ~points_in_convex(later.outline, pts, margin=kp_margin)
        r = np.rint(pts[keep])
        inb = (r[:, 0] >= 1) & (r[:, 0] <= w - 2) & (r[:, 1] >= 1) & (r[:, 1] <= h - 2)
        r = r[inb].astype(int)
        kp[r[:, 1], r[:, 0]] = 1
    return img, lab, kp


def _rect(cx, cy, hw, hh, ang) -> np.ndarray:
    c, s = math.cos(ang), math.sin(ang)
    local = np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]])
    R = np.array([[c, -s], [s, c]])
    return local @ R.T + np.array([cx, cy])


def rectangle(x0, y0, x1, y1, color, num_classes=6, kind="quad") -> Primitive:
    """Axis-aligned rectangle primitive with corners at (x0, y0) and (x1, y1)."""
    poly = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float)
    return Primitive(kind, kind_class(kind, num_classes), [(poly, tuple(color))], poly.copy())


def _color(rng, avoid, min_diff=0.3):
    for _ in range(30):
        c = rng.uniform(0.0, 1.0, size=3)
        if all(np.abs(c - a).mean() >= min_diff for a in avoid):
            return tuple(c)
    return tuple(c)


def _make_primitive(kind, rng, cx, cy, size, bg_color, num_classes) -> Primitive:
    cls = kind_class(kind, num_classes)
    ang = rng.uniform(0, math.pi)
    col = _color(rng, [bg_color])
    if kind == "quad":
        poly = _rect(cx, cy, size * rng.uniform(0.5, 1.0), size * rng.uniform(0.4, 0.8), ang)
        if rng.random() < 0.5:
            for _ in range(10):
                cand = poly + rng.uniform(-0.25, 0.25, size=(4, 2)) * size
                if is_convex_quad(cand) and not has_collinear_triple(cand):
                    poly = cand
                    break
        return Primitive(kind, cls, [(poly, col)], poly.copy())
    if kind == "triangle":
        a0 = rng.uniform(0, 2 * math.pi)
        a1 = a0 + rng.uniform(1.7, 2.4)
        a2 = a1 + rng.uniform(1.7, 2.4)
        poly = np.array([[cx + size * math.cos(a), cy + size * math.sin(a)] for a in (a0, a1, a2)])
        return Primitive(kind, cls, [(poly, col)], poly.copy())
    if kind == "stripe":
        poly = _rect(cx, cy, size, rng.uniform(1.4, 2.2), ang)
        return Primitive(kind, cls, [(poly, col)], poly.copy())
    if kind == "checker":
        k = int(rng.integers(2, 4))
        half = size * 0.75
        col2 = _color(rng, [bg_color, col])
        c, s = math.cos(ang), math.sin(ang)
        R = np.array([[c, -s], [s, c]])
        step = 2 * half / k
        polys = [(_rect(cx, cy, half, half, ang), col)]
        for i in range(k):
            for j in range(k):
                if (i + j) % 2:
                    lc = np.array([-half + (i + 0.5) * step, -half + (j + 0.5) * step]) @ R.T
                    polys.append((_rect(cx + lc[0], cy + lc[1], step / 2, step / 2, ang), col2))
        g = np.linspace(-half, half, k + 1)
        gx, gy = np.meshgrid(g, g)
        kps = np.stack([gx.ravel(), gy.ravel()], axis=1) @ R.T + np.array([cx, cy])
        return Primitive(kind, cls, polys, kps)
    if kind == "dynamic":
        hw, hh = size * 0.85, size * 0.5
        body = _rect(cx, cy, hw, hh, ang)
        c, s = math.cos(ang), math.sin(ang)
        off = np.array([hw * 0.45 * c, hw * 0.45 * s])
        window = _rect(cx + off[0], cy + off[1], hw * 0.25, hh * 0.6, ang)
        dark = _color(rng, [col], min_diff=0.35)
        return Primitive(kind, cls, [(body, col), (window, dark)], np.concatenate([body, window]))
    raise ValueError(f"unknown primitive kind {kind!r}")


def _background(rng, h, w, gradient: bool = False) -> np.ndarray:
    c0 = rng.uniform(0.3, 0.7) + rng.uniform(-0.05, 0.05, size=3)
    c1 = rng.uniform(0.3, 0.7) + rng.uniform(-0.05, 0.05, size=3)
    ang = rng.uniform(0, 2 * math.pi)
    if not gradient:
        return np.broadcast_to(np.clip(c0, 0.0, 1.0), (h, w, 3)).copy()
    ys, xs = np.mgrid[0:h, 0:w]
    t = (xs * math.cos(ang) + ys * math.sin(ang)).astype(float)
    t = (t - t.min()) / max(np.ptp(t), 1e-9)
    return np.clip(c0 + (c1 - c0) * t[..., None], 0.0, 1.0)


_SIZE = {"quad": (6, 12), "triangle": (7, 12), "stripe": (7, 13), "checker": (7, 11), "dynamic": (8, 11)}


def render_scene(seed, shape_count: int | None = None, config: SceneConfig | None = None) -> Scene:
    cfg = config or SceneConfig()
    rng = np.random.default_rng(seed)
    h, w = cfg.height, cfg.width
    bg = _background(rng, h, w, cfg.background_gradient)
    bg_color = bg.mean(axis=(0, 1))
    if shape_count is None:
        shape_count = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    static_kinds = KINDS[:-1]
    prims: list[Primitive] = []
    placed: list[tuple[float, float, float]] = []
    for _ in range(shape_count):
        kind = "dynamic" if rng.random() < cfg.dynamic_prob else static_kinds[rng.integers(len(static_kinds))]
        size = rng.uniform(*_SIZE[kind])
        for _attempt in range(30):
            cx = rng.uniform(size * 0.6, w - 1 - size * 0.6)
            cy = rng.uniform(size * 0.6, h - 1 - size * 0.6)
            if all(math.hypot(cx - px, cy - py) > 0.8 * (size + pr) for px, py, pr in placed):
                break
        else:
            continue
        placed.append((cx, cy, size))
        prims.append(_make_primitive(kind, rng, cx, cy, size, bg_color, cfg.num_classes))
    # Dynamic objects sit on top of the static layer.
    prims.sort(key=lambda p: p.kind == "dynamic")
    img, lab, kp = render_primitives(prims, bg, cfg.num_classes)
    return Scene(img, GroundTruthMaps(kp, lab, cfg.num_classes), prims, bg, int(_seed_int(seed)))


def generate_scene(seed, shape_count: int | None = None, num_classes: int = 6, config: SceneConfig | None = None):
    """Render one random scene. Returns (image, GroundTruthMaps)."""
    cfg = config or SceneConfig()
    if num_classes != cfg.num_classes:
        cfg = SceneConfig(**{**asdict(cfg), "num_classes": num_classes})
    scene = render_scene(seed, shape_count, cfg)
    return scene.image, scene.gt


def _seed_int(seed) -> int:
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    return int(np.random.SeedSequence(seed).generate_state(1)[0])


# ---------------------------------------------------------------- keypoints from images


@dataclass
class KeypointDetectorConfig:
    edge_threshold: float = 0.05
    harris_k: float = 0.05
    harris_sigma: float = 1.0
    harris_threshold: float = 1e-5
    nms_size: int = 5


def derive_keypoints_from_image(image: np.ndarray, cfg: KeypointDetectorConfig | None = None) -> np.ndarray:
    """Binary keypoint map: Sobel edges intersected with Harris corners, NMS-thinned."""
    cfg = cfg or KeypointDetectorConfig()
    gray = np.asarray(image, float).mean(axis=2) if np.ndim(image) == 3 else np.asarray(image, float)
    ix = ndimage.sobel(gray, axis=1, mode="nearest") / 8.0
    iy = ndimage.sobel(gray, axis=0, mode="nearest") / 8.0
    edges = ndimage.binary_dilation(np.hypot(ix, iy) > cfg.edge_threshold, iterations=1)
    sxx = ndimage.gaussian_filter(ix * ix, cfg.harris_sigma)
    syy = ndimage.gaussian_filter(iy * iy, cfg.harris_sigma)
    sxy = ndimage.gaussian_filter(ix * iy, cfg.harris_sigma)
    resp = sxx * syy - sxy * sxy - cfg.harris_k * (sxx + syy) ** 2
    local_max = resp == ndimage.maximum_filter(resp, size=cfg.nms_size, mode="constant", cval=-np.inf)
    return (edges & local_max & (resp > cfg.harris_threshold)).astype(np.uint8)


# ---------------------------------------------------------------- pairs


def _photometric(img, rng):
    gain = rng.uniform(0.8, 1.2)
    bias = rng.uniform(-0.1, 0.1)
    return np.clip((img - 0.5) * gain + 0.5 + bias, 0.0, 1.0)


def build_pair(
    scene: Scene,
    seed,
    ranges: TransformRanges | None = None,
    dynamic_displacement_px: float = 0.0,
    photometric_jitter: bool = False,
    homography: np.ndarray | None = None,
) -> LabeledSample:
    """Warp a scene into a second view with exact ground truth.

    With dynamic_displacement_px > 0, dynamic primitives are redrawn in view b
    with an extra random offset, so their correspondences violate the
    homography on purpose.
    """
    ranges = ranges or TransformRanges()
    rng = np.random.default_rng(seed)
    h, w = scene.image.shape[:2]
    C = scene.gt.num_classes
    if homography is None:
        # Child seed keeps the transform stream independent of the other draws.
        H = transform_homography(sample_transform(ranges, rng.integers(2**63), (h, w)), (h, w))
    else:
        H = normalize_homography(homography)
    dyn = [p for p in scene.primitives if p.kind == "dynamic"]
    if dynamic_displacement_px > 0 and dyn:
        static = [p for p in scene.primitives if p.kind != "dynamic"]
        img_s, lab_s, kp_s = render_primitives(static, scene.background, C)
        # Static keypoints visible in view a.
        kp_s = kp_s & scene.gt.keypoint_map
        img_b, valid = warp_image(img_s, H)
        lab_b, _ = warp_labels(lab_s, H)
        moved = []
        for p in dyn:
            ang = rng.uniform(0, 2 * math.pi)
            r = rng.uniform(0.5, 1.0) * dynamic_displacement_px
            moved.append(p.transformed(H, (r * math.cos(ang), r * math.sin(ang))))
        kp_static_b = warp_keypoint_map(kp_s, H, valid)
        static_pts = np.argwhere(kp_static_b)[:, ::-1].astype(float)
        img_b, lab_b, kp_dyn = render_primitives(moved, scene.background, C, canvas=img_b, labels=lab_b)
        keep = np.ones(len(static_pts), dtype=bool)
        for p in moved:
            keep &= ~points_in_convex(p.outline, static_pts, margin=1.5)
        kp_b = kp_dyn.copy()
        sp = static_pts[keep].astype(int)
        kp_b[sp[:, 1], sp[:, 0]] = 1
        kp_b = kp_b & valid
    else:
        img_b, valid = warp_image(scene.image, H)
        lab_b, _ = warp_labels(scene.gt.labels, H)
        kp_b = warp_keypoint_map(scene.gt.keypoint_map, H, valid)
    if photometric_jitter:
        img_b = _photometric(img_b, rng) * valid[..., None]
    return LabeledSample(
        image_a=scene.image,
        image_b=img_b,
        homography=H,
        gt_a=scene.gt,
        gt_b=GroundTruthMaps(kp_b.astype(np.uint8), lab_b, C),
        valid_mask=valid,
        seed=_seed_int(seed),
    )


def sample_seeds(master_seed: int, count: int) -> list[int]:
    return [int(np.random.SeedSequence([master_seed, i]).generate_state(1)[0]) for i in range(count)]


def make_samples(count: int, master_seed: int, config: SynthConfig | None = None) -> list[LabeledSample]:
    cfg = config or SynthConfig()
    out = []
    for s in sample_seeds(master_seed, count):
        scene = render_scene(s, None, cfg.scene)
        out.append(
            build_pair(
                scene,
                s + 1,
                cfg.transform,
                dynamic_displacement_px=cfg.scene.dynamic_displacement_px,
                photometric_jitter=cfg.scene.photometric_jitter,
            )
        )
    return out


# ---------------------------------------------------------------- corpus on disk


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_corpus(out_dir, samples: list[LabeledSample], master_seed: int, config: SynthConfig) -> dict:
    out = Path(out_dir)
    for sub in ("images", "labels", "keypoints"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for i, s in enumerate(samples):
        rec = {"id": f"{i:06d}", "seed": int(s.seed), "homography": [float(v) for v in s.homography.ravel()]}
        for view, img, gt in (("a", s.image_a, s.gt_a), ("b", s.image_b, s.gt_b)):
            name = f"{i:06d}_{view}.png"
            PILImage.fromarray(_to_u8(img), mode="RGB").save(out / "images" / name)
            PILImage.fromarray(gt.labels.astype(np.uint8), mode="L").save(out / "labels" / name)
            PILImage.fromarray((gt.keypoint_map > 0).astype(np.uint8) * 255, mode="L").save(out / "keypoints" / name)
            rec[f"image_{view}"] = f"images/{name}"
            rec[f"label_{view}"] = f"labels/{name}"
            rec[f"keypoints_{view}"] = f"keypoints/{name}"
        records.append(rec)
    with open(out / "pairs.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "generator_version": GENERATOR_VERSION,
        "master_seed": int(master_seed),
        "count": len(samples),
        "num_classes": config.scene.num_classes,
        "dynamic_class": dynamic_class(config.scene.num_classes),
        "config": _jsonable(asdict(config)),
        "files": {str(p.relative_to(out)): _sha256(p) for p in files},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


def generate_corpus(out_dir, count: int, master_seed: int, config: SynthConfig | None = None) -> dict:
    cfg = config or SynthConfig()
    return write_corpus(out_dir, make_samples(count, master_seed, cfg), master_seed, cfg)


def load_corpus(corpus_dir) -> list[LabeledSample]:
    root = Path(corpus_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no corpus manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    C = int(manifest["num_classes"])
    samples = []
    pairs = root / "pairs.jsonl"
    lines = pairs.read_text().splitlines() if pairs.exists() else []
    for line in lines:
        if not line.strip():
            continue
        rec = json.loads(line)
        H = np.array(rec["homography"], dtype=np.float64).reshape(3, 3)
        views = {}
        for v in ("a", "b"):
            img = np.asarray(PILImage.open(root / rec[f"image_{v}"]).convert("RGB"), dtype=np.float64) / 255.0
            lab = np.asarray(PILImage.open(root / rec[f"label_{v}"]), dtype=np.int64)
            kp = (np.asarray(PILImage.open(root / rec[f"keypoints_{v}"])) > 0).astype(np.uint8)
            views[v] = (img, GroundTruthMaps(kp, lab, C))
        h, w = views["a"][0].shape[:2]
        _, valid = _source_coords(H, h, w)
        samples.append(
            LabeledSample(views["a"][0], views["b"][0], H, views["a"][1], views["b"][1], valid.reshape(h, w), rec["seed"])
        )
    return samples
