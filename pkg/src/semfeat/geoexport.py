"""COLMAP text import files, semantic PLY point clouds, trajectory alignment and RMSE."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

COLMAP_DESC_DIM = 128


# ---------------------------------------------------------------- COLMAP text import


def descriptors_to_uint8(desc: np.ndarray, dim: int = COLMAP_DESC_DIM) -> np.ndarray:
    """Map unit-float descriptors from [-1, 1] to [0, 255], padded or truncated to `dim`.

    uint8 input is taken as already quantized and only padded or truncated.
    """
    quantized = np.asarray(desc).dtype == np.uint8
    desc = np.asarray(desc, dtype=np.float64).reshape(len(desc), -1)
    out = np.full((len(desc), dim), 128, dtype=np.uint8)
    k = min(dim, desc.shape[1])
    if quantized:
        out[:, :k] = desc[:, :k].astype(np.uint8)
        return out
    out[:, :k] = np.clip(np.rint((desc[:, :k] + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return out


def write_colmap_features(path, xy: np.ndarray, descriptors: np.ndarray, scale: float = 1.0, orientation: float = 0.0):
    """One feature file: "N 128" header, then `x y scale orientation d1 .. d128` per row.

    xy are pixel-center coordinates (first pixel center at 0, 0); COLMAP puts
    the first pixel center at (0.5, 0.5), so +0.5 is added on write.
    """
    xy = np.asarray(xy, dtype=np.float32).reshape(-1, 2).astype(np.float64) + 0.5
    d8 = descriptors_to_uint8(descriptors) if len(xy) else np.zeros((0, COLMAP_DESC_DIM), np.uint8)
    lines = [f"{len(xy)} {COLMAP_DESC_DIM}"]
    for (x, y), d in zip(xy, d8):
        lines.append(f"{float(x)!r} {float(y)!r} {float(scale)!r} {float(orientation)!r} " + " ".join(map(str, d.tolist())))
    Path(path).write_text("\n".join(lines) + "\n")


def read_colmap_features(path) -> tuple[np.ndarray, np.ndarray]:
    """Returns (xy in pixel-center convention, uint8 descriptors)."""
    lines = Path(path).read_text().splitlines()
    n, dim = map(int, lines[0].split())
    xy = np.zeros((n, 2))
    desc = np.zeros((n, dim), dtype=np.uint8)
    for i, line in enumerate(lines[1:1 + n]):
        parts = line.split()
        xy[i] = float(parts[0]) - 0.5, float(parts[1]) - 0.5
        desc[i] = np.array(parts[4:4 + dim], dtype=np.int64)
    return xy, desc


def write_colmap_matches(path, pairs: list[tuple[str, str, np.ndarray]]):
    """Blocks of `name_a name_b` followed by zero-based index pairs, separated by blank lines."""
    blocks = []
    for name_a, name_b, idx in pairs:
        idx = np.asarray(idx, dtype=np.int64).reshape(-1, 2)
        blocks.append("\n".join([f"{name_a} {name_b}"] + [f"{a} {b}" for a, b in idx]))
    Path(path).write_text("\n\n".join(blocks) + ("\n" if blocks else ""))


def read_colmap_matches(path) -> list[tuple[str, str, np.ndarray]]:
    text = Path(path).read_text()
    out = []
    for block in text.strip().split("\n\n"):
        lines = [l for l in block.splitlines() if l.strip()]
        if not lines:
            continue
        a, b = lines[0].split()
        idx = np.array([list(map(int, l.split())) for l in lines[1:]], dtype=np.int64).reshape(-1, 2)
        out.append((a, b, idx))
    return out


def export_colmap(out_dir, features: dict[str, tuple[np.ndarray, np.ndarray]], matches: list[tuple[str, str, np.ndarray]]) -> dict:
    """Write `<image>.txt` per image plus `matches.txt` and a conversion manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dims = set()
    for name, (xy, desc) in features.items():
        write_colmap_features(out / f"{name}.txt", xy, desc)
        dims.add(int(np.asarray(desc).reshape(len(xy), -1).shape[1]) if len(xy) else None)
    write_colmap_matches(out / "matches.txt", matches)
    manifest = {
        "images": sorted(features),
        "match_pairs": len(matches),
        "descriptor_conversion": {
            "source_dims": sorted(d for d in dims if d is not None),
            "target_dim": COLMAP_DESC_DIM,
            "mapping": "uint8 = round((d + 1) * 127.5); missing dims padded with 128, extra dims truncated",
        },
    }
    (out / "export_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


# ---------------------------------------------------------------- semantic point cloud


def class_palette(num_classes: int) -> np.ndarray:
    """Fixed injective class -> RGB table."""
    if num_classes > 256:
        raise ValueError("at most 256 classes fit the uchar class_id property")
    base = np.array(
        [
            [128, 128, 128], [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
            [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60],
            [250, 190, 212], [0, 128, 128], [220, 190, 255], [170, 110, 40], [255, 250, 200],
            [128, 0, 0], [170, 255, 195], [128, 128, 0], [255, 215, 180], [0, 0, 128],
        ],
        dtype=np.uint8,
    )
    if num_classes <= len(base):
        return base[:num_classes].copy()
    extra = []
    seen = {tuple(c) for c in base}
    rng = np.random.default_rng(20)
    while len(base) + len(extra) < num_classes:
        c = tuple(int(v) for v in rng.integers(0, 256, 3))
        if c not in seen:
            seen.add(c)
            extra.append(c)
    return np.concatenate([base, np.array(extra, dtype=np.uint8)])


@dataclass
class SemanticPointCloud:
    xyz: np.ndarray  # (n, 3) float32 meters
    class_id: np.ndarray  # (n,) uint8
    rgb: np.ndarray  # (n, 3) uint8


_PLY_DTYPE = np.dtype(
    [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1"), ("class_id", "u1")]
)


def colorize_cloud(xyz, class_ids, num_classes: int, path=None) -> SemanticPointCloud:
    class_ids = np.asarray(class_ids, dtype=np.int64).ravel()
    if class_ids.size and (class_ids.min() < 0 or class_ids.max() >= num_classes):
        raise ValueError(f"class ids must lie in [0, {num_classes}), got range [{class_ids.min()}, {class_ids.max()}]")
    cloud = SemanticPointCloud(
        np.asarray(xyz, dtype=np.float32).reshape(-1, 3), class_ids.astype(np.uint8), class_palette(num_classes)[class_ids]
    )
    if path is not None:
        write_ply(path, cloud)
    return cloud


def write_ply(path, cloud: SemanticPointCloud):
    rec = np.empty(len(cloud.xyz), dtype=_PLY_DTYPE)
    rec["x"], rec["y"], rec["z"] = cloud.xyz[:, 0], cloud.xyz[:, 1], cloud.xyz[:, 2]
    rec["red"], rec["green"], rec["blue"] = cloud.rgb[:, 0], cloud.rgb[:, 1], cloud.rgb[:, 2]
    rec["class_id"] = cloud.class_id
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(rec)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "property uchar class_id\nend_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rec.tobytes())


def read_ply(path) -> SemanticPointCloud:
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise ValueError(f"{path}: only binary_little_endian PLY is supported")
    n = next(int(l.split()[2]) for l in header if l.startswith("element vertex"))
    rec = np.frombuffer(data[end:end + n * _PLY_DTYPE.itemsize], dtype=_PLY_DTYPE)
    xyz = np.stack([rec["x"], rec["y"], rec["z"]], axis=1)
    rgb = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1)
    return SemanticPointCloud(xyz, rec["class_id"].copy(), rgb)


# ---------------------------------------------------------------- trajectories


@dataclass
class Trajectory:
    positions: np.ndarray  # (n, 3) meters
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if len(self.positions) < 1:
            raise ValueError("trajectory needs at least one position")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("trajectory has non-finite coordinates")

    def __len__(self):
        return len(self.positions)


@dataclass
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(pts, float) @ self.rotation.T + self.translation

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))


def align_trajectories(estimated: Trajectory, reference: Trajectory, with_scale: bool = True) -> SimilarityTransform:
    """Closed-form least-squares alignment (Umeyama) of estimated onto reference.

    Minimizes sum ||s R p_i + t - q_i||^2 with correspondence by index;
    `with_scale=False` fixes s = 1.
    """
    P, Q = estimated.positions, reference.positions
    if len(P) != len(Q):
        raise ValueError(f"trajectory lengths differ: {len(P)} vs {len(Q)}")
    if len(P) < 3:
        raise ValueError("alignment needs at least 3 corresponding positions")
    mu_p, mu_q = P.mean(axis=0), Q.mean(axis=0)
    Pc, Qc = P - mu_p, Q - mu_q
    cov = Qc.T @ Pc / len(P)
    U, D, Vt = np.linalg.svd(cov)
    if D[1] <= 1e-12 * max(D[0], 1e-300):
        warnings.warn("degenerate (collinear) trajectory: rotation about the line is unconstrained", RuntimeWarning)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_p = (Pc**2).sum() / len(P)
    s = float(np.trace(np.diag(D) @ S) / var_p) if with_scale and var_p > 0 else 1.0
    t = mu_q - s * R @ mu_p
    return SimilarityTransform(s, R, t)


def trajectory_rmse(estimated: Trajectory, reference: Trajectory, transform: SimilarityTransform | None = None) -> float:
    if len(estimated) != len(reference):
        raise ValueError(f"trajectory lengths differ: {len(estimated)} vs {len(reference)}")
    T = transform or SimilarityTransform.identity()
    r = T.apply(estimated.positions) - reference.positions
    return float(np.sqrt(np.mean(np.sum(r**2, axis=1))))


def read_trajectory_csv(path) -> Trajectory:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        if not {"x", "y", "z"} <= set(fields):
            raise ValueError(f"{path}: header must contain x,y,z (got {fields})")
        rows = list(reader)
    pos = np.array([[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows]).reshape(-1, 3)
    ts = np.array([float(r["t"]) for r in rows]) if "t" in fields else None
    return Trajectory(pos, ts)


def write_trajectory_csv(path, traj: Trajectory):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        has_t = traj.timestamps is not None
        w.writerow(["x", "y", "z", "t"] if has_t else ["x", "y", "z"])
        for i, p in enumerate(traj.positions):
            row = [repr(float(v)) for v in p]
            if has_t:
                row.append(repr(float(traj.timestamps[i])))
            w.writerow(row)
