"""Small planar-geometry helpers shared by the data generator and the matcher."""

from __future__ import annotations

import numpy as np


class SingularHomographyError(ValueError):
    pass


def normalize_homography(H: np.ndarray) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if H.shape != (3, 3):
        raise ValueError(f"homography must be 3x3, got {H.shape}")
    if abs(H[2, 2]) < 1e-12:
        raise SingularHomographyError("homography has H[2,2] == 0, cannot normalize")
    return H / H[2, 2]


def check_invertible(H: np.ndarray, tol: float = 1e-10) -> None:
    det = np.linalg.det(H)
    if not np.isfinite(det) or abs(det) <= tol:
        raise SingularHomographyError(f"homography is singular (det={det:.3g})")


def apply_homography(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Map (n, 2) xy points through H. Points landing at infinity come back as inf."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    ph = pts @ H[:, :2].T + H[:, 2]
    w = ph[:, 2:3]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ph[:, :2] / w
    out[~np.isfinite(out).all(axis=1)] = np.inf
    return out


def compose(*Hs: np.ndarray) -> np.ndarray:
    """compose(H1, H2, ...) applies H1 first, then H2, and so on."""
    out = np.eye(3)
    for H in Hs:
        out = np.asarray(H, dtype=np.float64) @ out
    return normalize_homography(out)


def translation(tx: float, ty: float) -> np.ndarray:
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def four_point_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Exact homography from four point correspondences (unnormalized DLT)."""
    A = _dlt_system(np.asarray(src, float), np.asarray(dst, float))
    _, _, Vt = np.linalg.svd(A)
    return normalize_homography(Vt[-1].reshape(3, 3))


def _dlt_system(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    n = len(src)
    x, y = src[:, 0], src[:, 1]
    u, v = dst[:, 0], dst[:, 1]
    one, zero = np.ones(n), np.zeros(n)
    A = np.zeros((2 * n, 9))
    A[0::2] = np.stack([x, y, one, zero, zero, zero, -u * x, -u * y, -u], axis=1)
    A[1::2] = np.stack([zero, zero, zero, x, y, one, -v * x, -v * y, -v], axis=1)
    return A


def hartley_normalization(pts: np.ndarray) -> np.ndarray:
    """Similarity T moving the centroid to 0 and the mean distance to sqrt(2)."""
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / max(d, 1e-12)
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def normalized_dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray | None:
    """Least-squares homography from >= 4 correspondences with Hartley normalization.

    Returns None when the system is rank deficient.
    """
    src = np.asarray(src, float)
    dst = np.asarray(dst, float)
    Ts, Td = hartley_normalization(src), hartley_normalization(dst)
    sn = apply_homography(Ts, src)
    dn = apply_homography(Td, dst)
    A = _dlt_system(sn, dn)
    _, S, Vt = np.linalg.svd(A)
    if len(S) >= 8 and S[7] < 1e-10 * max(S[0], 1e-300):
        return None
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    if abs(H[2, 2]) < 1e-12:
        return None
    return H / H[2, 2]


def has_collinear_triple(pts: np.ndarray, tol: float = 1e-6) -> bool:
    """True if any three of the four points are (nearly) collinear."""
    pts = np.asarray(pts, float)
    scale = max(np.ptp(pts, axis=0).max(), 1e-12) ** 2
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        a, b, c = pts[i], pts[j], pts[k]
        area = abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
        if area <= tol * scale:
            return True
    return False


def is_convex_quad(pts: np.ndarray) -> bool:
    pts = np.asarray(pts, float)
    signs = []
    for i in range(4):
        a, b, c = pts[i], pts[(i + 1) % 4], pts[(i + 2) % 4]
        signs.append(np.sign((b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])))
    return all(s > 0 for s in signs) or all(s < 0 for s in signs)
