"""Equirectangular panorama -> four side cubemap faces, planar depth, normalization."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imageio import read_pfm, read_pgm, read_ppm, write_pfm, write_pgm, write_ppm
from .turbo import turbo_colorize

FACES = ("front", "right", "back", "left")
KINDS = ("rgb", "labels", "depth")


@dataclass
class Panorama:
    data: np.ndarray  # [H, W] or [H, W, C], W == 2 H
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        h, w = self.data.shape[:2]
        if w != 2 * h:
            raise ValueError(f"panorama must be 2:1, got {w}x{h}")
        if self.kind == "depth" and np.any(self.data < 0):
            raise ValueError("depth panorama has negative values")


def face_coords(S: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalized image-plane coords (a, b) of pixel centres, each [S, S]."""
    if S < 2:
        raise ValueError("face size must be >= 2")
    t = 2.0 * (np.arange(S) + 0.5) / S - 1.0
    b, a = np.meshgrid(t, t, indexing="ij")
    return a, b


def face_directions(face: str, S: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unnormalized view directions (x right, y down, z forward) for a face."""
    a, b = face_coords(S)
    one = np.ones_like(a)
    if face == "front":
        return a, b, one
    if face == "right":
        return one, b, -a
    if face == "back":
        return -a, b, -one
    if face == "left":
        return -one, b, a
    raise ValueError(f"face must be one of {FACES}")


def direction_to_pano(dx, dy, dz, W: int, H: int) -> tuple[np.ndarray, np.ndarray]:
    """Continuous panorama coords; pixel (i, j) covers [j, j+1) x [i, i+1)."""
    theta = np.arctan2(dx, dz)
    phi = np.arcsin(np.clip(dy / np.sqrt(dx * dx + dy * dy + dz * dz), -1.0, 1.0))
    return (theta / (2 * math.pi) + 0.5) * W, (phi / math.pi + 0.5) * H


def sample_bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear lookup with longitude wraparound and latitude clamping."""
    H, W = img.shape[:2]
    fx = x - 0.5
    fy = np.clip(y - 0.5, 0.0, H - 1.0)
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.minimum(np.floor(fy).astype(np.int64), H - 1)
    tx = fx - x0
    ty = fy - y0
    y1 = np.minimum(y0 + 1, H - 1)
    x0w, x1w = x0 % W, (x0 + 1) % W
    if img.ndim == 3:
        tx, ty = tx[..., None], ty[..., None]
    img = np.asarray(img, dtype=np.float64)
    top = img[y0, x0w] * (1 - tx) + img[y0, x1w] * tx
    bot = img[y1, x0w] * (1 - tx) + img[y1, x1w] * tx
    return top * (1 - ty) + bot * ty


def sample_nearest(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    H, W = img.shape[:2]
    col = np.floor(x).astype(np.int64) % W
    row = np.clip(np.floor(y).astype(np.int64), 0, H - 1)
    return img[row, col]


def equirect_to_face(pano: Panorama, face: str, S: int) -> np.ndarray:
    """90 degree pinhole view of one side face."""
    H, W = pano.data.shape[:2]
    x, y = direction_to_pano(*face_directions(face, S), W, H)
    if pano.kind == "labels":
        return sample_nearest(pano.data, x, y)
    out = sample_bilinear(pano.data, x, y)
    if pano.kind == "rgb" and np.issubdtype(pano.data.dtype, np.integer):
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out


def planar_factor(S: int) -> np.ndarray:
    """Cosine between each pixel ray and the face normal, 1 / ||(a, b, 1)||."""
    a, b = face_coords(S)
    return 1.0 / np.sqrt(a * a + b * b + 1.0)


def ray_to_planar(depth_face: np.ndarray) -> np.ndarray:
    S = depth_face.shape[0]
    if depth_face.shape != (S, S):
        raise ValueError(f"depth face must be square, got {depth_face.shape}")
    return depth_face * planar_factor(S)


def normalize_depth(faces: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Divide by the cubemap-wide maximum and rescale to [0, 255] as float32."""
    top = max(float(np.max(f)) for f in faces.values())
    if not top > 0:
        raise ValueError("cubemap depth is all zero")
    return {k: (np.asarray(f, dtype=np.float64) / top * 255.0).astype(np.float32) for k, f in faces.items()}


# ---------------------------------------------------------------------------
# analytic room


def room_ray_distance(dx, dy, dz, half=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Distance from ``center`` along unit(d) to the walls of an axis-aligned box."""
    d = np.stack(np.broadcast_arrays(dx, dy, dz)).astype(np.float64)
    d = d / np.linalg.norm(d, axis=0)
    t = np.full(d.shape[1:], np.inf)
    for i in range(3):
        with np.errstate(divide="ignore", invalid="ignore"):
            ti = (np.sign(d[i]) * half[i] - center[i]) / d[i]
        t = np.minimum(t, np.where(d[i] != 0, ti, np.inf))
    return t


def room_panorama(H: int, half=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> Panorama:
    """Ray-distance panorama of a box room, sampled at pixel centres."""
    W = 2 * H
    theta = ((np.arange(W) + 0.5) / W - 0.5) * 2 * math.pi
    phi = ((np.arange(H) + 0.5) / H - 0.5) * math.pi
    th, ph = np.meshgrid(theta, phi)
    dx, dy, dz = np.cos(ph) * np.sin(th), np.sin(ph), np.cos(ph) * np.cos(th)
    return Panorama(room_ray_distance(dx, dy, dz, half, center), "depth")


def room_planar_depth(face: str, S: int, half=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Exact planar depth of the box room seen through one face."""
    return room_ray_distance(*face_directions(face, S), half, center) * planar_factor(S)


# ---------------------------------------------------------------------------
# scenes on disk


def label_palette(num_labels: int) -> np.ndarray:
    ids = np.arange(num_labels, dtype=np.float64)
    return turbo_colorize(ids, -0.5, max(num_labels - 0.5, 0.5)).reshape(num_labels, 3)


def labels_csv(num_labels: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("id", "name", "r", "g", "b"))
    for i, (r, g, b) in enumerate(label_palette(num_labels)):
        w.writerow((i, f"label_{i}", int(r), int(g), int(b)))
    return buf.getvalue()


def convert_scene(rgb: np.ndarray, labels: np.ndarray, depth: np.ndarray, S: int) -> dict[str, dict[str, np.ndarray]]:
    """Per face: uint8 rgb [S, S, 3], labels [S, S], float32 planar depth in [0, 255]."""
    pr, pl, pd = Panorama(rgb, "rgb"), Panorama(labels, "labels"), Panorama(depth, "depth")
    planar = {f: ray_to_planar(equirect_to_face(pd, f, S)) for f in FACES}
    planar = normalize_depth(planar)
    return {f: {"rgb": equirect_to_face(pr, f, S), "labels": equirect_to_face(pl, f, S), "depth": planar[f]} for f in FACES}


def prepare_scene(scene_dir: Path, out_dir: Path, S: int, num_labels: int) -> list[Path]:
    """Read ``rgb.ppm``, ``sem.pgm``, ``depth.pfm`` and write the four faces."""
    scene_dir, out_dir = Path(scene_dir), Path(out_dir)
    rgb = read_ppm(scene_dir / "rgb.ppm")
    labels, _ = read_pgm(scene_dir / "sem.pgm")
    depth = read_pfm(scene_dir / "depth.pfm").astype(np.float64)
    if not (rgb.shape[:2] == labels.shape == depth.shape):
        raise ValueError(f"{scene_dir.name}: panorama components differ in size")
    if labels.max(initial=0) >= num_labels:
        raise ValueError(f"{scene_dir.name}: label {labels.max()} >= num_labels {num_labels}")
    faces = convert_scene(rgb, labels, depth, S)
    dst = out_dir / scene_dir.name
    dst.mkdir(parents=True, exist_ok=True)
    written = []
    for f, parts in faces.items():
        write_ppm(dst / f"{f}.rgb.ppm", parts["rgb"])
        write_pgm(dst / f"{f}.sem.pgm", parts["labels"], num_labels)
        write_pfm(dst / f"{f}.depth.pfm", parts["depth"])
        written += [dst / f"{f}.rgb.ppm", dst / f"{f}.sem.pgm", dst / f"{f}.depth.pfm"]
    return written
