"""Procedural (silhouette image, surface point cloud, camera) samples.

Five primitive categories stand in for a real shape collection. Shapes are
posed in camera coordinates (+z forward) and always lie inside the viewing
frustum.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from . import pcdt
from .blending import CameraIntrinsics
from .errors import DomainError, SerializationError

CATEGORIES = ("sphere", "box", "cylinder", "capsule", "torus")

DATASET_VERSION = 1


@dataclass
class ShapeSpec:
    category: str
    size: Dict[str, float]
    rotation: np.ndarray  # (3, 3) local -> camera
    translation: np.ndarray  # (3,) camera frame

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise DomainError(f"unknown category {self.category!r}")
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def bounding_radius(self) -> float:
        s = self.size
        if self.category == "sphere":
            return s["radius"]
        if self.category == "box":
            return float(np.linalg.norm([s["hx"], s["hy"], s["hz"]]))
        if self.category == "cylinder":
            return math.hypot(s["radius"], s["half_height"])
        if self.category == "capsule":
            return s["radius"] + s["half_length"]
        return s["major"] + s["minor"]

    def to_dict(self) -> dict:
        return {"category": self.category, "size": dict(self.size),
                "rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeSpec":
        return cls(d["category"], dict(d["size"]), np.array(d["rotation"]), np.array(d["translation"]))


@dataclass
class Sample:
    id: str
    category: str
    image: np.ndarray  # (1, H, W) in [0, 1]
    gt_cloud: np.ndarray  # (M, 3) camera frame
    cam: CameraIntrinsics
    spec: Optional[ShapeSpec] = None


# ---------------------------------------------------------------------------
# shape parameters
# ---------------------------------------------------------------------------

# canonical orientations chosen so categories read differently in silhouette
_BASE_ROT = {
    "sphere": Rotation.identity(),
    "box": Rotation.from_euler("z", 45, degrees=True),  # square seen corner-up
    "cylinder": Rotation.from_euler("x", 90, degrees=True),  # axis vertical in the image
    "capsule": Rotation.from_euler("y", 90, degrees=True),  # axis horizontal in the image
    "torus": Rotation.identity(),  # ring faces the camera
}


def random_spec(category: str, rng: np.random.Generator, cam: CameraIntrinsics, image_shape=(64, 64),
                max_tilt_deg: float = 15.0, max_tries: int = 100) -> ShapeSpec:
    """Draw size and pose for ``category``, resampling until inside the frustum."""
    for _ in range(max_tries):
        if category == "sphere":
            size = {"radius": rng.uniform(0.3, 0.38)}
        elif category == "box":
            size = {"hx": rng.uniform(0.3, 0.4), "hy": rng.uniform(0.3, 0.4), "hz": rng.uniform(0.1, 0.3)}
        elif category == "cylinder":
            size = {"radius": rng.uniform(0.15, 0.25), "half_height": rng.uniform(0.35, 0.5)}
        elif category == "capsule":
            size = {"radius": rng.uniform(0.15, 0.22), "half_length": rng.uniform(0.25, 0.35)}
        elif category == "torus":
            size = {"major": rng.uniform(0.32, 0.42), "minor": rng.uniform(0.08, 0.13)}
        else:
            raise DomainError(f"unknown category {category!r}")
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        tilt = Rotation.from_rotvec(axis * np.deg2rad(rng.uniform(0, max_tilt_deg)))
        rot = (tilt * _BASE_ROT[category]).as_matrix()
        mid = 0.5 * (cam.near + cam.far)
        t = np.array([rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), mid + rng.uniform(-0.3, 0.3)])
        spec = ShapeSpec(category, size, rot, t)
        if in_frustum(spec, cam, image_shape):
            return spec
    raise DomainError(f"could not place a {category} inside the frustum after {max_tries} tries")


def in_frustum(spec: ShapeSpec, cam: CameraIntrinsics, image_shape: Tuple[int, int]) -> bool:
    """Conservative check: the bounding sphere lies inside all six frustum planes."""
    h, w = image_shape
    c, r = spec.translation, spec.bounding_radius()
    if c[2] - r < cam.near or c[2] + r > cam.far:
        return False
    normals = [
        np.array([cam.fx, 0.0, cam.cx]),  # u >= 0
        np.array([-cam.fx, 0.0, w - cam.cx]),  # u <= W
        np.array([0.0, cam.fy, cam.cy]),  # v >= 0
        np.array([0.0, -cam.fy, h - cam.cy]),  # v <= H
    ]
    return all(n @ c / np.linalg.norm(n) >= r for n in normals)


# ---------------------------------------------------------------------------
# surface sampling
# ---------------------------------------------------------------------------

def _unit_vectors(rng, m):
    v = rng.normal(size=(m, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_local(spec: ShapeSpec, m: int, rng) -> np.ndarray:
    s, cat = spec.size, spec.category
    if cat == "sphere":
        return s["radius"] * _unit_vectors(rng, m)
    if cat == "box":
        half = np.array([s["hx"], s["hy"], s["hz"]])
        areas = 4 * np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])  # per face pair
        axis = rng.choice(3, size=m, p=areas / areas.sum())
        pts = rng.uniform(-1, 1, size=(m, 3)) * half
        sign = rng.choice([-1.0, 1.0], size=m)
        pts[np.arange(m), axis] = sign * half[axis]
        return pts
    if cat == "cylinder":
        r, hh = s["radius"], s["half_height"]
        side, cap = 2 * math.pi * r * 2 * hh, math.pi * r * r
        part = rng.choice(3, size=m, p=np.array([side, cap, cap]) / (side + 2 * cap))
        theta = rng.uniform(0, 2 * math.pi, size=m)
        rad = np.where(part == 0, r, r * np.sqrt(rng.uniform(0, 1, size=m)))
        z = np.where(part == 0, rng.uniform(-hh, hh, size=m), np.where(part == 1, hh, -hh))
        return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)
    if cat == "capsule":
        r, hl = s["radius"], s["half_length"]
        side, ball = 2 * math.pi * r * 2 * hl, 4 * math.pi * r * r
        on_side = rng.uniform(0, 1, size=m) < side / (side + ball)
        theta = rng.uniform(0, 2 * math.pi, size=m)
        pts = np.stack([r * np.cos(theta), r * np.sin(theta), rng.uniform(-hl, hl, size=m)], axis=1)
        sph = r * _unit_vectors(rng, m)
        sph[:, 2] += np.where(sph[:, 2] >= 0, hl, -hl)
        return np.where(on_side[:, None], pts, sph)
    # torus: tube angle density proportional to (R + r cos(phi)), by rejection
    R, r = s["major"], s["minor"]
    phis = []
    need = m
    while need > 0:
        cand = rng.uniform(0, 2 * math.pi, size=2 * need + 16)
        keep = rng.uniform(0, R + r, size=cand.size) < R + r * np.cos(cand)
        phis.append(cand[keep][:need])
        need -= len(phis[-1])
    phi = np.concatenate(phis)
    theta = rng.uniform(0, 2 * math.pi, size=m)
    ring = R + r * np.cos(phi)
    return np.stack([ring * np.cos(theta), ring * np.sin(theta), r * np.sin(phi)], axis=1)


def sample_surface(spec: ShapeSpec, m: int, rng) -> np.ndarray:
    """Area-uniform surface points in the camera frame, shape (m, 3), float64."""
    if m < 1:
        raise DomainError("need at least one surface sample")
    return _sample_local(spec, m, rng) @ spec.rotation.T + spec.translation


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _hit(spec: ShapeSpec, o: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Ray (o + s d, s > 0) hits, in the shape's local frame. o: (3,), d: (K, 3) unit."""
    s, cat = spec.size, spec.category
    ox, oy, oz = o
    dx, dy, dz = d[:, 0], d[:, 1], d[:, 2]
    if cat == "sphere":
        b = d @ o
        disc = b * b - (o @ o - s["radius"] ** 2)
        return (disc >= 0) & (-b + np.sqrt(np.maximum(disc, 0)) > 0)
    if cat == "box":
        half = np.array([s["hx"], s["hy"], s["hz"]])
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-half - o) * inv
            t2 = (half - o) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        return (tmax >= tmin) & (tmax > 0)
    if cat in ("cylinder", "capsule"):
        r = s["radius"]
        hh = s["half_height"] if cat == "cylinder" else s["half_length"]
        a = dx * dx + dy * dy
        b = 2 * (ox * dx + oy * dy)
        c = ox * ox + oy * oy - r * r
        disc = b * b - 4 * a * c
        ok = (disc >= 0) & (a > 0)
        sq = np.sqrt(np.maximum(disc, 0))
        hit = np.zeros(len(d), dtype=bool)
        with np.errstate(divide="ignore", invalid="ignore"):
            for sgn in (-1, 1):
                t = (-b + sgn * sq) / (2 * a)
                z = oz + t * dz
                hit |= ok & (t > 0) & (np.abs(z) <= hh)
            if cat == "cylinder":
                for zc in (-hh, hh):
                    t = (zc - oz) / dz
                    x, y = ox + t * dx, oy + t * dy
                    hit |= (t > 0) & (x * x + y * y <= r * r)
            else:
                for zc in (-hh, hh):
                    oc = o - np.array([0, 0, zc])
                    bb = d @ oc
                    disc2 = bb * bb - (oc @ oc - r * r)
                    hit |= (disc2 >= 0) & (-bb + np.sqrt(np.maximum(disc2, 0)) > 0)
        return hit
    # torus: quartic in the ray parameter, roots via companion-matrix eigenvalues
    R, r = s["major"], s["minor"]
    H = 2 * (d @ o)
    I = o @ o + R * R - r * r
    c3 = 2 * H
    c2 = H * H + 2 * I - 4 * R * R * (dx * dx + dy * dy)
    c1 = 2 * H * I - 8 * R * R * (ox * dx + oy * dy)
    c0 = np.full(len(d), I * I - 4 * R * R * (ox * ox + oy * oy))
    comp = np.zeros((len(d), 4, 4))
    comp[:, 0, :] = -np.stack([c3, c2, c1, c0], axis=1)
    comp[:, 1, 0] = comp[:, 2, 1] = comp[:, 3, 2] = 1.0
    roots = np.linalg.eigvals(comp)
    scale = 1.0 + np.abs(roots)
    real = np.abs(roots.imag) <= 1e-7 * scale
    return np.any(real & (roots.real > 0), axis=1)


def render_silhouette(spec: Optional[ShapeSpec], cam: CameraIntrinsics, H: int, W: int,
                      supersample: int = 2) -> np.ndarray:
    """Coverage image (1, H, W) in [0, 1]: fraction of sub-pixel rays hitting the shape.

    Pixel (row j, col i) spans u in [i, i+1), v in [j, j+1). ``spec=None``
    renders an empty scene.
    """
    if spec is None:
        return np.zeros((1, H, W), dtype=np.float64)
    if not in_frustum(spec, cam, (H, W)):
        raise DomainError(f"{spec.category} at {spec.translation.tolist()} is outside the viewing frustum")
    k = supersample
    offs = (np.arange(k) + 0.5) / k
    us = (np.arange(W)[:, None] + offs[None, :]).reshape(-1)
    vs = (np.arange(H)[:, None] + offs[None, :]).reshape(-1)
    uu, vv = np.meshgrid(us, vs)
    d = np.stack([(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones_like(uu)], axis=-1).reshape(-1, 3)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o_local = spec.rotation.T @ (-spec.translation)
    d_local = d @ spec.rotation  # row-wise R^T d
    hit = _hit(spec, o_local, d_local).reshape(H * k, W * k).astype(np.float64)
    return hit.reshape(H, k, W, k).mean(axis=(1, 3))[None]


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def make_sample(category: str, sample_id: str, rng, cam: CameraIntrinsics, image_size=(64, 64),
                n_gt: int = 1024) -> Sample:
    spec = random_spec(category, rng, cam, image_size)
    cloud = sample_surface(spec, n_gt, rng)
    image = render_silhouette(spec, cam, *image_size)
    return Sample(sample_id, category, image.astype(np.float32), cloud.astype(np.float32), cam, spec)


def make_dataset(n_per_category: int, split_ratio: float = 0.8, seed: int = 0, image_size=(64, 64),
                 n_gt: int = 1024, categories: Sequence[str] = CATEGORIES,
                 cam: Optional[CameraIntrinsics] = None) -> Tuple[List[Sample], List[Sample]]:
    """Seeded train/test split, ``floor(n * split_ratio)`` training samples per category."""
    if n_per_category < 2:
        raise DomainError("need at least 2 samples per category")
    if not 0 < split_ratio < 1:
        raise DomainError("split_ratio must be in (0, 1)")
    cam = cam or CameraIntrinsics.default(image_size)
    n_train = min(max(int(math.floor(n_per_category * split_ratio + 1e-9)), 1), n_per_category - 1)
    train, test = [], []
    for ci, cat in enumerate(categories):
        for k in range(n_per_category):
            rng = np.random.default_rng([seed, ci, k])
            s = make_sample(cat, f"{cat}_{k:04d}", rng, cam, image_size, n_gt)
            (train if k < n_train else test).append(s)
    return train, test


def save_dataset(path, train: Sequence[Sample], test: Sequence[Sample]) -> None:
    """Write ``index.json`` plus per-sample PCDT image and cloud files."""
    path = Path(path)
    (path / "samples").mkdir(parents=True, exist_ok=True)
    entries = []
    for split, samples in (("train", train), ("test", test)):
        for s in samples:
            img_rel, cloud_rel = f"samples/{s.id}.image.pcdt", f"samples/{s.id}.cloud.pcdt"
            pcdt.save(path / img_rel, s.image)
            pcdt.save(path / cloud_rel, s.gt_cloud)
            entries.append({"id": s.id, "category": s.category, "split": split, "image": img_rel,
                            "cloud": cloud_rel, "camera": s.cam.to_dict(),
                            "shape": s.spec.to_dict() if s.spec is not None else None})
    index = {"version": DATASET_VERSION, "samples": entries}
    pcdt.atomic_write_bytes(path / "index.json", (json.dumps(index, indent=1, sort_keys=True) + "\n").encode())


def load_dataset(path) -> Tuple[List[Sample], List[Sample]]:
    path = Path(path)
    try:
        index = json.loads((path / "index.json").read_text())
    except FileNotFoundError:
        raise SerializationError(f"no dataset index at {path / 'index.json'}") from None
    if index.get("version") != DATASET_VERSION:
        raise SerializationError(f"unsupported dataset version {index.get('version')!r}")
    train, test = [], []
    for e in index["samples"]:
        spec = ShapeSpec.from_dict(e["shape"]) if e.get("shape") else None
        s = Sample(e["id"], e["category"], pcdt.load(path / e["image"]), pcdt.load(path / e["cloud"]),
                   CameraIntrinsics(**e["camera"]), spec)
        (train if e["split"] == "train" else test).append(s)
    return train, test


def categories_of(samples: Sequence[Sample]) -> List[str]:
    seen = []
    for s in samples:
        if s.category not in seen:
            seen.append(s.category)
    return seen
