"""Dataset ingestion, synthetic scene generation, PLY checkpoints, and the
bounded prefetching image cache.

The canonical dataset layout is a directory with::

    cameras.json   (schema below, "version": 1)
    images/*.png   (8-bit sRGB, decoded to linear float)
    points.ply     (optional initial point cloud; random init otherwise)

cameras.json::

    {"version": 1,
     "cameras": [{"id": 0, "image": "images/0000.png",
                  "width": 64, "height": 64,
                  "fx": 57.6, "fy": 57.6, "cx": 32.0, "cy": 32.0,
                  "world_to_view": [[...] x4],   # row-major rigid transform
                  "split": "train"}, ...]}

Checkpoints are binary little-endian PLY with the community splatting
attribute layout: x,y,z, f_dc_0..2, f_rest_* (channel-major), opacity,
scale_0..2 (logs), rot_0..3.
"""

from __future__ import annotations

import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core_math import Camera, look_at_camera
from .gaussians import GaussianSet, make_set
from .images import load_png, quantize_linear, save_png
from .reference import render_reference


class DatasetError(ValueError):
    pass


class SchemaError(DatasetError):
    pass


class MissingFileError(DatasetError):
    pass


class ResolutionMismatchError(DatasetError):
    pass


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------------
# PLY
# --------------------------------------------------------------------------

_PLY_TYPES = {
    "float": "<f4",
    "float32": "<f4",
    "double": "<f8",
    "float64": "<f8",
    "uchar": "u1",
    "uint8": "u1",
    "char": "i1",
    "short": "<i2",
    "ushort": "<u2",
    "int": "<i4",
    "int32": "<i4",
    "uint": "<u4",
    "uint32": "<u4",
}


def read_ply_vertices(path) -> np.ndarray:
    """Parse a binary little-endian PLY vertex element into a structured
    array. Raises CheckpointError on malformed headers or truncation."""
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"ply":
            raise CheckpointError(f"{path}: not a PLY file")
        fmt = f.readline().split()
        if len(fmt) < 2 or fmt[0] != b"format" or fmt[1] != b"binary_little_endian":
            raise CheckpointError(f"{path}: expected binary_little_endian format")
        count = None
        fields = []
        while True:
            line = f.readline()
            if not line:
                raise CheckpointError(f"{path}: header ended before end_header")
            parts = line.split()
            if not parts:
                continue
            if parts[0] == b"end_header":
                break
            if parts[0] == b"comment":
                continue
            if parts[0] == b"element":
                if parts[1] == b"vertex":
                    count = int(parts[2])
                elif count is not None and fields:
                    break  # only the vertex element is read
            elif parts[0] == b"property" and count is not None:
                if parts[1] == b"list":
                    raise CheckpointError(f"{path}: list properties unsupported")
                tname = parts[1].decode()
                if tname not in _PLY_TYPES:
                    raise CheckpointError(f"{path}: unsupported property type {tname}")
                fields.append((parts[2].decode(), _PLY_TYPES[tname]))
        if count is None:
            raise CheckpointError(f"{path}: no vertex element")
        dtype = np.dtype(fields)
        buf = f.read(count * dtype.itemsize)
        if len(buf) != count * dtype.itemsize:
            raise CheckpointError(
                f"{path}: truncated payload ({len(buf)} of {count * dtype.itemsize} bytes)"
            )
        return np.frombuffer(buf, dtype=dtype, count=count)


def write_ply_vertices(path, arrays: dict) -> None:
    """Write named float32/uint8 columns as a binary little-endian PLY."""
    names = list(arrays)
    n = len(arrays[names[0]]) if names else 0
    fields = []
    for name in names:
        a = arrays[name]
        code = "u1" if a.dtype == np.uint8 else "<f4"
        fields.append((name, code))
    data = np.empty(n, dtype=np.dtype(fields))
    for name in names:
        data[name] = arrays[name]
    with open(path, "wb") as f:
        f.write(b"ply\nformat binary_little_endian 1.0\n")
        f.write(f"element vertex {n}\n".encode())
        for name, code in fields:
            tname = "uchar" if code == "u1" else "float"
            f.write(f"property {tname} {name}\n".encode())
        f.write(b"end_header\n")
        f.write(data.tobytes())


def save_checkpoint(gs: GaussianSet, path) -> None:
    """Checkpoint the parameter arrays (training statistics are not saved)."""
    K = gs.sh.shape[2]
    cols = {"x": gs.positions[:, 0], "y": gs.positions[:, 1], "z": gs.positions[:, 2]}
    for c in range(3):
        cols[f"f_dc_{c}"] = gs.sh[:, c, 0]
    i = 0
    for c in range(3):
        for k in range(1, K):
            cols[f"f_rest_{i}"] = gs.sh[:, c, k]
            i += 1
    cols["opacity"] = gs.opacity_logits
    for a in range(3):
        cols[f"scale_{a}"] = gs.log_scales[:, a]
    for a in range(4):
        cols[f"rot_{a}"] = gs.rotations[:, a]
    write_ply_vertices(path, {k: np.asarray(v, dtype=np.float32) for k, v in cols.items()})


def load_checkpoint(path, dtype=np.float64) -> GaussianSet:
    """Load a checkpoint PLY; validates the property set and renormalizes
    quaternions."""
    data = read_ply_vertices(path)
    names = set(data.dtype.names or ())
    base = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
            "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    for prop in base:
        if prop not in names:
            raise CheckpointError(f"{path}: missing property '{prop}'")
    n_rest = sum(1 for nm in names if nm.startswith("f_rest_"))
    if n_rest % 3 != 0:
        raise CheckpointError(f"{path}: f_rest count {n_rest} not divisible by 3")
    K = n_rest // 3 + 1
    deg = int(round(np.sqrt(K))) - 1
    if (deg + 1) ** 2 != K or deg > 3:
        raise CheckpointError(f"{path}: {K} SH coefficients is not a full degree <= 3")

    n = len(data)
    sh = np.zeros((n, 3, K))
    for c in range(3):
        sh[:, c, 0] = data[f"f_dc_{c}"]
    i = 0
    for c in range(3):
        for k in range(1, K):
            sh[:, c, k] = data[f"f_rest_{i}"]
            i += 1
    gs = make_set(
        positions=np.stack([data["x"], data["y"], data["z"]], axis=1),
        rotations=np.stack([data[f"rot_{a}"] for a in range(4)], axis=1),
        log_scales=np.stack([data[f"scale_{a}"] for a in range(3)], axis=1),
        opacity_logits=np.asarray(data["opacity"]),
        sh=sh,
        dtype=dtype,
    )
    gs.normalize_rotations()
    return gs


def save_points_ply(path, positions: np.ndarray, colors: np.ndarray) -> None:
    u8 = (np.clip(colors, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    write_ply_vertices(
        path,
        {
            "x": positions[:, 0].astype(np.float32),
            "y": positions[:, 1].astype(np.float32),
            "z": positions[:, 2].astype(np.float32),
            "red": u8[:, 0],
            "green": u8[:, 1],
            "blue": u8[:, 2],
        },
    )


def load_points_ply(path):
    data = read_ply_vertices(path)
    names = set(data.dtype.names or ())
    for prop in ("x", "y", "z"):
        if prop not in names:
            raise CheckpointError(f"{path}: missing property '{prop}'")
    pos = np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64)
    if {"red", "green", "blue"} <= names:
        cols = np.stack([data["red"], data["green"], data["blue"]], axis=1).astype(np.float64)
        if cols.max() > 1.0:
            cols /= 255.0
    else:
        cols = np.full((len(pos), 3), 0.5)
    return pos, cols


# --------------------------------------------------------------------------
# Dataset
# --------------------------------------------------------------------------


class ArrayImageSource:
    """Serves preloaded in-memory images."""

    def __init__(self, images: dict):
        self._images = images

    def load(self, cam_id: int) -> np.ndarray:
        return self._images[cam_id]

    def nbytes(self) -> int:
        return int(sum(img.nbytes for img in self._images.values()))


class FileImageSource:
    """Decodes images from disk on every load (cache sits above this)."""

    def __init__(self, paths: dict):
        self.paths = paths

    def load(self, cam_id: int) -> np.ndarray:
        return load_png(self.paths[cam_id])


@dataclass
class Dataset:
    cameras: list
    source: object
    points_positions: np.ndarray
    points_colors: np.ndarray
    extent: float
    root: str | None = None

    def camera(self, cam_id: int) -> Camera:
        for c in self.cameras:
            if c.cam_id == cam_id:
                return c
        raise KeyError(f"unknown view id {cam_id}")

    def split_ids(self, split: str):
        return [c.cam_id for c in self.cameras if c.split == split]

    def image(self, cam_id: int) -> np.ndarray:
        return self.source.load(cam_id)

    def image_nbytes(self) -> int:
        c = self.cameras[0]
        return int(c.height) * int(c.width) * 3 * 8


def scene_extent(cameras) -> float:
    centers = np.stack([c.center for c in cameras])
    centroid = centers.mean(axis=0)
    return float(max(np.linalg.norm(centers - centroid, axis=1).max(), 1e-6))


def _camera_from_dict(d: dict, idx: int) -> Camera:
    required = ["id", "image", "width", "height", "fx", "fy", "cx", "cy", "world_to_view"]
    for key in required:
        if key not in d:
            raise SchemaError(f"cameras[{idx}]: missing key '{key}'")
    m = np.asarray(d["world_to_view"], dtype=np.float64)
    if m.shape != (4, 4):
        raise SchemaError(f"cameras[{idx}]: world_to_view must be 4x4")
    split = d.get("split", "train")
    if split not in ("train", "test"):
        raise SchemaError(f"cameras[{idx}]: split must be 'train' or 'test', got {split!r}")
    cam = Camera(
        R=m[:3, :3],
        t=m[:3, 3],
        fx=float(d["fx"]),
        fy=float(d["fy"]),
        cx=float(d["cx"]),
        cy=float(d["cy"]),
        width=int(d["width"]),
        height=int(d["height"]),
        cam_id=int(d["id"]),
        image_path=str(d["image"]),
        split=split,
    )
    try:
        cam.validate()
    except ValueError as e:
        raise SchemaError(str(e)) from e
    return cam


def load_dataset(path, init_points: int = 1000, seed: int = 0) -> Dataset:
    """Read a cameras.json dataset directory; validates images against the
    declared resolutions. Missing points.ply falls back to a seeded random
    cloud inside the camera bounding sphere with mid-gray colors."""
    root = Path(path)
    cam_file = root / "cameras.json"
    if not cam_file.exists():
        raise MissingFileError(f"{cam_file} does not exist")
    try:
        spec = json.loads(cam_file.read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"{cam_file}: invalid JSON ({e})") from e
    if spec.get("version") != 1:
        raise SchemaError(f"{cam_file}: unsupported schema version {spec.get('version')!r}")
    if "cameras" not in spec or not isinstance(spec["cameras"], list) or not spec["cameras"]:
        raise SchemaError(f"{cam_file}: 'cameras' must be a non-empty list")

    cameras = []
    paths = {}
    ids = set()
    for idx, d in enumerate(spec["cameras"]):
        cam = _camera_from_dict(d, idx)
        if cam.cam_id in ids:
            raise SchemaError(f"cameras[{idx}]: duplicate id {cam.cam_id}")
        ids.add(cam.cam_id)
        img_path = root / d["image"]
        if not img_path.exists():
            raise MissingFileError(f"camera {cam.cam_id}: image {img_path} does not exist")
        from PIL import Image

        with Image.open(img_path) as im:
            w, h = im.size
        if (w, h) != (cam.width, cam.height):
            raise ResolutionMismatchError(
                f"camera {cam.cam_id}: image {img_path} is {w}x{h}, expected "
                f"{cam.width}x{cam.height}"
            )
        cameras.append(cam)
        paths[cam.cam_id] = str(img_path)

    extent = scene_extent(cameras)
    pts_file = root / "points.ply"
    if pts_file.exists():
        pos, cols = load_points_ply(pts_file)
    else:
        rng = np.random.default_rng(seed)
        centers = np.stack([c.center for c in cameras])
        centroid = centers.mean(axis=0)
        v = rng.normal(size=(init_points, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        r = extent * rng.uniform(0, 1, init_points) ** (1 / 3)
        pos = centroid + v * r[:, None]
        cols = np.full((init_points, 3), 0.5)
    return Dataset(
        cameras=cameras,
        source=FileImageSource(paths),
        points_positions=pos,
        points_colors=cols,
        extent=extent,
        root=str(root),
    )


# --------------------------------------------------------------------------
# Synthetic scenes
# --------------------------------------------------------------------------


@dataclass
class SyntheticScene:
    gt: GaussianSet
    cameras: list
    images: dict  # cam_id -> linear float image (already 8-bit quantized)
    points_positions: np.ndarray
    points_colors: np.ndarray
    extent: float

    def dataset(self) -> Dataset:
        return Dataset(
            cameras=self.cameras,
            source=ArrayImageSource(self.images),
            points_positions=self.points_positions,
            points_colors=self.points_colors,
            extent=self.extent,
        )

    def write(self, path) -> None:
        root = Path(path)
        (root / "images").mkdir(parents=True, exist_ok=True)
        cams = []
        for cam in self.cameras:
            rel = f"images/{cam.cam_id:04d}.png"
            save_png(root / rel, self.images[cam.cam_id])
            cam.image_path = rel
            cams.append(cam.to_dict())
        (root / "cameras.json").write_text(json.dumps({"version": 1, "cameras": cams}, indent=1))
        save_points_ply(root / "points.ply", self.points_positions, self.points_colors)
        save_checkpoint(self.gt, root / "gt.ply")


def generate_synthetic(
    seed: int,
    n_gaussians: int,
    n_cameras: int,
    resolution: int = 64,
    sh_degree: int = 1,
    test_every: int = 4,
    ring_radius: float = 2.6,
    point_noise: float = 0.03,
    init_fraction: float = 1.0,
) -> SyntheticScene:
    """Deterministic-by-seed scene: random Gaussians inside the unit sphere,
    cameras on a surrounding ring looking inward, targets rendered with the
    reference renderer, init points sampled around the true centers.

    Ground-truth parameters are quantized to float32 up front so a checkpoint
    round trip reproduces them exactly.
    """
    if n_gaussians < 1 or n_cameras < 2:
        raise ValueError("need n_gaussians >= 1 and n_cameras >= 2")
    rng = np.random.default_rng(seed)
    K = (sh_degree + 1) ** 2

    v = rng.normal(size=(n_gaussians, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    pos = v * (0.8 * rng.uniform(0, 1, n_gaussians)[:, None] ** (1 / 3))
    rot = rng.normal(size=(n_gaussians, 4))
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    log_s = np.log(rng.uniform(0.06, 0.18, (n_gaussians, 3)))
    from .core_math import dc_from_rgb, inverse_sigmoid

    logits = inverse_sigmoid(rng.uniform(0.55, 0.95, n_gaussians))
    sh = np.zeros((n_gaussians, 3, K))
    base_rgb = rng.uniform(0.15, 0.9, (n_gaussians, 3))
    sh[:, :, 0] = dc_from_rgb(base_rgb)
    if K > 1:
        sh[:, :, 1:] = rng.normal(0.0, 0.08, (n_gaussians, 3, K - 1))

    gt = make_set(pos, rot, log_s, logits, sh, dtype=np.float32).astype(np.float64)

    W = H = int(resolution)
    focal = 0.9 * W
    cameras = []
    for i in range(n_cameras):
        phi = 2.0 * np.pi * i / n_cameras
        eye = np.array(
            [ring_radius * np.cos(phi), 0.35 * (-1.0) ** i, ring_radius * np.sin(phi)]
        )
        split = "test" if (i % test_every == test_every - 1) else "train"
        cameras.append(look_at_camera(eye, (0, 0, 0), W, H, focal, cam_id=i, split=split))

    # Targets carry the production render semantics (skip gate + early stop)
    # so a perfect checkpoint reproduces them exactly through eval.
    images = {}
    for cam in cameras:
        ref = render_reference(gt, cam, alpha_skip=1.0 / 255.0, t_stop=1e-4)
        images[cam.cam_id] = quantize_linear(np.clip(ref.color, 0.0, 1.0))

    # SfM-like sparse cloud: noisy samples of (a fraction of) the true
    # centers with near-true colors.
    noise = rng.normal(0.0, point_noise, (n_gaussians, 3))
    points = gt.positions.astype(np.float64) + noise
    colors = np.clip(base_rgb + rng.normal(0, 0.02, base_rgb.shape), 0.0, 1.0)
    if init_fraction < 1.0:
        k = max(1, int(round(init_fraction * n_gaussians)))
        chosen = rng.choice(n_gaussians, size=k, replace=False)
        points = points[chosen]
        colors = colors[chosen]
    return SyntheticScene(
        gt=gt,
        cameras=cameras,
        images=images,
        points_positions=points,
        points_colors=colors,
        extent=scene_extent(cameras),
    )


# --------------------------------------------------------------------------
# Prefetch cache
# --------------------------------------------------------------------------


class PrefetchCache:
    """Bounded image cache fed by background fetches of the upcoming view
    schedule.

    Residents plus in-flight fetches never exceed `capacity`; eviction
    prefers images that left the schedule window (least recently used among
    them), falling back to global LRU. A get for a missing view blocks on its
    in-flight fetch or loads synchronously; the served bytes always equal a
    direct load.
    """

    def __init__(self, source, capacity: int, workers: int = 2):
        if capacity < 1:
            raise ValueError("cache capacity must be >= 1")
        self.source = source
        self.capacity = int(capacity)
        self._lock = threading.Lock()
        self._resident: dict = {}
        self._inflight: dict = {}
        self._last_use: dict = {}
        self._tick = 0
        self._window: set = set()
        self._pool = ThreadPoolExecutor(max_workers=workers)
        self.hits = 0
        self.misses = 0
        self.peak_resident = 0

    # -- internals ---------------------------------------------------------

    def _touch(self, cam_id) -> None:
        self._tick += 1
        self._last_use[cam_id] = self._tick

    def _evict_for_slot(self) -> bool:
        """Drop one resident to make room; False if nothing is evictable."""
        if not self._resident:
            return False
        outside = [k for k in self._resident if k not in self._window]
        pool = outside if outside else list(self._resident)
        victim = min(pool, key=lambda k: self._last_use.get(k, 0))
        del self._resident[victim]
        return True

    def _insert(self, cam_id, img) -> None:
        while len(self._resident) >= self.capacity:
            if not self._evict_for_slot():
                return  # nothing evictable; serve without caching
        self._resident[cam_id] = img
        self._touch(cam_id)
        self.peak_resident = max(self.peak_resident, len(self._resident))

    def _fetch_done(self, cam_id, future) -> None:
        with self._lock:
            self._inflight.pop(cam_id, None)
            if future.cancelled() or future.exception() is not None:
                return
            if cam_id not in self._resident:
                self._insert(cam_id, future.result())

    # -- public ------------------------------------------------------------

    def prefetch(self, window) -> None:
        """Kick off background fetches for upcoming views (bounded)."""
        with self._lock:
            self._window = set(window)
            for cam_id in window:
                if cam_id in self._resident or cam_id in self._inflight:
                    continue
                if len(self._resident) + len(self._inflight) >= self.capacity:
                    break
                future = self._pool.submit(self.source.load, cam_id)
                self._inflight[cam_id] = future
                future.add_done_callback(lambda f, c=cam_id: self._fetch_done(c, f))

    def get(self, cam_id) -> np.ndarray:
        with self._lock:
            if cam_id in self._resident:
                self.hits += 1
                self._touch(cam_id)
                return self._resident[cam_id]
            future = self._inflight.get(cam_id)
        if future is not None:
            img = future.result()
            with self._lock:
                self.misses += 1
                self._touch(cam_id)
                return self._resident.get(cam_id, img)
        img = self.source.load(cam_id)
        with self._lock:
            self.misses += 1
            self._insert(cam_id, img)
            return img

    def resident_count(self) -> int:
        with self._lock:
            return len(self._resident)

    def resident_nbytes(self) -> int:
        with self._lock:
            return int(sum(img.nbytes for img in self._resident.values()))

    def close(self) -> None:
        self._pool.shutdown(wait=True)
