"""Deterministic synthetic data: indoor-like scenes with paired renders.

Object classes are distinguished jointly by silhouette color (what the image
path sees) and by shape kind / size signature (what the point-cloud path
sees), so class knowledge genuinely has to cross modalities.
"""

from __future__ import annotations

import base64
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import dump_config, parse_config_text
from .geometry import Box3D, CameraModel, corners_of_box3d, points_in_box, yaw_rotation


class PlacementFailure(Exception):
    """Rejection sampling could not place the requested objects."""


SHAPE_KINDS = ("cuboid", "cylinder", "lshape")

_COLORS = np.array(
    [
        [0.85, 0.10, 0.10],
        [0.10, 0.75, 0.15],
        [0.15, 0.25, 0.90],
        [0.90, 0.85, 0.10],
        [0.85, 0.15, 0.80],
        [0.10, 0.80, 0.85],
        [0.95, 0.55, 0.10],
        [0.55, 0.20, 0.75],
    ]
)

# (w_lo, w_hi, d_lo, d_hi, h_lo, h_hi) per class; deliberately distinctive so
# ROI point clouds are classifiable from geometry once labels exist.
_SIZE_RANGES = [
    (0.40, 0.60, 0.40, 0.60, 0.30, 0.50),
    (0.30, 0.50, 0.30, 0.50, 1.20, 1.60),
    (1.20, 1.60, 1.20, 1.60, 0.50, 0.70),
    (0.50, 0.70, 0.50, 0.70, 1.40, 1.80),
    (0.80, 1.10, 0.80, 1.10, 0.40, 0.60),
    (0.70, 1.00, 0.70, 1.00, 0.90, 1.20),
    (1.40, 1.80, 0.80, 1.00, 0.25, 0.40),
    (0.55, 0.75, 0.55, 0.75, 0.80, 1.00),
]

BACKGROUND = np.array([0.18, 0.18, 0.18])


@dataclass(frozen=True)
class ObjectTemplate:
    class_id: int
    size_lo: np.ndarray
    size_hi: np.ndarray
    color: np.ndarray
    shape: str


@dataclass(frozen=True)
class SceneObject:
    box: Box3D
    class_id: int


@dataclass
class Scene:
    scene_id: str
    points: np.ndarray  # (N, 3)
    camera: CameraModel
    objects: list
    label_mask: list  # per-object annotation visibility


@dataclass(frozen=True)
class PairedImage:
    scene_id: str
    pixels: np.ndarray  # (H, W, 3) in [0, 1]


@dataclass(frozen=True)
class ClassificationSample:
    pixels: np.ndarray  # (h, w, 3) in [0, 1]
    class_id: int


@dataclass(frozen=True)
class VocabularySplit:
    seen: frozenset
    test: frozenset
    classification: frozenset

    def __post_init__(self):
        if not (self.seen < self.test and self.test <= self.classification):
            raise ValueError(
                "vocabulary split must satisfy seen < test <= classification "
                f"(got seen={sorted(self.seen)}, test={sorted(self.test)})"
            )

    @property
    def unseen(self) -> frozenset:
        return self.test - self.seen


def build_templates(n_classes: int) -> list:
    if n_classes > len(_COLORS):
        raise ValueError(f"at most {len(_COLORS)} classes supported, got {n_classes}")
    templates = []
    for cid in range(n_classes):
        w_lo, w_hi, d_lo, d_hi, h_lo, h_hi = _SIZE_RANGES[cid]
        templates.append(
            ObjectTemplate(
                class_id=cid,
                size_lo=np.array([w_lo, d_lo, h_lo]),
                size_hi=np.array([w_hi, d_hi, h_hi]),
                color=_COLORS[cid].copy(),
                shape=SHAPE_KINDS[cid % 3],
            )
        )
    return templates


def split_vocabulary(all_classes, n_unseen: int, seed: int) -> VocabularySplit:
    """Deterministically sample the unseen set; seen is the remainder."""
    all_classes = sorted(all_classes)
    if not 0 < n_unseen < len(all_classes):
        raise ValueError(f"n_unseen must be in [1, {len(all_classes) - 1}], got {n_unseen}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(all_classes))
    unseen = {all_classes[i] for i in order[:n_unseen]}
    return VocabularySplit(
        seen=frozenset(all_classes) - frozenset(unseen),
        test=frozenset(all_classes),
        classification=frozenset(all_classes),
    )


def scene_extent(config: dict) -> np.ndarray:
    return np.array(
        [config["scene_extent_x"], config["scene_extent_y"], config["scene_extent_z"]]
    )


# ------------------------------------------------------------------ sampling


def _sample_size(template: ObjectTemplate, rng) -> np.ndarray:
    size = rng.uniform(template.size_lo, template.size_hi)
    if template.shape == "cylinder":
        size[1] = size[0]  # circular footprint
    return size


def _sample_cuboid_surface(half: np.ndarray, n: int, rng) -> np.ndarray:
    # faces weighted by area; samples pulled 2% inward so rotation round-trips
    # always stay inside the closed box
    hw, hd, hh = half
    areas = np.array([hd * hh, hd * hh, hw * hh, hw * hh, hw * hd, hw * hd])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    for i in range(n):
        a, b = u[i]
        f = face[i]
        if f < 2:
            pts[i] = [(1 if f == 0 else -1), a, b] * np.array([hw, hd, hh])
        elif f < 4:
            pts[i] = [a, (1 if f == 2 else -1), b] * np.array([hw, hd, hh])
        else:
            pts[i] = [a, b, (1 if f == 4 else -1)] * np.array([hw, hd, hh])
    return pts * 0.98


def _sample_cylinder_surface(half: np.ndarray, n: int, rng) -> np.ndarray:
    hw, hd, hh = half
    r = min(hw, hd)
    lateral = 2 * np.pi * r * 2 * hh
    caps = 2 * np.pi * r * r
    on_side = rng.uniform(size=n) < lateral / (lateral + caps)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    for i in range(n):
        if on_side[i]:
            pts[i] = [r * np.cos(theta[i]), r * np.sin(theta[i]), rng.uniform(-hh, hh)]
        else:
            rr = r * np.sqrt(rng.uniform())
            pts[i] = [rr * np.cos(theta[i]), rr * np.sin(theta[i]), hh * rng.choice([-1.0, 1.0])]
    return pts * 0.98


def _lshape_blocks(half: np.ndarray):
    """Two box-local (lo, hi) blocks whose union is an L footprint."""
    hw, hd, hh = half
    return [
        (np.array([-hw, -hd, -hh]), np.array([hw, 0.0, hh])),
        (np.array([-hw, 0.0, -hh]), np.array([0.0, hd, hh])),
    ]


def _sample_lshape_surface(half: np.ndarray, n: int, rng) -> np.ndarray:
    blocks = _lshape_blocks(half)
    vols = np.array([np.prod(hi - lo) for lo, hi in blocks])
    pick = rng.choice(len(blocks), size=n, p=vols / vols.sum())
    pts = np.empty((n, 3))
    for i in range(n):
        lo, hi = blocks[pick[i]]
        c = (lo + hi) / 2.0
        h = (hi - lo) / 2.0
        pts[i] = c + _sample_cuboid_surface(h, 1, rng)[0] / 0.98
    return pts * 0.98


_SURFACE_SAMPLERS = {
    "cuboid": _sample_cuboid_surface,
    "cylinder": _sample_cylinder_surface,
    "lshape": _sample_lshape_surface,
}


def sample_object_points(box: Box3D, shape: str, n: int, rng) -> np.ndarray:
    local = _SURFACE_SAMPLERS[shape](box.size / 2.0, n, rng)
    return box.center + local @ yaw_rotation(box.yaw).T


def _make_look_at_camera(eye, target, fx_scale, width, height) -> CameraModel:
    eye = np.asarray(eye, float)
    fwd = np.asarray(target, float) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.array([0.0, 0.0, 1.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    fx = fx_scale * width
    return CameraModel(
        fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
        rotation=rot, translation=-rot @ eye, width=width, height=height,
    )


def scene_camera(config: dict) -> CameraModel:
    """Room-corner camera looking at the placement-region centroid."""
    ext = scene_extent(config)
    size = int(config["image_size"])
    eye = np.array([0.06 * ext[0], 0.06 * ext[1], 0.88 * ext[2]])
    target = np.array([0.5 * ext[0], 0.5 * ext[1], 0.28 * ext[2]])
    return _make_look_at_camera(eye, target, fx_scale=0.52, width=size, height=size)


def generate_scene(config: dict, seed: int, scene_id: str | None = None) -> Scene:
    """Deterministic scene synthesis for (config, seed)."""
    rng = np.random.default_rng(seed)
    ext = scene_extent(config)
    templates = build_templates(int(config["n_classes"]))
    n_points = int(config["points_per_scene"])
    margin = float(config["placement_margin"])
    wall_margin = 1.0

    n_objects = int(rng.integers(int(config["objects_min"]), int(config["objects_max"]) + 1))
    objects = []
    attempts = 0
    while len(objects) < n_objects:
        attempts += 1
        if attempts > 1000:
            raise PlacementFailure(
                f"could not place {n_objects} objects in 1000 attempts (seed={seed})"
            )
        template = templates[int(rng.integers(len(templates)))]
        size = _sample_size(template, rng)
        yaw = rng.uniform(-np.pi, np.pi)
        radius = float(np.hypot(size[0], size[1]) / 2.0)
        lo = max(wall_margin, radius)
        center_xy = rng.uniform(lo, ext[:2] - lo)
        center = np.array([center_xy[0], center_xy[1], size[2] / 2.0])
        if any(np.linalg.norm(center[:2] - o.box.center[:2]) < margin for o in objects):
            continue
        objects.append(SceneObject(Box3D(center, size, yaw), template.class_id))

    n_clutter = int(round(config["clutter_fraction"] * n_points)) if objects else n_points
    n_object_pts = n_points - n_clutter
    chunks = []
    if objects:
        per = [n_object_pts // len(objects)] * len(objects)
        for i in range(n_object_pts - sum(per)):
            per[i] += 1
        for obj, count in zip(objects, per):
            shape = templates[obj.class_id].shape
            chunks.append(sample_object_points(obj.box, shape, count, rng))
    if n_clutter > 0:
        # floor plus baseboard-height wall clutter; tall wall points would
        # dominate the detector's max-pooled support statistics and mask
        # interior objects entirely
        on_floor = rng.uniform(size=n_clutter) < 0.7
        clutter = np.empty((n_clutter, 3))
        for i in range(n_clutter):
            if on_floor[i]:
                clutter[i] = [rng.uniform(0, ext[0]), rng.uniform(0, ext[1]),
                              rng.uniform(0, 0.03)]
            elif rng.uniform() < 0.5:
                clutter[i] = [ext[0] - rng.uniform(0, 0.03), rng.uniform(0, ext[1]),
                              rng.uniform(0, 0.25)]
            else:
                clutter[i] = [rng.uniform(0, ext[0]), ext[1] - rng.uniform(0, 0.03),
                              rng.uniform(0, 0.25)]
        chunks.append(clutter)
    points = np.vstack(chunks) if chunks else np.empty((0, 3))

    scene = Scene(
        scene_id=scene_id if scene_id is not None else f"s{seed:08d}",
        points=points,
        camera=scene_camera(config),
        objects=objects,
        label_mask=[True] * len(objects),
    )
    for obj in scene.objects:
        if len(points_in_box(scene.points, obj.box)) < 20:
            raise PlacementFailure(f"object ended up with < 20 interior points (seed={seed})")
        corners = corners_of_box3d(obj.box)
        if np.any(corners < -1e-9) or np.any(corners > ext + 1e-9):
            raise PlacementFailure(f"object box left the scene extent (seed={seed})")
    return scene


# ----------------------------------------------------------------- rendering


def _convex_hull(points_2d: np.ndarray) -> np.ndarray:
    """Andrew monotone chain; returns CCW hull vertices."""
    pts = np.unique(np.round(points_2d, 9), axis=0)
    if len(pts) < 3:
        return pts
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def cross2(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    def half(iterable):
        chain = []
        for p in iterable:
            while len(chain) >= 2 and cross2(chain[-2], chain[-1], p) <= 0:
                chain.pop()
            chain.append(p)
        return chain

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def _fill_hull(canvas: np.ndarray, hull: np.ndarray, color: np.ndarray) -> None:
    if len(hull) < 3:
        return
    h, w = canvas.shape[:2]
    x_lo = max(int(np.floor(hull[:, 0].min() - 0.5)), 0)
    x_hi = min(int(np.ceil(hull[:, 0].max() + 0.5)), w - 1)
    y_lo = max(int(np.floor(hull[:, 1].min() - 0.5)), 0)
    y_hi = min(int(np.ceil(hull[:, 1].max() + 0.5)), h - 1)
    if x_lo > x_hi or y_lo > y_hi:
        return
    xs = np.arange(x_lo, x_hi + 1) + 0.5
    ys = np.arange(y_lo, y_hi + 1) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    inside = np.ones(gx.shape, dtype=bool)
    n = len(hull)
    for i in range(n):
        a, b = hull[i], hull[(i + 1) % n]
        cross = (b[0] - a[0]) * (gy - a[1]) - (b[1] - a[1]) * (gx - a[0])
        inside &= cross >= 0.0
    canvas[y_lo:y_hi + 1, x_lo:x_hi + 1][inside] = color


def _silhouette_parts(obj: SceneObject, shape: str) -> list:
    """World-space point sets whose projected hulls compose the silhouette."""
    box = obj.box
    if shape == "cuboid":
        return [corners_of_box3d(box)]
    rot = yaw_rotation(box.yaw)
    half = box.size / 2.0
    if shape == "cylinder":
        r = min(half[0], half[1])
        theta = np.linspace(0.0, 2 * np.pi, 16, endpoint=False)
        ring = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        local = np.vstack(
            [np.column_stack([ring, np.full(16, z)]) for z in (-half[2], half[2])]
        )
        return [box.center + local @ rot.T]
    parts = []
    for lo, hi in _lshape_blocks(half):
        corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1])
                            for z in (lo[2], hi[2])])
        parts.append(box.center + corners @ rot.T)
    return parts


def render_objects(objects, camera: CameraModel, templates) -> np.ndarray:
    """Painter's-algorithm raster of silhouettes over the flat background."""
    canvas = np.tile(BACKGROUND, (camera.height, camera.width, 1))
    eye = -camera.rotation.T @ camera.translation
    order = sorted(range(len(objects)),
                   key=lambda i: -float(np.linalg.norm(objects[i].box.center - eye)))
    for i in order:
        obj = objects[i]
        template = templates[obj.class_id]
        for part in _silhouette_parts(obj, template.shape):
            cam_pts = camera.world_to_camera(part)
            if np.any(cam_pts[:, 2] <= 0):
                continue
            uv = np.stack(
                [camera.fx * cam_pts[:, 0] / cam_pts[:, 2] + camera.cx,
                 camera.fy * cam_pts[:, 1] / cam_pts[:, 2] + camera.cy], axis=1)
            _fill_hull(canvas, _convex_hull(uv), template.color)
    return canvas


def render_paired_image(scene: Scene, config: dict) -> PairedImage:
    templates = build_templates(int(config["n_classes"]))
    return PairedImage(scene.scene_id, render_objects(scene.objects, scene.camera, templates))


def generate_classification_set(config: dict, seed: int) -> list:
    """Balanced single-object crops with randomized pose, scale and noise."""
    rng = np.random.default_rng(seed)
    templates = build_templates(int(config["n_classes"]))
    crop = int(config["crop_size"])
    per_class = int(config["cls_per_class"])
    samples = []
    for template in templates:
        for _ in range(per_class):
            size = _sample_size(template, rng)
            box = Box3D(np.array([0.0, 0.0, size[2] / 2.0]), size, rng.uniform(-np.pi, np.pi))
            obj = SceneObject(box, template.class_id)
            azimuth = rng.uniform(0, 2 * np.pi)
            elevation = rng.uniform(0.3, 0.8)
            span = float(np.linalg.norm(size))
            distance = span * rng.uniform(0.7, 1.1)
            eye = box.center + distance * np.array(
                [np.cos(azimuth) * np.cos(elevation),
                 np.sin(azimuth) * np.cos(elevation),
                 np.sin(elevation)])
            camera = _make_look_at_camera(eye, box.center, fx_scale=0.9,
                                          width=crop, height=crop)
            pixels = render_objects([obj], camera, templates)
            pixels = np.clip(pixels + rng.uniform(-0.03, 0.03, pixels.shape), 0.0, 1.0)
            samples.append(ClassificationSample(pixels, template.class_id))
    return samples


# ------------------------------------------------------------------- dataset


@dataclass
class DeskDataset:
    scenes: list
    images: list
    cls_samples: list
    split: VocabularySplit
    config: dict


def generate_dataset(config: dict, seed: int) -> DeskDataset:
    """The full paired corpus; scene i uses a derived child seed."""
    split = split_vocabulary(range(int(config["n_classes"])),
                            int(config["n_unseen"]), int(config["vocab_seed"]))
    scenes, images = [], []
    for i in range(int(config["n_scenes"])):
        child = int(np.random.default_rng([seed, i]).integers(2**62))
        scene = generate_scene(config, child, scene_id=f"s{i:05d}")
        scenes.append(scene)
        images.append(render_paired_image(scene, config))
    cls_samples = generate_classification_set(config, seed + 1)
    return DeskDataset(scenes, images, cls_samples, split, dict(config))


# -------------------------------------------------------------------- disk IO

_IMG_MAGIC = b"PVIM"


def write_rawimg(pixels: np.ndarray, path) -> None:
    h, w, c = pixels.shape
    with open(path, "wb") as fh:
        fh.write(_IMG_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(pixels.astype("<f4").tobytes())


def read_rawimg(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != _IMG_MAGIC:
            raise ValueError(f"{path}: not a raw image file")
        h, w, c = struct.unpack("<III", fh.read(12))
        data = np.frombuffer(fh.read(4 * h * w * c), dtype="<f4")
    return data.reshape(h, w, c).astype(float)


def _camera_record(cam: CameraModel) -> dict:
    return {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "rotation": cam.rotation.reshape(-1).tolist(),
        "translation": cam.translation.tolist(),
        "width": cam.width, "height": cam.height,
    }


def _camera_from_record(rec: dict) -> CameraModel:
    return CameraModel(
        fx=rec["fx"], fy=rec["fy"], cx=rec["cx"], cy=rec["cy"],
        rotation=np.array(rec["rotation"]).reshape(3, 3),
        translation=np.array(rec["translation"]),
        width=rec["width"], height=rec["height"],
    )


def scene_to_record(scene: Scene) -> dict:
    return {
        "id": scene.scene_id,
        "camera": _camera_record(scene.camera),
        "objects": [
            {"center": o.box.center.tolist(), "size": o.box.size.tolist(),
             "yaw": o.box.yaw, "class": o.class_id}
            for o in scene.objects
        ],
        "label_mask": [bool(b) for b in scene.label_mask],
        "points_b64": base64.b64encode(scene.points.astype("<f4").tobytes()).decode("ascii"),
    }


def scene_from_record(rec: dict) -> Scene:
    points = np.frombuffer(base64.b64decode(rec["points_b64"]), dtype="<f4")
    return Scene(
        scene_id=rec["id"],
        points=points.reshape(-1, 3).astype(float),
        camera=_camera_from_record(rec["camera"]),
        objects=[
            SceneObject(Box3D(np.array(o["center"]), np.array(o["size"]), o["yaw"]),
                        int(o["class"]))
            for o in rec["objects"]
        ],
        label_mask=list(rec["label_mask"]),
    )


def save_dataset(ds: DeskDataset, out_dir, split_name: str = "train") -> None:
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    (out / "images" / split_name).mkdir(parents=True, exist_ok=True)
    (out / "classification" / split_name).mkdir(parents=True, exist_ok=True)

    with open(out / "scenes" / f"{split_name}.jsonl", "w", encoding="utf-8") as fh:
        for scene in ds.scenes:
            fh.write(json.dumps(scene_to_record(scene), sort_keys=True) + "\n")
    for image in ds.images:
        write_rawimg(image.pixels, out / "images" / split_name / f"{image.scene_id}.rawimg")
    with open(out / "classification" / split_name / "labels.txt", "w", encoding="utf-8") as fh:
        for i, sample in enumerate(ds.cls_samples):
            write_rawimg(sample.pixels,
                         out / "classification" / split_name / f"sample_{i:05d}.rawimg")
            fh.write(f"sample_{i:05d} {sample.class_id}\n")
    with open(out / "split.txt", "w", encoding="utf-8") as fh:
        fh.write("seen: " + " ".join(map(str, sorted(ds.split.seen))) + "\n")
        fh.write("test: " + " ".join(map(str, sorted(ds.split.test))) + "\n")
        fh.write("classification: " + " ".join(map(str, sorted(ds.split.classification))) + "\n")
    with open(out / "config.txt", "w", encoding="utf-8") as fh:
        fh.write(dump_config(ds.config))


def load_split_file(path) -> VocabularySplit:
    groups = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            name, _, rest = line.partition(":")
            groups[name.strip()] = frozenset(int(tok) for tok in rest.split())
    return VocabularySplit(groups["seen"], groups["test"], groups["classification"])


def load_dataset(root, split_name: str = "train") -> DeskDataset:
    root = Path(root)
    config = parse_config_text((root / "config.txt").read_text(encoding="utf-8"))
    scenes = []
    with open(root / "scenes" / f"{split_name}.jsonl", "r", encoding="utf-8") as fh:
        for line in fh:
            scenes.append(scene_from_record(json.loads(line)))
    images = [
        PairedImage(s.scene_id, read_rawimg(root / "images" / split_name / f"{s.scene_id}.rawimg"))
        for s in scenes
    ]
    cls_samples = []
    with open(root / "classification" / split_name / "labels.txt", encoding="utf-8") as fh:
        for line in fh:
            name, cid = line.split()
            pix = read_rawimg(root / "classification" / split_name / f"{name}.rawimg")
            cls_samples.append(ClassificationSample(pix, int(cid)))
    return DeskDataset(scenes, images, cls_samples, load_split_file(root / "split.txt"), config)
