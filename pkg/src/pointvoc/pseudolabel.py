"""Cross-modal pseudo labels: boxes from the 3D detector, classes from the
2D classifier on the cropped paired image, with confidence / duplicate /
empty-box filtering and a growing per-class top-k schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoders import ModelConfig, ParamStore, classify, crop_image, encode_image_roi, \
    forward_detector_3d
from .geometry import AllBehindCamera, Box3D, iou_3d, points_in_box, project_box_to_2d


@dataclass(frozen=True)
class PseudoLabel:
    scene_id: str
    box: Box3D
    class_id: int
    confidence: float  # 3D objectness x 2D class probability
    created_epoch: int


@dataclass(frozen=True)
class ScheduleConfig:
    k0: int = 5
    k_step: int = 2
    period: int = 20
    confidence_floor: float = 0.3
    duplicate_iou: float = 0.25

    def __post_init__(self):
        if self.k0 < 1 or self.period < 1:
            raise ValueError("need k0 >= 1 and period >= 1")

    @classmethod
    def from_config(cls, cfg: dict) -> "ScheduleConfig":
        return cls(k0=int(cfg["k0"]), k_step=int(cfg["k_step"]),
                   period=int(cfg["refresh_period"]),
                   confidence_floor=float(cfg["confidence_floor"]),
                   duplicate_iou=float(cfg["duplicate_iou"]))


def schedule_k(epoch: int, cfg: ScheduleConfig) -> int:
    """Keep count grows linearly: k0 + k_step per elapsed period."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.k0 + cfg.k_step * (epoch // cfg.period)


@dataclass
class PseudoStore:
    records: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def for_scene(self, scene_id: str) -> list:
        return [r for r in self.records if r.scene_id == scene_id]

    def counts_by_class(self) -> dict:
        counts = {}
        for r in self.records:
            counts[r.class_id] = counts.get(r.class_id, 0) + 1
        return counts


def _default_crop_classifier(params: ParamStore, n_classes: int):
    def classify_crop(crop: np.ndarray):
        logits = classify(encode_image_roi(crop, params), params, "cls2d")
        p = np.exp(logits - logits.max())
        p /= p.sum()
        cls = int(np.argmax(p[:n_classes]))
        return cls, float(p[cls])

    return classify_crop


def generate_pseudo_labels(params: ParamStore, scenes, images, split, epoch: int,
                           cfg: ScheduleConfig, mcfg: ModelConfig,
                           classify_crop=None, detector_fn=None) -> PseudoStore:
    """One pass over the corpus; deterministic given its inputs.

    Filter chain per proposal: 3D confidence floor, duplicate-with-seen-GT
    IoU, empty box, projection failure; class must land in test-minus-seen.
    `classify_crop` and `detector_fn` can be substituted by oracles in tests.
    """
    if classify_crop is None:
        classify_crop = _default_crop_classifier(params, mcfg.n_classes)
    if detector_fn is None:
        def detector_fn(scene):
            return forward_detector_3d(scene.points, params, mcfg)
    unseen = split.unseen
    candidates = []
    for s_idx, (scene, image) in enumerate(zip(scenes, images)):
        seen_boxes = [obj.box for obj, vis in zip(scene.objects, scene.label_mask)
                      if vis and obj.class_id in split.seen]
        proposals = detector_fn(scene)
        kept = []
        for q, prop in enumerate(proposals):
            if prop.confidence < cfg.confidence_floor:
                continue
            if any(iou_3d(prop.box, b) >= cfg.duplicate_iou for b in seen_boxes):
                continue
            if len(points_in_box(scene.points, prop.box)) == 0:
                continue
            try:
                rect = project_box_to_2d(prop.box, scene.camera)
            except AllBehindCamera:
                continue
            crop = crop_image(image.pixels, rect)
            cls2d, p2d = classify_crop(crop)
            if cls2d not in unseen:
                continue
            kept.append((prop.confidence * p2d, s_idx, q,
                         PseudoLabel(scene.scene_id, prop.box, cls2d,
                                     prop.confidence * p2d, epoch)))
        # class-agnostic per-scene suppression: one record per physical object
        kept.sort(key=lambda item: (-item[0], item[1], item[2]))
        selected = []
        for conf, _, _, label in kept:
            if all(iou_3d(label.box, s.box) < cfg.duplicate_iou for s in selected):
                selected.append(label)
        candidates.extend(selected)

    k = schedule_k(epoch, cfg)
    store = PseudoStore()
    for cls in sorted(unseen):
        of_class = [c for c in candidates if c.class_id == cls]
        of_class.sort(key=lambda r: (-r.confidence, r.scene_id))
        store.records.extend(of_class[:k])
    return store


def refresh_if_due(epoch: int, cfg: ScheduleConfig, store: PseudoStore | None,
                   regenerate) -> PseudoStore:
    """Regenerate exactly at period boundaries, otherwise pass through."""
    if store is None or epoch % cfg.period == 0:
        return regenerate()
    return store


# ---------------------------------------------------------------- store dump


def save_store(store: PseudoStore, path) -> None:
    """Line format: scene_id class cx cy cz sx sy sz yaw confidence epoch."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in store.records:
            nums = [*r.box.center, *r.box.size, r.box.yaw, r.confidence]
            fh.write(f"{r.scene_id} {r.class_id} "
                     + " ".join(f"{x:.9g}" for x in nums)
                     + f" {r.created_epoch}\n")


def load_store(path) -> PseudoStore:
    store = PseudoStore()
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            scene_id, cls = parts[0], int(parts[1])
            vals = [float(x) for x in parts[2:10]]
            box = Box3D(np.array(vals[0:3]), np.array(vals[3:6]), vals[6])
            store.records.append(
                PseudoLabel(scene_id, box, cls, vals[7], int(parts[10]))
            )
    return store
