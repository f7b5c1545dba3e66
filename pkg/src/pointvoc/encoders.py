"""Toy differentiable networks with hand-derived backward passes.

No autodiff: every layer is a forward/backward pair with an explicit cache,
and `gradient_check` verifies each analytic gradient against central finite
differences. Conventions pinned for reproducibility:

* max-pool routes its gradient to the first argmax index on ties;
* ReLU uses subgradient 0 at exactly 0;
* ROI extraction differentiates through the box-local coordinate transform
  (center, yaw) but not through point membership or nearest-neighbor pixel
  lookup, which are piecewise constant in the box parameters.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Box2D, Box3D, points_in_box, yaw_rotation

MODALITY_PC = "pc"
MODALITY_IMG = "img"

CROP = 32  # fixed ROI crop resolution; image encoders flatten 32*32*3


class EmptyRoi(Exception):
    """Point-cloud ROI with zero points."""


class DegenerateNorm(Exception):
    """Embedding with pre-normalization norm below 1e-12."""


class NonFiniteGradient(Exception):
    """Loss or analytic gradient is NaN/inf."""


@dataclass
class ModelConfig:
    n_classes: int
    scene_extent: np.ndarray
    image_hw: tuple
    queries: int = 8
    feat_dim: int = 64
    embed_dim: int = 32
    point_hidden1: int = 32
    point_hidden2: int = 64
    img_hidden: int = 64
    query_dim: int = 32
    head_hidden: int = 64
    min_box_size: float = 0.05
    roi_dilation: float = 0.25  # per-side slack when gathering ROI points

    @property
    def center_scale(self) -> np.ndarray:
        # objects keep their centers in the lower half of the room, so the
        # z decode uses half the extent; keeps the sigmoid out of its tails
        return self.scene_extent * np.array([1.0, 1.0, 0.5])

    @property
    def n_logits(self) -> int:
        return self.n_classes + 1  # background appended last

    @property
    def background(self) -> int:
        return self.n_classes

    @classmethod
    def from_config(cls, cfg: dict) -> "ModelConfig":
        return cls(
            n_classes=int(cfg["n_classes"]),
            scene_extent=np.array([cfg["scene_extent_x"], cfg["scene_extent_y"],
                                   cfg["scene_extent_z"]]),
            image_hw=(int(cfg["image_size"]), int(cfg["image_size"])),
            queries=int(cfg["queries"]),
            feat_dim=int(cfg["feat_dim"]),
            embed_dim=int(cfg["embed_dim"]),
            point_hidden1=int(cfg["point_hidden1"]),
            point_hidden2=int(cfg["point_hidden2"]),
            img_hidden=int(cfg["img_hidden"]),
            query_dim=int(cfg["query_dim"]),
            head_hidden=int(cfg["head_hidden"]),
            min_box_size=float(cfg["min_box_size"]),
            roi_dilation=float(cfg["roi_dilation"]),
        )


@dataclass(frozen=True)
class RoiFeature:
    vector: np.ndarray
    modality: str
    anchor: np.ndarray | None = None  # 3D box center; None for corpus samples


@dataclass(frozen=True)
class EmbeddingVector:
    vector: np.ndarray  # unit norm
    label: int
    modality: str
    anchor: np.ndarray | None = None


@dataclass(frozen=True)
class Proposal:
    box: object  # Box3D or Box2D
    logits: np.ndarray
    confidence: float
    feature: RoiFeature


class ParamStore:
    """Named dense float64 tensors; insertion order is the canonical order."""

    def __init__(self, tensors: dict | None = None):
        self.tensors = dict(tensors) if tensors else {}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self):
        return list(self.tensors.keys())

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())


def _glorot(rng, shape) -> np.ndarray:
    fan_out, fan_in = (shape[0], shape[1]) if len(shape) == 2 else (shape[0], shape[0])
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(mcfg: ModelConfig, seed: int) -> ParamStore:
    rng = np.random.default_rng(seed)
    h1, h2 = mcfg.point_hidden1, mcfg.point_hidden2
    d, dh = mcfg.feat_dim, mcfg.embed_dim
    hi = mcfg.img_hidden
    flat = CROP * CROP * 3
    qd, hh = mcfg.query_dim, mcfg.head_hidden
    spec = [
        # shared-MLP point encoders: ROI one and the detector trunk
        ("pt_roi.l1.w", (h1, 3)), ("pt_roi.l1.b", (h1,)),
        ("pt_roi.l2.w", (h2, h1)), ("pt_roi.l2.b", (h2,)),
        ("pt_roi.out.w", (d, h2)), ("pt_roi.out.b", (d,)),
        ("pt_trunk.l1.w", (h1, 3)), ("pt_trunk.l1.b", (h1,)),
        ("pt_trunk.l2.w", (h2, h1)), ("pt_trunk.l2.b", (h2,)),
        ("pt_trunk.out.w", (d, h2)), ("pt_trunk.out.b", (d,)),
        # image encoders: ROI crop one and the detector trunk
        ("img_roi.l1.w", (hi, flat)), ("img_roi.l1.b", (hi,)),
        ("img_roi.l2.w", (d, hi)), ("img_roi.l2.b", (d,)),
        ("img_trunk.l1.w", (hi, flat)), ("img_trunk.l1.b", (hi,)),
        ("img_trunk.l2.w", (d, hi)), ("img_trunk.l2.b", (d,)),
        # set-prediction heads
        ("det3d.queries", (mcfg.queries, qd)),
        ("det3d.head.l1.w", (hh, d + qd)), ("det3d.head.l1.b", (hh,)),
        ("det3d.head.out.w", (7, hh)), ("det3d.head.out.b", (7,)),
        ("det2d.queries", (mcfg.queries, qd)),
        ("det2d.head.l1.w", (hh, d + qd)), ("det2d.head.l1.b", (hh,)),
        ("det2d.head.out.w", (4, hh)), ("det2d.head.out.b", (4,)),
        # classifiers and contrastive projections
        ("cls3d.w", (mcfg.n_logits, d)), ("cls3d.b", (mcfg.n_logits,)),
        ("cls2d.w", (mcfg.n_logits, d)), ("cls2d.b", (mcfg.n_logits,)),
        ("proj3d.w", (dh, d)),
        ("proj2d.w", (dh, d)),
    ]
    params = ParamStore()
    for name, shape in spec:
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        elif name.endswith(".queries"):
            # wide uniform init: queries must differ enough at the start for
            # Hungarian matching to specialize them, or they collapse
            params[name] = rng.uniform(-1.0, 1.0, size=shape)
        else:
            params[name] = _glorot(rng, shape)
    return params


# ------------------------------------------------------------- primitives


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _relu(x):
    return np.maximum(x, 0.0)


# -------------------------------------------------- point-set encoder


def _point_encoder_fwd(points: np.ndarray, params: ParamStore, prefix: str):
    """Shared per-point MLP -> coordinate-wise max pool -> linear."""
    z1 = _relu(points @ params[f"{prefix}.l1.w"].T + params[f"{prefix}.l1.b"])
    z2 = _relu(z1 @ params[f"{prefix}.l2.w"].T + params[f"{prefix}.l2.b"])
    pool_idx = np.argmax(z2, axis=0)  # first argmax on ties
    pooled = z2[pool_idx, np.arange(z2.shape[1])]
    feat = params[f"{prefix}.out.w"] @ pooled + params[f"{prefix}.out.b"]
    cache = {"points": points, "z1": z1, "z2": z2, "idx": pool_idx, "pooled": pooled}
    return feat, cache


def _point_encoder_bwd(dfeat, cache, params: ParamStore, grads: dict, prefix: str):
    """Returns the gradient w.r.t. the input points."""
    pooled = cache["pooled"]
    grads[f"{prefix}.out.w"] += np.outer(dfeat, pooled)
    grads[f"{prefix}.out.b"] += dfeat
    dpooled = params[f"{prefix}.out.w"].T @ dfeat
    z2 = cache["z2"]
    dz2 = np.zeros_like(z2)
    cols = np.arange(z2.shape[1])
    dz2[cache["idx"], cols] = dpooled * (pooled > 0.0)
    z1 = cache["z1"]
    grads[f"{prefix}.l2.w"] += dz2.T @ z1
    grads[f"{prefix}.l2.b"] += dz2.sum(axis=0)
    dz1 = (dz2 @ params[f"{prefix}.l2.w"]) * (z1 > 0.0)
    points = cache["points"]
    grads[f"{prefix}.l1.w"] += dz1.T @ points
    grads[f"{prefix}.l1.b"] += dz1.sum(axis=0)
    return dz1 @ params[f"{prefix}.l1.w"]


def encode_pointcloud_roi(points: np.ndarray, params: ParamStore,
                          anchor: np.ndarray | None = None) -> RoiFeature:
    """ROI feature of box-local points; permutation invariant by max pooling."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        raise EmptyRoi("point-cloud ROI needs at least one point")
    feat, _ = _point_encoder_fwd(points, params, "pt_roi")
    return RoiFeature(feat, MODALITY_PC, anchor)


# Detector-side ROI encoding adds a boundary window so the feature varies
# continuously as the predicted box sweeps across points: each point's
# activations are scaled by a ramp over its margin to the dilated gather
# boundary (0 at the boundary, 1 once `_ROI_TAPER` inside). Points entering
# or leaving the gather set therefore carry zero weight at the crossover.
_ROI_TAPER = 0.1  # meters


def _roi_encode_fwd(local: np.ndarray, half_ext: np.ndarray, params: ParamStore,
                    prefix: str):
    z1 = _relu(local @ params[f"{prefix}.l1.w"].T + params[f"{prefix}.l1.b"])
    z2 = _relu(z1 @ params[f"{prefix}.l2.w"].T + params[f"{prefix}.l2.b"])
    dist = half_ext[None, :] - np.abs(local)  # (K, 3) margins per axis
    axis = np.argmin(dist, axis=1)
    margin = dist[np.arange(len(local)), axis]
    weight = np.clip(margin / _ROI_TAPER, 0.0, 1.0)
    weighted = z2 * weight[:, None]
    pool_idx = np.argmax(weighted, axis=0)
    pooled = weighted[pool_idx, np.arange(weighted.shape[1])]
    feat = params[f"{prefix}.out.w"] @ pooled + params[f"{prefix}.out.b"]
    cache = {"local": local, "z1": z1, "z2": z2, "axis": axis, "margin": margin,
             "weight": weight, "idx": pool_idx, "pooled": pooled}
    return feat, cache


def _roi_encode_bwd(dfeat, cache, params: ParamStore, grads: dict, prefix: str):
    """Returns (d local_points, d half_extents)."""
    pooled = cache["pooled"]
    grads[f"{prefix}.out.w"] += np.outer(dfeat, pooled)
    grads[f"{prefix}.out.b"] += dfeat
    dpooled = params[f"{prefix}.out.w"].T @ dfeat

    z2, weight = cache["z2"], cache["weight"]
    idx = cache["idx"]
    cols = np.arange(z2.shape[1])
    dz2 = np.zeros_like(z2)
    dz2[idx, cols] = dpooled * weight[idx] * (z2[idx, cols] > 0.0)
    dweight = np.zeros(len(weight))
    np.add.at(dweight, idx, dpooled * z2[idx, cols])

    z1 = cache["z1"]
    grads[f"{prefix}.l2.w"] += dz2.T @ z1
    grads[f"{prefix}.l2.b"] += dz2.sum(axis=0)
    dz1 = (dz2 @ params[f"{prefix}.l2.w"]) * (z1 > 0.0)
    local = cache["local"]
    grads[f"{prefix}.l1.w"] += dz1.T @ local
    grads[f"{prefix}.l1.b"] += dz1.sum(axis=0)
    dlocal = dz1 @ params[f"{prefix}.l1.w"]

    # window ramp: w = margin / taper inside (0, taper), constant elsewhere
    margin = cache["margin"]
    ramp = (margin > 0.0) & (margin < _ROI_TAPER)
    dmargin = np.where(ramp, dweight / _ROI_TAPER, 0.0)
    axis = cache["axis"]
    rows = np.arange(len(local))
    dhalf = np.zeros(3)
    np.add.at(dhalf, axis, dmargin)
    dlocal[rows, axis] += dmargin * (-np.sign(local[rows, axis]))
    return dlocal, dhalf


# -------------------------------------------------- image encoder


def resample_to_crop(image: np.ndarray, out: int = CROP) -> np.ndarray:
    """Nearest-neighbor resample of an (h, w, 3) array to (out, out, 3)."""
    h, w = image.shape[:2]
    if (h, w) == (out, out):
        return image
    iy = np.minimum((((np.arange(out) + 0.5) * h / out)).astype(int), h - 1)
    ix = np.minimum((((np.arange(out) + 0.5) * w / out)).astype(int), w - 1)
    return image[iy][:, ix]


def crop_image(image: np.ndarray, box: Box2D, out: int = CROP) -> np.ndarray:
    """Nearest-neighbor crop of a pixel rectangle; empty rectangles give zeros."""
    h, w = image.shape[:2]
    clipped = box.clipped(w, h)
    x0, y0 = clipped.lo
    x1, y1 = clipped.hi
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        return np.zeros((out, out, 3))
    sx = np.clip((x0 + (np.arange(out) + 0.5) * (x1 - x0) / out).astype(int), 0, w - 1)
    sy = np.clip((y0 + (np.arange(out) + 0.5) * (y1 - y0) / out).astype(int), 0, h - 1)
    return image[np.ix_(sy, sx)]


def _image_encoder_fwd(crop: np.ndarray, params: ParamStore, prefix: str):
    v = crop.reshape(-1)
    z1 = _relu(params[f"{prefix}.l1.w"] @ v + params[f"{prefix}.l1.b"])
    feat = params[f"{prefix}.l2.w"] @ z1 + params[f"{prefix}.l2.b"]
    return feat, {"v": v, "z1": z1}


def _image_encoder_bwd(dfeat, cache, params: ParamStore, grads: dict, prefix: str):
    z1 = cache["z1"]
    grads[f"{prefix}.l2.w"] += np.outer(dfeat, z1)
    grads[f"{prefix}.l2.b"] += dfeat
    dz1 = (params[f"{prefix}.l2.w"].T @ dfeat) * (z1 > 0.0)
    grads[f"{prefix}.l1.w"] += np.outer(dz1, cache["v"])
    grads[f"{prefix}.l1.b"] += dz1
    return params[f"{prefix}.l1.w"].T @ dz1


def encode_image_roi(crop: np.ndarray, params: ParamStore,
                     anchor: np.ndarray | None = None) -> RoiFeature:
    """Flatten -> 2-layer MLP; crops are NN-resampled to the fixed resolution."""
    crop = resample_to_crop(np.asarray(crop, dtype=float))
    feat, _ = _image_encoder_fwd(crop, params, "img_roi")
    return RoiFeature(feat, MODALITY_IMG, anchor)


# -------------------------------------------------- heads


def classify(feature: RoiFeature | np.ndarray, params: ParamStore,
             head: str = "cls3d") -> np.ndarray:
    """Affine classifier; the softmax lives in the losses."""
    vec = feature.vector if isinstance(feature, RoiFeature) else np.asarray(feature)
    return params[f"{head}.w"] @ vec + params[f"{head}.b"]


def _classify_bwd(dlogits, vec, params: ParamStore, grads: dict, head: str):
    grads[f"{head}.w"] += np.outer(dlogits, vec)
    grads[f"{head}.b"] += dlogits
    return params[f"{head}.w"].T @ dlogits


def _l2_normalize_fwd(x: np.ndarray):
    norm = float(np.linalg.norm(x))
    if norm < 1e-12:
        raise DegenerateNorm(f"pre-normalization norm {norm:.3e} < 1e-12")
    return x / norm, norm


def _l2_normalize_bwd(dh, h, norm):
    # Jacobian of x/|x|: (I - h h^T) / |x|
    return (dh - h * float(h @ dh)) / norm


def project_and_normalize(feature: RoiFeature, params: ParamStore,
                          label: int = -1, head: str = "proj3d") -> EmbeddingVector:
    raw = params[f"{head}.w"] @ feature.vector
    unit, _ = _l2_normalize_fwd(raw)
    return EmbeddingVector(unit, label, feature.modality, feature.anchor)


def _projection_fwd(vec: np.ndarray, params: ParamStore, head: str):
    raw = params[f"{head}.w"] @ vec
    unit, norm = _l2_normalize_fwd(raw)
    return unit, {"vec": vec, "unit": unit, "norm": norm}


def _projection_bwd(dunit, cache, params: ParamStore, grads: dict, head: str):
    draw = _l2_normalize_bwd(dunit, cache["unit"], cache["norm"])
    grads[f"{head}.w"] += np.outer(draw, cache["vec"])
    return params[f"{head}.w"].T @ draw


# -------------------------------------------------- MLP head helper


def _head_fwd(x: np.ndarray, params: ParamStore, prefix: str):
    z1 = _relu(params[f"{prefix}.l1.w"] @ x + params[f"{prefix}.l1.b"])
    out = params[f"{prefix}.out.w"] @ z1 + params[f"{prefix}.out.b"]
    return out, {"x": x, "z1": z1}


def _head_bwd(dout, cache, params: ParamStore, grads: dict, prefix: str):
    z1 = cache["z1"]
    grads[f"{prefix}.out.w"] += np.outer(dout, z1)
    grads[f"{prefix}.out.b"] += dout
    dz1 = (params[f"{prefix}.out.w"].T @ dout) * (z1 > 0.0)
    grads[f"{prefix}.l1.w"] += np.outer(dz1, cache["x"])
    grads[f"{prefix}.l1.b"] += dz1
    return params[f"{prefix}.l1.w"].T @ dz1


def _confidence(logits: np.ndarray, n_classes: int) -> float:
    p = np.exp(logits - logits.max())
    p /= p.sum()
    return float(p[:n_classes].max())


# -------------------------------------------------- 3D detector


def detector3d_forward(points: np.ndarray, params: ParamStore, mcfg: ModelConfig):
    """Q proposals from the scene point cloud, plus the backward cache."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    # extent-normalized trunk input keeps the first-layer hyperplanes well
    # conditioned; gradients never flow back into raw point coordinates here
    normed = points * (2.0 / mcfg.scene_extent) - 1.0
    g, trunk_cache = _point_encoder_fwd(normed, params, "pt_trunk")
    proposals, qcaches = [], []
    for q in range(mcfg.queries):
        x = np.concatenate([g, params["det3d.queries"][q]])
        out, head_cache = _head_fwd(x, params, "det3d.head")
        sig_c = _sigmoid(out[:3])
        center = sig_c * mcfg.center_scale
        sig_s = _sigmoid(out[3:6])
        size = _softplus(out[3:6]) + mcfg.min_box_size
        th = np.tanh(out[6])
        yaw = np.pi * th
        box = Box3D(center, size, yaw)
        # slightly dilated gather: near-miss boxes still see the object's
        # points, which keeps classification and the box-chain gradient alive
        half_ext = size / 2.0 + mcfg.roi_dilation
        gather = Box3D(center, 2.0 * half_ext, yaw)
        mask = points_in_box(points, gather)
        if len(mask) == 0:
            feat = np.zeros(mcfg.feat_dim)
            roi_cache = None
            confidence = 0.0
            logits = classify(feat, params, "cls3d")
        else:
            local = (points[mask] - center) @ yaw_rotation(yaw)
            feat, enc_cache = _roi_encode_fwd(local, half_ext, params, "pt_roi")
            roi_cache = {"mask": mask, "enc": enc_cache, "rel": points[mask] - center,
                         "half_ext": half_ext}
            logits = classify(feat, params, "cls3d")
            confidence = _confidence(logits, mcfg.n_classes)
        proposals.append(
            Proposal(box, logits, confidence, RoiFeature(feat, MODALITY_PC, center.copy()))
        )
        qcaches.append({
            "head": head_cache, "sig_c": sig_c, "sig_s": sig_s, "th": th,
            "box": box, "roi": roi_cache, "feat": feat,
        })
    cache = {"trunk": trunk_cache, "g": g, "queries": qcaches, "points": points}
    return proposals, cache


def detector3d_backward(dper_query: list, cache: dict, params: ParamStore,
                        grads: dict, mcfg: ModelConfig) -> None:
    """dper_query[q]: optional 'logits' (C+1,), 'feat' (D,), 'center', 'size', 'yaw'."""
    ext = mcfg.center_scale
    dg_total = np.zeros(mcfg.feat_dim)
    for q, dq in enumerate(dper_query):
        qc = cache["queries"][q]
        if dq is None:
            continue
        dfeat = np.zeros(mcfg.feat_dim)
        if "logits" in dq:
            dfeat += _classify_bwd(dq["logits"], qc["feat"], params, grads, "cls3d")
        if "feat" in dq:
            dfeat += dq["feat"]
        dcenter = np.array(dq.get("center", np.zeros(3)), dtype=float).copy()
        dsize = np.array(dq.get("size", np.zeros(3)), dtype=float).copy()
        dyaw = float(dq.get("yaw", 0.0))
        if qc["roi"] is not None and np.any(dfeat != 0.0):
            dlocal, dhalf = _roi_encode_bwd(dfeat, qc["roi"]["enc"], params, grads,
                                            "pt_roi")
            box = qc["box"]
            rot = yaw_rotation(box.yaw)
            # local = (p - c) @ R  =>  d c = -(sum_k dlocal_k) @ R^T
            dcenter += -(dlocal.sum(axis=0) @ rot.T)
            c, s = np.cos(box.yaw), np.sin(box.yaw)
            drot = np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])
            dyaw += float(np.sum(dlocal * (qc["roi"]["rel"] @ drot)))
            dsize += 0.5 * dhalf  # gather half-extents are size/2 + dilation
        dout = np.empty(7)
        dout[:3] = dcenter * ext * qc["sig_c"] * (1.0 - qc["sig_c"])
        dout[3:6] = dsize * qc["sig_s"]  # softplus' = sigmoid
        dout[6] = dyaw * np.pi * (1.0 - qc["th"] ** 2)
        dx = _head_bwd(dout, qc["head"], params, grads, "det3d.head")
        dg_total += dx[: mcfg.feat_dim]
        grads["det3d.queries"][q] += dx[mcfg.feat_dim:]
    if np.any(dg_total != 0.0):
        _point_encoder_bwd(dg_total, cache["trunk"], params, grads, "pt_trunk")


def forward_detector_3d(points: np.ndarray, params: ParamStore,
                        mcfg: ModelConfig) -> list:
    proposals, _ = detector3d_forward(points, params, mcfg)
    return proposals


# -------------------------------------------------- 2D detector


def detector2d_forward(image: np.ndarray, params: ParamStore, mcfg: ModelConfig):
    """Q proposals with pixel-space 2D boxes decoded from [0,1]^2 outputs.

    All per-query work is batched into single matmuls; the math matches the
    per-query formulation exactly (summation order aside).
    """
    image = np.asarray(image, dtype=float)
    h_img, w_img = image.shape[:2]
    small = resample_to_crop(image)
    g, trunk_cache = _image_encoder_fwd(small, params, "img_trunk")

    queries = params["det2d.queries"]
    x_mat = np.concatenate(
        [np.broadcast_to(g, (mcfg.queries, mcfg.feat_dim)), queries], axis=1)
    z1_mat = _relu(x_mat @ params["det2d.head.l1.w"].T + params["det2d.head.l1.b"])
    out_mat = z1_mat @ params["det2d.head.out.w"].T + params["det2d.head.out.b"]
    sig_mat = _sigmoid(out_mat)
    scale = np.array([w_img, h_img, w_img, h_img])

    boxes, crops = [], []
    for q in range(mcfg.queries):
        cx, cy, bw, bh = sig_mat[q] * scale
        box = Box2D([cx - bw / 2.0, cy - bh / 2.0], [cx + bw / 2.0, cy + bh / 2.0])
        boxes.append(box)
        crops.append(crop_image(image, box))
    v_mat = np.stack([c.reshape(-1) for c in crops])
    rz1_mat = _relu(v_mat @ params["img_roi.l1.w"].T + params["img_roi.l1.b"])
    feat_mat = rz1_mat @ params["img_roi.l2.w"].T + params["img_roi.l2.b"]
    logits_mat = feat_mat @ params["cls2d.w"].T + params["cls2d.b"]

    proposals, qcaches = [], []
    for q in range(mcfg.queries):
        logits = logits_mat[q]
        proposals.append(
            Proposal(boxes[q], logits, _confidence(logits, mcfg.n_classes),
                     RoiFeature(feat_mat[q], MODALITY_IMG, None))
        )
        qcaches.append({"sig": sig_mat[q], "feat": feat_mat[q],
                        "enc": {"v": v_mat[q], "z1": rz1_mat[q]}})
    cache = {
        "trunk": trunk_cache, "g": g, "queries": qcaches, "hw": (h_img, w_img),
        "x_mat": x_mat, "z1_mat": z1_mat, "v_mat": v_mat, "rz1_mat": rz1_mat,
        "feat_mat": feat_mat,
    }
    return proposals, cache


def detector2d_backward(dper_query: list, cache: dict, params: ParamStore,
                        grads: dict, mcfg: ModelConfig) -> None:
    """dper_query[q]: optional 'logits', 'feat', 'corners' (x0, y0, x1, y1)."""
    h_img, w_img = cache["hw"]
    n_q = mcfg.queries
    dlogits = np.zeros((n_q, mcfg.n_logits))
    dfeat = np.zeros((n_q, mcfg.feat_dim))
    dout = np.zeros((n_q, 4))
    for q, dq in enumerate(dper_query):
        if dq is None:
            continue
        if "logits" in dq:
            dlogits[q] = dq["logits"]
        if "feat" in dq:
            dfeat[q] += dq["feat"]
        if "corners" in dq:
            dx0, dy0, dx1, dy1 = dq["corners"]
            sig = cache["queries"][q]["sig"]
            dout[q] = np.array([
                (dx0 + dx1) * w_img,
                (dy0 + dy1) * h_img,
                (dx1 - dx0) / 2.0 * w_img,
                (dy1 - dy0) / 2.0 * h_img,
            ]) * sig * (1.0 - sig)

    # classifier and ROI encoder, batched over queries
    if np.any(dlogits != 0.0) or np.any(dfeat != 0.0):
        grads["cls2d.w"] += dlogits.T @ cache["feat_mat"]
        grads["cls2d.b"] += dlogits.sum(axis=0)
        dfeat = dfeat + dlogits @ params["cls2d.w"]
        # crop content is piecewise constant in the box -> no corner grads
        grads["img_roi.l2.w"] += dfeat.T @ cache["rz1_mat"]
        grads["img_roi.l2.b"] += dfeat.sum(axis=0)
        drz1 = (dfeat @ params["img_roi.l2.w"]) * (cache["rz1_mat"] > 0.0)
        grads["img_roi.l1.w"] += drz1.T @ cache["v_mat"]
        grads["img_roi.l1.b"] += drz1.sum(axis=0)

    # box head, batched
    if np.any(dout != 0.0):
        grads["det2d.head.out.w"] += dout.T @ cache["z1_mat"]
        grads["det2d.head.out.b"] += dout.sum(axis=0)
        dz1 = (dout @ params["det2d.head.out.w"]) * (cache["z1_mat"] > 0.0)
        grads["det2d.head.l1.w"] += dz1.T @ cache["x_mat"]
        grads["det2d.head.l1.b"] += dz1.sum(axis=0)
        dx_mat = dz1 @ params["det2d.head.l1.w"]
        grads["det2d.queries"] += dx_mat[:, mcfg.feat_dim:]
        dg_total = dx_mat[:, : mcfg.feat_dim].sum(axis=0)
        if np.any(dg_total != 0.0):
            _image_encoder_bwd(dg_total, cache["trunk"], params, grads, "img_trunk")


def forward_detector_2d(image: np.ndarray, params: ParamStore,
                        mcfg: ModelConfig) -> list:
    proposals, _ = detector2d_forward(image, params, mcfg)
    return proposals


# -------------------------------------------------- finite differences


def gradient_check(loss_fn, params: ParamStore, epsilon: float = 1e-6,
                   coords_per_tensor: int = 50, seed: int = 0,
                   tensor_names: list | None = None) -> float:
    """Max relative error between analytic gradients and central differences.

    `loss_fn(params, with_grads)` returns (loss, grads-or-None). At least
    `coords_per_tensor` coordinates are sampled per tensor (all of them for
    small tensors).
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-6, 1e-3]")
    loss0, grads = loss_fn(params, True)
    if not np.isfinite(loss0):
        raise NonFiniteGradient(f"loss is not finite: {loss0}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"gradient of {name} is not finite")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in (tensor_names if tensor_names is not None else params.names()):
        tensor = params[name]
        k = min(coords_per_tensor, tensor.size)
        coords = rng.choice(tensor.size, size=k, replace=False)
        for flat in coords:
            orig = tensor.flat[flat]
            tensor.flat[flat] = orig + epsilon
            plus, _ = loss_fn(params, False)
            tensor.flat[flat] = orig - epsilon
            minus, _ = loss_fn(params, False)
            tensor.flat[flat] = orig
            fd = (plus - minus) / (2.0 * epsilon)
            rel = abs(grads[name].flat[flat] - fd) / max(1e-8, abs(fd))
            worst = max(worst, rel)
    return worst


# -------------------------------------------------- checkpoints

_CKPT_MAGIC = b"PVCK"
_CKPT_VERSION = 1


def save_checkpoint(params: ParamStore, path) -> None:
    """Atomic write; tensors sorted by name, float32 little-endian payload."""
    path = Path(path)
    blob = bytearray()
    names = sorted(params.names())
    blob += _CKPT_MAGIC
    blob += struct.pack("<II", _CKPT_VERSION, len(names))
    for name in names:
        data = params[name]
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded)) + encoded
        blob += struct.pack("<I", data.ndim)
        blob += struct.pack(f"<{data.ndim}I", *data.shape)
        blob += data.astype("<f4").tobytes()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
    tmp.replace(path)


def load_checkpoint(path) -> ParamStore:
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        params = ParamStore()
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(4 * n), dtype="<f4")
            params[name] = data.reshape(shape).astype(float)
    return params
