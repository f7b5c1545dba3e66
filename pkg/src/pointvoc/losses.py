"""Training objectives: set matching, box/classification terms, the debiased
cross-modal contrastive loss with distance-aware temperature, and the
two-phase loss assemblies.

Sum conventions, pinned once so tests can rely on them:

* box terms average over matched (proposal, target) pairs, weighted by the
  per-record loss weight (pseudo records default to weight 1);
* classification terms average over all proposals, background-class targets
  for unmatched proposals down-weighted by `background_weight`;
* the contrastive term averages over anchors that have at least one positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import (
    AllBehindCamera,
    Box2D,
    Box3D,
    project_box_to_2d,
    wrap_angle,
    yaw_rotation,
)
from . import encoders
from .encoders import (
    MODALITY_IMG,
    MODALITY_PC,
    ModelConfig,
    ParamStore,
    _image_encoder_bwd,
    _image_encoder_fwd,
    _point_encoder_bwd,
    _point_encoder_fwd,
    _roi_encode_bwd,
    _roi_encode_fwd,
    _projection_bwd,
    _projection_fwd,
    detector2d_backward,
    detector2d_forward,
    detector3d_backward,
    detector3d_forward,
)


class NoPositives(Exception):
    """Contrastive batch without a single positive pair."""


@dataclass(frozen=True)
class SupervisionRecord:
    box: Box3D
    class_id: int
    origin: str = "gt"  # "gt" or "pseudo"


@dataclass(frozen=True)
class ContrastiveConfig:
    tau0: float = 0.2
    gamma: float = 1.1
    cross_dataset_distance: float = 1.0

    def __post_init__(self):
        if self.tau0 <= 0 or self.gamma < 1.0:
            raise ValueError("need tau0 > 0 and gamma >= 1")

    def temperature(self, dist: float) -> float:
        return self.tau0 * self.gamma ** dist


@dataclass
class ContrastiveBatch:
    embeddings: np.ndarray  # (M, Dh) unit rows
    labels: np.ndarray  # (M,)
    anchors: np.ndarray  # (M, 3); rows are ignored where has_anchor is False
    has_anchor: np.ndarray  # (M,) bool

    def __post_init__(self):
        if len(self.embeddings) < 2:
            raise ValueError("contrastive batch needs M >= 2")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise ValueError("embeddings must be unit norm")

    @classmethod
    def from_embeddings(cls, embeddings) -> "ContrastiveBatch":
        vecs = np.stack([e.vector for e in embeddings])
        labels = np.array([e.label for e in embeddings])
        anchors = np.zeros((len(embeddings), 3))
        has = np.zeros(len(embeddings), dtype=bool)
        for i, e in enumerate(embeddings):
            if e.anchor is not None:
                anchors[i] = e.anchor
                has[i] = True
        return cls(vecs, labels, anchors, has)


@dataclass(frozen=True)
class LossConfig:
    background_weight: float = 0.2
    pseudo_loss_weight: float = 1.0
    contrastive_mode: str = "class"  # off | augmentation | position | class
    distance_temp: bool = True
    contrastive_weight: float = 1.0


# ------------------------------------------------------------------ matching


def hungarian_match(cost: np.ndarray) -> np.ndarray:
    """Min-cost injective assignment; entry g is the proposal index for GT g.

    Requires at least as many proposals (rows) as ground truths (columns).
    """
    cost = np.asarray(cost, dtype=float)
    q, g = cost.shape
    if q < g:
        raise ValueError(f"need Q >= G, got Q={q}, G={g}")
    rows, cols = linear_sum_assignment(cost)
    out = np.empty(g, dtype=int)
    out[cols] = rows
    return out


# ------------------------------------------------------------------ leaf losses


def loss_cls(logits: np.ndarray, target: int, n_classes: int | None = None):
    """Softmax cross-entropy; gradient is softmax minus one-hot."""
    logits = np.asarray(logits, dtype=float)
    if n_classes is not None and not 0 <= target < n_classes:
        raise ValueError(f"target {target} outside vocabulary of size {n_classes}")
    shifted = logits - logits.max()
    logsumexp = float(np.log(np.sum(np.exp(shifted))))
    loss = logsumexp - float(shifted[target])
    grad = np.exp(shifted - logsumexp)
    grad[target] -= 1.0
    return loss, grad


def loss_box_3d(pred: Box3D, gt: Box3D, extent: np.ndarray):
    """L1 on extent-normalized center + L1 on log-size ratio + periodic yaw.

    Gradients returned for the predicted (center, size, yaw).
    """
    extent = np.asarray(extent, dtype=float)
    dc = pred.center - gt.center
    center_term = float(np.sum(np.abs(dc) / extent))
    log_ratio = np.log(pred.size / gt.size)
    size_term = float(np.sum(np.abs(log_ratio)))
    dyaw = wrap_angle(pred.yaw - gt.yaw)
    yaw_term = abs(dyaw) / np.pi
    loss = center_term + size_term + yaw_term
    grads = {
        "center": np.sign(dc) / extent,
        "size": np.sign(log_ratio) / pred.size,
        "yaw": float(np.sign(dyaw)) / np.pi,
    }
    return loss, grads


def _corners(box: Box2D) -> np.ndarray:
    return np.array([box.lo[0], box.lo[1], box.hi[0], box.hi[1]])


def loss_box_2d(pred: Box2D, gt: Box2D, image_hw: tuple):
    """L1 on size-normalized corners plus (1 - IoU); grads w.r.t. pred corners."""
    h, w = image_hw
    scale = np.array([w, h, w, h], dtype=float)
    p, g = _corners(pred), _corners(gt)
    l1 = float(np.sum(np.abs(p - g) / scale))
    grad = np.sign(p - g) / scale

    ix0, iy0 = max(p[0], g[0]), max(p[1], g[1])
    ix1, iy1 = min(p[2], g[2]), min(p[3], g[3])
    iw, ih = ix1 - ix0, iy1 - iy0
    if iw > 0 and ih > 0:
        inter = iw * ih
        area_p = (p[2] - p[0]) * (p[3] - p[1])
        area_g = (g[2] - g[0]) * (g[3] - g[1])
        union = area_p + area_g - inter
        iou = inter / union
        # d(inter)/d(pred corner): active only where the pred corner binds
        dI = np.array([
            -ih if p[0] > g[0] else 0.0,
            -iw if p[1] > g[1] else 0.0,
            ih if p[2] < g[2] else 0.0,
            iw if p[3] < g[3] else 0.0,
        ])
        dA = np.array([-(p[3] - p[1]), -(p[2] - p[0]), p[3] - p[1], p[2] - p[0]])
        dU = dA - dI
        diou = (dI * union - inter * dU) / union**2
        loss = l1 + (1.0 - iou)
        grad = grad - diou
    else:
        loss = l1 + 1.0  # disjoint: IoU term saturates with zero gradient
    return loss, grad


def max_size_index(proposals) -> int:
    """Index of the largest predicted box; ties go to the lowest index."""
    areas = np.array([p.box.area for p in proposals])
    return int(np.argmax(areas))


def loss_max_size_ign(proposals, label: int):
    """Detic-style image-level loss on the max-size proposal only."""
    if len(proposals) == 0:
        raise ValueError("need at least one proposal")
    idx = max_size_index(proposals)
    loss, dlogits = loss_cls(proposals[idx].logits, label)
    grads = [np.zeros_like(p.logits) for p in proposals]
    grads[idx] = dlogits
    return loss, grads


# ------------------------------------------------------------------ DECC


def pair_distances(batch: ContrastiveBatch, cfg: ContrastiveConfig) -> np.ndarray:
    """Euclidean anchor distances; the configured constant when either side
    comes from the classification corpus (no 3D anchor)."""
    m = len(batch.embeddings)
    diff = batch.anchors[:, None, :] - batch.anchors[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    both = batch.has_anchor[:, None] & batch.has_anchor[None, :]
    return np.where(both, dist, cfg.cross_dataset_distance)


def loss_decc(batch: ContrastiveBatch, cfg: ContrastiveConfig):
    """Debiased cross-modal contrastive loss with distance-aware temperature.

    For each anchor i with positives P(i) = {t != i : label_t == label_i}:

        term_i = -log( sum_{t in P(i)} exp(h_i.h_t / tau(dist_it))
                       / sum_{j != i} exp(h_i.h_j / tau0) )

    averaged over anchors with P(i) non-empty. Gradients are returned w.r.t.
    the unit embeddings; normalization Jacobians are the caller's job.
    """
    h = batch.embeddings
    m = len(h)
    labels = batch.labels
    sim = h @ h.T
    off_diag = ~np.eye(m, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & off_diag
    active = pos.any(axis=1)
    if not active.any():
        raise NoPositives("no positive pair in the batch")

    dist = pair_distances(batch, cfg)
    tau_pos = cfg.tau0 * np.power(cfg.gamma, dist)
    exp_pos = np.where(pos, np.exp(sim / tau_pos), 0.0)
    exp_den = np.where(off_diag, np.exp(sim / cfg.tau0), 0.0)
    num = exp_pos.sum(axis=1)
    den = exp_den.sum(axis=1)
    terms = np.log(den[active]) - np.log(num[active])
    loss = float(terms.mean())

    n_active = int(active.sum())
    coeff = np.zeros((m, m))
    coeff[active] = (
        exp_den[active] / (cfg.tau0 * den[active, None])
        - exp_pos[active] / (tau_pos[active] * num[active, None])
    ) / n_active
    dh = coeff @ h + coeff.T @ h
    return loss, dh


def constant_temperature_reference(batch: ContrastiveBatch, tau0: float) -> float:
    """Scalar-only double-loop evaluation with a constant temperature."""
    h = batch.embeddings
    labels = batch.labels
    terms = []
    for i in range(len(h)):
        num = sum(
            np.exp(float(h[i] @ h[t]) / tau0)
            for t in range(len(h))
            if t != i and labels[t] == labels[i]
        )
        if num == 0.0:
            continue
        den = sum(np.exp(float(h[i] @ h[j]) / tau0) for j in range(len(h)) if j != i)
        terms.append(np.log(den) - np.log(num))
    if not terms:
        raise NoPositives("no positive pair in the batch")
    return float(np.mean(terms))


# ------------------------------------------------------------------ assemblies


def seen_ground_truth(scene, split) -> list:
    """Label-mask-visible seen-class objects as supervision records."""
    records = []
    for obj, visible in zip(scene.objects, scene.label_mask):
        if visible and obj.class_id in split.seen:
            records.append(SupervisionRecord(obj.box, obj.class_id, "gt"))
    return records


def _record_weight(record: SupervisionRecord, lcfg: LossConfig) -> float:
    return 1.0 if record.origin == "gt" else lcfg.pseudo_loss_weight


def _match_records(proposals, records, cost_of) -> np.ndarray:
    cost = np.array([[cost_of(p, r) for r in records] for p in proposals])
    return hungarian_match(cost)


def _cap_records(records, queries: int) -> list:
    # ground truth first, then pseudo records; Hungarian needs G <= Q
    if len(records) <= queries:
        return records
    gt = [r for r in records if r.origin == "gt"]
    pseudo = [r for r in records if r.origin != "gt"]
    return (gt + pseudo)[:queries]


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max())
    return e / e.sum()


def assemble_phase1_loss(scenes, images, cls_samples, split, params: ParamStore,
                         mcfg: ModelConfig, lcfg: LossConfig | None = None,
                         compute_grads: bool = True):
    """First-phase objective: seen-class supervision plus image-level labels."""
    lcfg = lcfg or LossConfig()
    return _assemble(scenes, images, cls_samples, split, {}, params, mcfg, lcfg,
                     ccfg=None, phase=1, compute_grads=compute_grads)


def assemble_phase2_loss(scenes, images, cls_samples, split, pseudo_records,
                         params: ParamStore, mcfg: ModelConfig,
                         lcfg: LossConfig | None = None,
                         ccfg: ContrastiveConfig | None = None,
                         compute_grads: bool = True, aug_seed: int = 0):
    """Second-phase objective: union of seen GT and pseudo records, plus the
    contrastive term over matched ROI embeddings and max-size embeddings."""
    lcfg = lcfg or LossConfig()
    ccfg = ccfg or ContrastiveConfig()
    return _assemble(scenes, images, cls_samples, split, pseudo_records, params,
                     mcfg, lcfg, ccfg, phase=2, compute_grads=compute_grads,
                     aug_seed=aug_seed)


def _assemble(scenes, images, cls_samples, split, pseudo_records, params, mcfg,
              lcfg, ccfg, phase, compute_grads, aug_seed=0):
    queries = mcfg.queries
    contrastive = phase == 2 and lcfg.contrastive_mode != "off"
    if contrastive and not lcfg.distance_temp:
        ccfg = ContrastiveConfig(ccfg.tau0, 1.0, ccfg.cross_dataset_distance)
    aug_rng = np.random.default_rng(aug_seed) if lcfg.contrastive_mode == "augmentation" else None

    box3d_items, cls3d_items = [], []
    box2d_items, cls2d_items = [], []
    ign_items = []
    decc_entries = []
    scene_caches = []
    instance_counter = 0

    for s_idx, (scene, image) in enumerate(zip(scenes, images)):
        records = seen_ground_truth(scene, split)
        if phase == 2:
            records = records + list(pseudo_records.get(scene.scene_id, []))
        records = _cap_records(records, queries)

        proposals3d, cache3d = detector3d_forward(scene.points, params, mcfg)
        d3d = [dict() for _ in range(queries)]
        assigned3d = {}
        if records:
            assign = _match_records(
                proposals3d, records,
                lambda p, r: (1.0 - _softmax(p.logits)[r.class_id])
                + loss_box_3d(p.box, r.box, mcfg.scene_extent)[0],
            )
            for g, q in enumerate(assign.tolist()):
                assigned3d[q] = (g, records[g])
        for q, prop in enumerate(proposals3d):
            pair = assigned3d.get(q)
            if pair is not None:
                _, record = pair
                weight = _record_weight(record, lcfg)
                bl, bg = loss_box_3d(prop.box, record.box, mcfg.scene_extent)
                box3d_items.append((s_idx, q, weight, bl, bg))
                cl, cg = loss_cls(prop.logits, record.class_id)
                cls3d_items.append((s_idx, q, weight, cl, cg))
            else:
                cl, cg = loss_cls(prop.logits, mcfg.background)
                cls3d_items.append((s_idx, q, lcfg.background_weight, cl, cg))

        proposals2d, cache2d = detector2d_forward(image.pixels, params, mcfg)
        d2d = [dict() for _ in range(queries)]
        records2d = []
        for g, record in enumerate(records):
            try:
                rect = project_box_to_2d(record.box, scene.camera)
            except AllBehindCamera:
                continue  # drop the sample from the 2D branch only
            records2d.append((g, record, rect))
        assigned2d = {}
        if records2d:
            assign = _match_records(
                proposals2d, records2d,
                lambda p, rr: (1.0 - _softmax(p.logits)[rr[1].class_id])
                + loss_box_2d(p.box, rr[2], mcfg.image_hw)[0],
            )
            for g, q in enumerate(assign.tolist()):
                assigned2d[q] = records2d[g]
        for q, prop in enumerate(proposals2d):
            pair = assigned2d.get(q)
            if pair is not None:
                _, record, rect = pair
                weight = _record_weight(record, lcfg)
                bl, bg = loss_box_2d(prop.box, rect, mcfg.image_hw)
                box2d_items.append((s_idx, q, weight, bl, bg))
                cl, cg = loss_cls(prop.logits, record.class_id)
                cls2d_items.append((s_idx, q, weight, cl, cg))
            else:
                cl, cg = loss_cls(prop.logits, mcfg.background)
                cls2d_items.append((s_idx, q, lcfg.background_weight, cl, cg))

        if contrastive:
            # label assignment per mode: class -> shared class ids;
            # position -> one id per supervision record (3D/2D views pair up);
            # augmentation -> one id per ROI view pair (SimCLR style)
            base = instance_counter
            instance_counter += len(records)
            view_id = [instance_counter]
            instance_counter += 2 * len(records)

            def record_label(g: int, record: SupervisionRecord) -> int:
                if lcfg.contrastive_mode == "class":
                    return record.class_id
                if lcfg.contrastive_mode == "position":
                    return 10_000 + base + g
                view_id[0] += 1
                return 10_000 + view_id[0]

            for q, (g, record) in assigned3d.items():
                qc = cache3d["queries"][q]
                if qc["roi"] is None:
                    continue  # empty ROI carries a constant zero feature
                entries = [(qc["feat"], None)]
                if aug_rng is not None:
                    jitter = aug_rng.normal(scale=0.01,
                                            size=qc["roi"]["enc"]["local"].shape)
                    aug_local = qc["roi"]["enc"]["local"] + jitter
                    aug_feat, aug_cache = _roi_encode_fwd(
                        aug_local, qc["roi"]["half_ext"], params, "pt_roi")
                    entries.append((aug_feat, aug_cache))
                label = record_label(g, record)
                for vec, aug_cache in entries:
                    unit, pcache = _projection_fwd(vec, params, "proj3d")
                    decc_entries.append({
                        "head": "proj3d", "unit": unit, "cache": pcache,
                        "label": label, "anchor": record.box.center,
                        "route": ("det3d", s_idx, q), "aug": aug_cache,
                        "box": qc["box"],
                    })
            for q, (g, record, rect) in assigned2d.items():
                qc = cache2d["queries"][q]
                entries = [(qc["feat"], None)]
                if aug_rng is not None:
                    noisy = qc["enc"]["v"].reshape(encoders.CROP, encoders.CROP, 3) \
                        + aug_rng.normal(scale=0.01, size=(encoders.CROP, encoders.CROP, 3))
                    aug_feat, aug_cache = _image_encoder_fwd(noisy, params, "img_roi")
                    entries.append((aug_feat, aug_cache))
                label = record_label(g, record)
                for vec, aug_cache in entries:
                    unit, pcache = _projection_fwd(vec, params, "proj2d")
                    decc_entries.append({
                        "head": "proj2d", "unit": unit, "cache": pcache,
                        "label": label, "anchor": record.box.center,
                        "route": ("det2d", s_idx, q), "aug": aug_cache,
                    })

        scene_caches.append((cache3d, d3d, cache2d, d2d))

    cls_caches = []
    for c_idx, sample in enumerate(cls_samples):
        proposals, cache = detector2d_forward(sample.pixels, params, mcfg)
        il, igrads = loss_max_size_ign(proposals, sample.class_id)
        ign_items.append((c_idx, il, igrads))
        dcls = [dict() for _ in range(queries)]
        if contrastive:
            q = max_size_index(proposals)
            qc = cache["queries"][q]
            entries = [(qc["feat"], None)]
            if aug_rng is not None:
                noisy = qc["enc"]["v"].reshape(encoders.CROP, encoders.CROP, 3) \
                    + aug_rng.normal(scale=0.01, size=(encoders.CROP, encoders.CROP, 3))
                aug_feat, aug_cache = _image_encoder_fwd(noisy, params, "img_roi")
                entries.append((aug_feat, aug_cache))
            if lcfg.contrastive_mode == "class":
                label = sample.class_id
            else:
                # corpus samples pair only with their own augmented view
                instance_counter += 1
                label = 10_000 + instance_counter
            for vec, aug_cache in entries:
                unit, pcache = _projection_fwd(vec, params, "proj2d")
                decc_entries.append({
                    "head": "proj2d", "unit": unit, "cache": pcache,
                    "label": label, "anchor": None,
                    "route": ("cls", c_idx, q), "aug": aug_cache,
                })
        cls_caches.append((cache, dcls))

    # ---- scalar terms
    def weighted_mean(items):
        total_w = sum(w for (_, _, w, _, _) in items)
        if total_w == 0.0:
            return 0.0, 0.0
        return sum(w * l for (_, _, w, l, _) in items) / total_w, total_w

    parts = {}
    parts["box3d"], wbox3d = weighted_mean(box3d_items)
    parts["cls3d"], wcls3d = weighted_mean(cls3d_items)
    parts["box2d"], wbox2d = weighted_mean(box2d_items)
    parts["cls2d"], wcls2d = weighted_mean(cls2d_items)
    parts["ign"] = (sum(l for (_, l, _) in ign_items) / len(ign_items)) if ign_items else 0.0

    decc_grad = None
    batch = None
    if contrastive and len(decc_entries) >= 2:
        batch = ContrastiveBatch(
            np.stack([e["unit"] for e in decc_entries]),
            np.array([e["label"] for e in decc_entries]),
            np.stack([e["anchor"] if e["anchor"] is not None else np.zeros(3)
                      for e in decc_entries]),
            np.array([e["anchor"] is not None for e in decc_entries]),
        )
        try:
            raw_decc, decc_grad = loss_decc(batch, ccfg)
            parts["decc"] = lcfg.contrastive_weight * raw_decc
        except NoPositives:
            parts["decc"] = 0.0
            decc_grad = None
    elif phase == 2:
        parts["decc"] = 0.0

    total = 0.0
    for key in ("box3d", "cls3d", "box2d", "cls2d", "ign", "decc"):
        if key in parts:
            total += parts[key]
    if not compute_grads:
        return total, parts, None

    # ---- backward
    grads = params.zeros_like()

    for s_idx, q, w, _, bg in box3d_items:
        d = scene_caches[s_idx][1][q]
        scale = w / wbox3d
        d["center"] = d.get("center", np.zeros(3)) + scale * bg["center"]
        d["size"] = d.get("size", np.zeros(3)) + scale * bg["size"]
        d["yaw"] = d.get("yaw", 0.0) + scale * bg["yaw"]
    for s_idx, q, w, _, cg in cls3d_items:
        d = scene_caches[s_idx][1][q]
        d["logits"] = d.get("logits", np.zeros(mcfg.n_logits)) + (w / wcls3d) * cg
    for s_idx, q, w, _, bg in box2d_items:
        d = scene_caches[s_idx][3][q]
        d["corners"] = d.get("corners", np.zeros(4)) + (w / wbox2d) * bg
    for s_idx, q, w, _, cg in cls2d_items:
        d = scene_caches[s_idx][3][q]
        d["logits"] = d.get("logits", np.zeros(mcfg.n_logits)) + (w / wcls2d) * cg
    for c_idx, _, igrads in ign_items:
        dcls = cls_caches[c_idx][1]
        for q, g in enumerate(igrads):
            if np.any(g != 0.0):
                dcls[q]["logits"] = dcls[q].get("logits", np.zeros(mcfg.n_logits)) \
                    + g / len(ign_items)

    if decc_grad is not None:
        for entry, dunit in zip(decc_entries, decc_grad):
            dfeat = _projection_bwd(lcfg.contrastive_weight * dunit, entry["cache"],
                                    params, grads, entry["head"])
            kind, s_or_c, q = entry["route"]
            if entry["aug"] is not None:
                # augmented views re-encode jittered inputs; their box-transform
                # chain matches the primary view's, so route center/yaw directly
                if entry["head"] == "proj3d":
                    dlocal, dhalf = _roi_encode_bwd(dfeat, entry["aug"], params,
                                                    grads, "pt_roi")
                    box = entry["box"]
                    rot = yaw_rotation(box.yaw)
                    d = scene_caches[s_or_c][1][q]
                    d["center"] = d.get("center", np.zeros(3)) - dlocal.sum(axis=0) @ rot.T
                    c, s = np.cos(box.yaw), np.sin(box.yaw)
                    drot = np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])
                    cache3d = scene_caches[s_or_c][0]
                    rel = cache3d["queries"][q]["roi"]["rel"]
                    d["yaw"] = d.get("yaw", 0.0) + float(np.sum(dlocal * (rel @ drot)))
                    d["size"] = d.get("size", np.zeros(3)) + 0.5 * dhalf
                else:
                    _image_encoder_bwd(dfeat, entry["aug"], params, grads, "img_roi")
                continue
            if kind == "det3d":
                d = scene_caches[s_or_c][1][q]
            elif kind == "det2d":
                d = scene_caches[s_or_c][3][q]
            else:
                d = cls_caches[s_or_c][1][q]
            d["feat"] = d.get("feat", np.zeros(mcfg.feat_dim)) + dfeat

    for cache3d, d3d, cache2d, d2d in scene_caches:
        detector3d_backward(d3d, cache3d, params, grads, mcfg)
        detector2d_backward(d2d, cache2d, params, grads, mcfg)
    for cache, dcls in cls_caches:
        detector2d_backward(dcls, cache, params, grads, mcfg)

    return total, parts, grads
