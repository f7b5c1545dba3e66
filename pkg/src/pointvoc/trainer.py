"""Two-phase optimization loop with pseudo-label refresh hooks.

Determinism contract: every batch order, augmentation draw and refresh
decision derives from (config, seed, phase, epoch), so a rerun reproduces
checkpoints and logs byte for byte.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .encoders import ModelConfig, ParamStore, init_params
from .evalmetrics import evaluate
from .losses import (
    ContrastiveConfig,
    LossConfig,
    SupervisionRecord,
    assemble_phase1_loss,
    assemble_phase2_loss,
)
from .pseudolabel import PseudoStore, ScheduleConfig, generate_pseudo_labels, \
    refresh_if_due, schedule_k


class DivergenceDetected(Exception):
    """Loss became non-finite during training."""


class NonFiniteUpdate(Exception):
    """Optimizer produced a non-finite parameter update."""


ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 3e-3
    batch_size: int = 8
    cls_per_step: int = 8
    epochs_phase1: int = 60
    epochs_phase2: int = 80
    label_ratio: float = 1.0
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 < self.label_ratio <= 1.0:
            raise ValueError("label ratio must lie in (0, 1]")

    @classmethod
    def from_config(cls, cfg: dict) -> "TrainConfig":
        return cls(
            optimizer=cfg["optimizer"],
            learning_rate=float(cfg["learning_rate"]),
            batch_size=int(cfg["batch_size"]),
            cls_per_step=int(cfg["cls_per_step"]),
            epochs_phase1=int(cfg["epochs_phase1"]),
            epochs_phase2=int(cfg["epochs_phase2"]),
            label_ratio=float(cfg["label_ratio"]),
            seed=int(cfg["seed"]),
            schedule=ScheduleConfig.from_config(cfg),
            contrastive=ContrastiveConfig(float(cfg["tau0"]), float(cfg["gamma"]),
                                          float(cfg["cross_dataset_distance"])),
            loss=LossConfig(
                background_weight=float(cfg["background_weight"]),
                pseudo_loss_weight=float(cfg["pseudo_loss_weight"]),
                contrastive_mode=cfg["contrastive_mode"],
                distance_temp=cfg["distance_temp"] == "on",
                contrastive_weight=float(cfg["contrastive_weight"]),
            ),
        )


@dataclass
class TrainLog:
    phase: int
    epochs: list = field(default_factory=list)
    refreshes: list = field(default_factory=list)

    def to_lines(self) -> list:
        lines = []
        for rec in self.epochs:
            lines.append(json.dumps({"kind": "epoch", "phase": self.phase, **rec},
                                    sort_keys=True))
        for rec in self.refreshes:
            lines.append(json.dumps({"kind": "refresh", "phase": self.phase, **rec},
                                    sort_keys=True))
        return lines

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.to_lines()) + ("\n" if self.epochs or self.refreshes else ""))


# ---------------------------------------------------------------- optimizer


def init_opt_state(params: ParamStore) -> dict:
    return {"t": 0,
            "m": params.zeros_like(),
            "v": params.zeros_like()}


def optimizer_step(params: ParamStore, grads: dict, state: dict,
                   cfg: TrainConfig) -> None:
    """SGD or bias-corrected Adam, in place."""
    lr = cfg.learning_rate
    if cfg.optimizer == "sgd":
        for name in params.names():
            update = lr * grads[name]
            if not np.all(np.isfinite(update)):
                raise NonFiniteUpdate(f"non-finite sgd update for {name}")
            params[name] -= update
        return
    state["t"] += 1
    t = state["t"]
    bias1 = 1 - ADAM_BETA1**t
    bias2 = 1 - ADAM_BETA2**t
    for name in params.names():
        g = grads[name]
        m, v = state["m"][name], state["v"][name]
        m += (1 - ADAM_BETA1) * (g - m)
        v += (1 - ADAM_BETA2) * (g * g - v)
        update = (lr / bias1) * m / (np.sqrt(v / bias2) + ADAM_EPS)
        if not np.all(np.isfinite(update)):
            raise NonFiniteUpdate(f"non-finite adam update for {name}")
        params[name] -= update


def apply_label_ratio(scenes, ratio: float, seed: int):
    """Mark floor(ratio * n) scenes as labeled; the rest hide all annotations.

    Unlabeled scenes stay in the corpus (and in evaluation pools); only
    their supervision disappears.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must lie in (0, 1]")
    n_labeled = math.floor(ratio * len(scenes))
    order = np.random.default_rng(seed).permutation(len(scenes))
    labeled = set(order[:n_labeled].tolist())
    for i, scene in enumerate(scenes):
        scene.label_mask = [i in labeled] * len(scene.objects)
    return scenes


# ---------------------------------------------------------------- loops


def _batches(n: int, batch_size: int, rng) -> list:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _mean_parts(step_parts: list) -> dict:
    keys = step_parts[0].keys()
    return {k: float(np.mean([p[k] for p in step_parts])) for k in keys}


def train_phase1(dataset, cfg_dict: dict):
    """Seen-class supervision plus image-level classification (Detic-style)."""
    tcfg = TrainConfig.from_config(cfg_dict)
    mcfg = ModelConfig.from_config(cfg_dict)
    params = init_params(mcfg, tcfg.seed)
    apply_label_ratio(dataset.scenes, tcfg.label_ratio, tcfg.seed)
    state = init_opt_state(params)
    log = TrainLog(phase=1)
    n_cls = len(dataset.cls_samples)
    for epoch in range(tcfg.epochs_phase1):
        rng = np.random.default_rng([tcfg.seed, 1, epoch])
        cls_order = rng.permutation(n_cls) if n_cls else np.array([], dtype=int)
        cls_cursor = 0
        step_parts = []
        for batch in _batches(len(dataset.scenes), tcfg.batch_size, rng):
            scenes = [dataset.scenes[i] for i in batch]
            images = [dataset.images[i] for i in batch]
            cls_batch = []
            for _ in range(min(tcfg.cls_per_step, n_cls)):
                cls_batch.append(dataset.cls_samples[cls_order[cls_cursor % n_cls]])
                cls_cursor += 1
            total, parts, grads = assemble_phase1_loss(
                scenes, images, cls_batch, dataset.split, params, mcfg, tcfg.loss)
            if not np.isfinite(total):
                raise DivergenceDetected(f"phase 1 loss diverged at epoch {epoch}")
            optimizer_step(params, grads, state, tcfg)
            step_parts.append({"total": total, **parts})
        log.epochs.append({"epoch": epoch, **_mean_parts(step_parts)})
    return params, log


def _store_to_records(store: PseudoStore) -> dict:
    by_scene = {}
    for r in store.records:
        by_scene.setdefault(r.scene_id, []).append(
            SupervisionRecord(r.box, r.class_id, "pseudo"))
    return by_scene


def train_phase2(dataset, phase1_params: ParamStore, cfg_dict: dict,
                 use_pseudo: bool = True):
    """Pseudo-label self-training plus the contrastive objective."""
    tcfg = TrainConfig.from_config(cfg_dict)
    mcfg = ModelConfig.from_config(cfg_dict)
    params = phase1_params.copy()
    apply_label_ratio(dataset.scenes, tcfg.label_ratio, tcfg.seed)
    state = init_opt_state(params)
    log = TrainLog(phase=2)
    n_cls = len(dataset.cls_samples)
    store = None
    iteration = 0
    for epoch in range(tcfg.epochs_phase2):
        if use_pseudo:
            def regenerate():
                return generate_pseudo_labels(params, dataset.scenes, dataset.images,
                                              dataset.split, epoch, tcfg.schedule, mcfg)

            refreshed = refresh_if_due(epoch, tcfg.schedule, store, regenerate)
            if refreshed is not store:
                store = refreshed
                report = evaluate(params, dataset.scenes, dataset.split,
                                  dataset.split.unseen, mcfg)
                log.refreshes.append({
                    "epoch": epoch, "iteration": iteration,
                    "store_size": len(store),
                    "per_class": {str(k): v for k, v in
                                  sorted(store.counts_by_class().items())},
                    "k": schedule_k(epoch, tcfg.schedule),
                    "map25": report.map25, "ar25": report.ar25,
                })
                iteration += 1
        records = _store_to_records(store) if store is not None else {}
        rng = np.random.default_rng([tcfg.seed, 2, epoch])
        cls_order = rng.permutation(n_cls) if n_cls else np.array([], dtype=int)
        cls_cursor = 0
        step_parts = []
        for s_idx, batch in enumerate(_batches(len(dataset.scenes),
                                               tcfg.batch_size, rng)):
            scenes = [dataset.scenes[i] for i in batch]
            images = [dataset.images[i] for i in batch]
            cls_batch = []
            for _ in range(min(tcfg.cls_per_step, n_cls)):
                cls_batch.append(dataset.cls_samples[cls_order[cls_cursor % n_cls]])
                cls_cursor += 1
            total, parts, grads = assemble_phase2_loss(
                scenes, images, cls_batch, dataset.split, records, params, mcfg,
                tcfg.loss, tcfg.contrastive,
                aug_seed=(tcfg.seed * 1_000_003 + epoch * 1009 + s_idx) % 2**31)
            if not np.isfinite(total):
                raise DivergenceDetected(f"phase 2 loss diverged at epoch {epoch}")
            optimizer_step(params, grads, state, tcfg)
            step_parts.append({"total": total, **parts})
        log.epochs.append({
            "epoch": epoch,
            "store_size": len(store) if store is not None else 0,
            **_mean_parts(step_parts),
        })
    # closing snapshot so trend studies see the post-training point
    report = evaluate(params, dataset.scenes, dataset.split,
                      dataset.split.unseen, mcfg)
    log.refreshes.append({
        "epoch": tcfg.epochs_phase2, "iteration": iteration,
        "store_size": len(store) if store is not None else 0,
        "per_class": {str(k): v for k, v in
                      sorted(store.counts_by_class().items())} if store else {},
        "k": schedule_k(max(tcfg.epochs_phase2 - 1, 0), tcfg.schedule),
        "map25": report.map25, "ar25": report.ar25,
    })
    return params, log, store
