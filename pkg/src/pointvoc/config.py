"""Flat key=value configuration shared by data generation, training and the CLI."""

from __future__ import annotations

import copy


class ConfigError(Exception):
    """Raised for unknown keys or values that fail coercion."""


# Every tunable in one flat namespace. Values here are the desk-scale defaults;
# the reference large-scale settings (lr 2e-5, batch 4 per GPU, k0 50, k_step 10)
# are documented in the README but are not practical on a laptop CPU.
DEFAULTS = {
    # data generation
    "n_classes": 8,
    "n_unseen": 4,
    "n_scenes": 200,
    "points_per_scene": 512,
    "objects_min": 1,
    "objects_max": 3,
    "scene_extent_x": 6.0,
    "scene_extent_y": 6.0,
    "scene_extent_z": 3.0,
    "placement_margin": 1.2,
    "clutter_fraction": 0.25,
    "image_size": 128,
    "crop_size": 32,
    "cls_per_class": 24,
    "vocab_seed": 7,
    # model
    "queries": 8,
    "feat_dim": 64,
    "embed_dim": 32,
    "point_hidden1": 32,
    "point_hidden2": 64,
    "img_hidden": 64,
    "query_dim": 32,
    "head_hidden": 64,
    "min_box_size": 0.05,
    "roi_dilation": 0.25,
    # training
    "optimizer": "adam",
    "learning_rate": 3e-3,
    "batch_size": 8,
    "cls_per_step": 8,
    "epochs_phase1": 60,
    "epochs_phase2": 80,
    "label_ratio": 1.0,
    "background_weight": 0.2,
    "pseudo_loss_weight": 1.0,
    "contrastive_mode": "class",
    "distance_temp": "on",
    "contrastive_weight": 0.5,
    # pseudo labels
    "k0": 5,
    "k_step": 2,
    "refresh_period": 20,
    "confidence_floor": 0.3,
    "duplicate_iou": 0.25,
    # contrastive temperature
    "tau0": 0.2,
    "gamma": 1.1,
    "cross_dataset_distance": 1.0,
    # misc
    "seed": 0,
}

_STR_KEYS = {"optimizer", "contrastive_mode", "distance_temp"}
_CHOICES = {
    "optimizer": {"sgd", "adam"},
    "contrastive_mode": {"off", "augmentation", "position", "class"},
    "distance_temp": {"on", "off"},
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _coerce(key: str, raw: str):
    proto = DEFAULTS[key]
    if key in _STR_KEYS:
        value = raw.strip()
        if value not in _CHOICES[key]:
            raise ConfigError(
                f"bad value for '{key}': {value!r} (choices: {sorted(_CHOICES[key])})"
            )
        return value
    try:
        if isinstance(proto, int):
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for '{key}': {raw!r}") from None


def parse_config_text(text: str) -> dict:
    """Parse `key = value` lines ('#' starts a comment) on top of the defaults."""
    cfg = default_config()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line.rstrip()!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key '{key}' (line {lineno})")
        cfg[key] = _coerce(key, raw)
    return cfg


def load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def dump_config(cfg: dict) -> str:
    """Serialize in a stable key order so reruns are byte-identical."""
    lines = [f"{key} = {cfg[key]}" for key in DEFAULTS]
    return "\n".join(lines) + "\n"


def save_config(cfg: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))
