import itertools

import numpy as np
import pytest

from pointvoc.encoders import ParamStore, gradient_check, init_params
from pointvoc.geometry import Box2D, Box3D
from pointvoc.losses import (
    ContrastiveBatch,
    ContrastiveConfig,
    LossConfig,
    NoPositives,
    SupervisionRecord,
    assemble_phase1_loss,
    assemble_phase2_loss,
    constant_temperature_reference,
    hungarian_match,
    loss_box_2d,
    loss_box_3d,
    loss_cls,
    loss_decc,
    loss_max_size_ign,
    max_size_index,
    seen_ground_truth,
)
from pointvoc.scenegen import VocabularySplit, generate_scene, render_paired_image
from pointvoc.scenegen import generate_classification_set
from pointvoc.config import default_config
from pointvoc.encoders import ModelConfig

from conftest import tiny_model_config


# --------------------------------------------------------------- hungarian


def test_hungarian_diagonal_dominant():
    cost = np.full((3, 3), 10.0)
    np.fill_diagonal(cost, 0.0)
    assert hungarian_match(cost).tolist() == [0, 1, 2]


def test_hungarian_permuted_columns():
    rng = np.random.default_rng(1)
    cost = rng.uniform(size=(5, 3))
    base = hungarian_match(cost)
    perm = [2, 0, 1]
    permuted = hungarian_match(cost[:, perm])
    assert permuted.tolist() == [base[perm[g]] for g in range(3)]


def brute_force_assignment(cost):
    q, g = cost.shape
    best, best_cost = None, np.inf
    for rows in itertools.permutations(range(q), g):
        total = sum(cost[rows[j], j] for j in range(g))
        if total < best_cost - 1e-12:
            best, best_cost = rows, total
    return np.array(best), best_cost


def test_hungarian_matches_bruteforce():
    rng = np.random.default_rng(7)
    for _ in range(30):
        cost = rng.uniform(size=(6, 4))
        got = hungarian_match(cost)
        expect, expect_cost = brute_force_assignment(cost)
        got_cost = sum(cost[got[j], j] for j in range(4))
        assert got_cost == pytest.approx(expect_cost, abs=1e-12)
        assert got.tolist() == expect.tolist()


def test_hungarian_requires_enough_proposals():
    with pytest.raises(ValueError):
        hungarian_match(np.ones((2, 3)))


# --------------------------------------------------------------- loss_cls


def test_cls_uniform_logits():
    for c in (2, 5, 9):
        loss, grad = loss_cls(np.zeros(c), 0)
        assert loss == pytest.approx(np.log(c), abs=1e-12)
        assert np.allclose(grad, np.full(c, 1.0 / c) - np.eye(c)[0])


def test_cls_confident_logit():
    logits = np.zeros(5)
    logits[2] = 50.0
    loss, _ = loss_cls(logits, 2)
    assert loss < 1e-20


def test_cls_matches_independent_eval_and_fd():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=6)
    target = 4
    loss, grad = loss_cls(logits, target)
    # independent scalar evaluation
    probs = np.exp(logits) / np.exp(logits).sum()
    assert loss == pytest.approx(-np.log(probs[target]), rel=1e-12)
    # finite differences
    eps = 1e-6
    for k in range(6):
        bumped = logits.copy()
        bumped[k] += eps
        lp, _ = loss_cls(bumped, target)
        bumped[k] -= 2 * eps
        lm, _ = loss_cls(bumped, target)
        assert grad[k] == pytest.approx((lp - lm) / (2 * eps), abs=1e-6)


def test_cls_target_out_of_vocab():
    with pytest.raises(ValueError):
        loss_cls(np.zeros(4), 7, n_classes=4)


# --------------------------------------------------------------- box losses


EXTENT = np.array([6.0, 6.0, 3.0])


def test_box3d_zero_at_equality():
    box = Box3D(np.array([1.0, 2.0, 0.5]), np.array([0.8, 0.6, 1.0]), 0.3)
    loss, _ = loss_box_3d(box, box, EXTENT)
    assert loss == 0.0


def test_box3d_yaw_periodicity():
    gt = Box3D(np.ones(3), np.ones(3), 0.0)
    plus = Box3D(np.ones(3), np.ones(3), np.pi - 1e-9)
    minus = Box3D(np.ones(3), np.ones(3), -(np.pi - 1e-9))
    lp, _ = loss_box_3d(plus, gt, EXTENT)
    lm, _ = loss_box_3d(minus, gt, EXTENT)
    assert lp == pytest.approx(lm, abs=1e-8)


def test_box3d_independent_formula_and_fd():
    rng = np.random.default_rng(5)
    for _ in range(20):
        pred = Box3D(rng.uniform(0.5, 5.0, 3), rng.uniform(0.3, 1.5, 3),
                     rng.uniform(-3.0, 3.0))
        gt = Box3D(rng.uniform(0.5, 5.0, 3), rng.uniform(0.3, 1.5, 3),
                   rng.uniform(-3.0, 3.0))
        loss, grads = loss_box_3d(pred, gt, EXTENT)
        # independent scalar formula
        dyaw = pred.yaw - gt.yaw
        expect = (
            np.sum(np.abs(pred.center - gt.center) / EXTENT)
            + np.sum(np.abs(np.log(pred.size) - np.log(gt.size)))
            + min(abs(dyaw), 2 * np.pi - abs(dyaw)) / np.pi
        )
        assert loss == pytest.approx(expect, rel=1e-12)

        params = ParamStore({"center": pred.center.copy(), "size": pred.size.copy(),
                             "yaw": np.array([pred.yaw])})

        def loss_fn(p, with_grads):
            box = Box3D(p["center"], p["size"], float(p["yaw"][0]))
            l, g = loss_box_3d(box, gt, EXTENT)
            if not with_grads:
                return l, None
            return l, {"center": g["center"], "size": g["size"],
                       "yaw": np.array([g["yaw"]])}

        err = gradient_check(loss_fn, params, epsilon=1e-6, seed=0)
        assert err < 1e-5


def test_box2d_zero_at_equality_and_disjoint_term():
    rect = Box2D([10.0, 20.0], [40.0, 50.0])
    loss, grad = loss_box_2d(rect, rect, (128, 128))
    assert loss == 0.0
    far = Box2D([100.0, 100.0], [120.0, 120.0])
    loss, grad = loss_box_2d(rect, far, (128, 128))
    l1 = np.sum(np.abs(np.array([10, 20, 40, 50]) - np.array([100, 100, 120, 120]))
                / np.array([128, 128, 128, 128]))
    assert loss == pytest.approx(l1 + 1.0, rel=1e-12)


def test_box2d_fd():
    rng = np.random.default_rng(9)
    for _ in range(20):
        lo = rng.uniform(0, 60, 2)
        hi = lo + rng.uniform(10, 50, 2)
        gt = Box2D(lo, hi)
        lo2 = lo + rng.uniform(-15, 15, 2)
        hi2 = np.maximum(lo2 + 5.0, hi + rng.uniform(-15, 15, 2))
        params = ParamStore({"corners": np.concatenate([lo2, hi2])})

        def loss_fn(p, with_grads):
            c = p["corners"]
            box = Box2D(c[:2], c[2:])
            l, g = loss_box_2d(box, gt, (128, 128))
            return (l, {"corners": g}) if with_grads else (l, None)

        err = gradient_check(loss_fn, params, epsilon=1e-6, seed=0)
        assert err < 1e-5


# --------------------------------------------------------------- max-size loss


class FakeProposal:
    def __init__(self, box, logits):
        self.box = box
        self.logits = logits


def test_max_size_single_proposal_reduces_to_cls():
    logits = np.array([0.2, -0.4, 1.0])
    prop = FakeProposal(Box2D([0, 0], [10, 10]), logits)
    loss, grads = loss_max_size_ign([prop], 2)
    ref, ref_grad = loss_cls(logits, 2)
    assert loss == ref
    assert np.array_equal(grads[0], ref_grad)


def test_max_size_tie_breaks_to_lowest_index():
    a = FakeProposal(Box2D([0, 0], [10, 10]), np.array([1.0, 0.0]))
    b = FakeProposal(Box2D([5, 5], [15, 15]), np.array([-3.0, 2.0]))  # same area
    loss_ab, grads_ab = loss_max_size_ign([a, b], 0)
    assert max_size_index([a, b]) == 0
    assert np.any(grads_ab[0] != 0) and np.all(grads_ab[1] == 0)


def test_max_size_index_matches_area_oracle():
    rng = np.random.default_rng(11)
    for _ in range(25):
        props = []
        for _ in range(6):
            lo = rng.uniform(0, 50, 2)
            hi = lo + rng.uniform(1, 60, 2)
            props.append(FakeProposal(Box2D(lo, hi), rng.normal(size=4)))
        areas = [float(np.prod(p.box.hi - p.box.lo)) for p in props]
        assert max_size_index(props) == int(np.argmax(areas))


# --------------------------------------------------------------- DECC


def unit_rows(rng, m, d):
    h = rng.normal(size=(m, d))
    return h / np.linalg.norm(h, axis=1, keepdims=True)


def make_batch(h, labels, anchors=None):
    m = len(h)
    if anchors is None:
        return ContrastiveBatch(h, np.asarray(labels), np.zeros((m, 3)),
                                np.zeros(m, dtype=bool))
    has = np.array([a is not None for a in anchors])
    arr = np.stack([a if a is not None else np.zeros(3) for a in anchors])
    return ContrastiveBatch(h, np.asarray(labels), arr, has)


def test_decc_identical_pair_is_zero():
    v = np.zeros(8)
    v[0] = 1.0
    anchors = [np.zeros(3), np.zeros(3)]  # dist 0 -> tau(0) == tau0
    batch = make_batch(np.stack([v, v]), [3, 3], anchors)
    loss, _ = loss_decc(batch, ContrastiveConfig(tau0=0.2, gamma=5.0))
    assert loss == 0.0


def test_decc_gamma_one_equals_constant_temperature():
    rng = np.random.default_rng(13)
    h = unit_rows(rng, 8, 16)
    labels = np.array([0, 1, 0, 2, 1, 0, 2, 1])
    anchors = [rng.uniform(0, 5, 3) for _ in range(6)] + [None, None]
    batch = make_batch(h, labels, anchors)
    loss, _ = loss_decc(batch, ContrastiveConfig(tau0=0.2, gamma=1.0))
    ref = constant_temperature_reference(batch, 0.2)
    assert loss == pytest.approx(ref, abs=1e-12)


def test_temperature_paper_constants():
    cfg = ContrastiveConfig(tau0=0.2, gamma=1.1)
    assert cfg.temperature(1.0) == pytest.approx(0.22, abs=1e-12)
    assert cfg.temperature(0.0) == pytest.approx(0.2, abs=1e-15)


def decc_double_loop_oracle(h, labels, anchors, has, cfg):
    """Independent scalar evaluation of the distance-aware loss."""
    terms = []
    for i in range(len(h)):
        pos = [t for t in range(len(h)) if t != i and labels[t] == labels[i]]
        if not pos:
            continue
        num = 0.0
        for t in pos:
            if has[i] and has[t]:
                dist = float(np.linalg.norm(anchors[i] - anchors[t]))
            else:
                dist = cfg.cross_dataset_distance
            num += np.exp(float(h[i] @ h[t]) / (cfg.tau0 * cfg.gamma**dist))
        den = sum(np.exp(float(h[i] @ h[j]) / cfg.tau0)
                  for j in range(len(h)) if j != i)
        terms.append(-np.log(num / den))
    return float(np.mean(terms))


def test_decc_matches_double_loop_and_fd():
    rng = np.random.default_rng(17)
    cfg = ContrastiveConfig(tau0=0.2, gamma=1.1)
    raw = rng.normal(size=(6, 8))
    labels = np.array([0, 1, 2, 0, 1, 2])
    anchors = [rng.uniform(0, 4, 3) for _ in range(5)] + [None]

    def build(rawmat):
        h = rawmat / np.linalg.norm(rawmat, axis=1, keepdims=True)
        return make_batch(h, labels, anchors)

    batch = build(raw)
    loss, dh = loss_decc(batch, cfg)
    oracle = decc_double_loop_oracle(batch.embeddings, labels,
                                     batch.anchors, batch.has_anchor, cfg)
    assert loss == pytest.approx(oracle, rel=1e-12)

    # FD through the upstream L2 normalization
    params = ParamStore({"raw": raw.copy()})

    def loss_fn(p, with_grads):
        b = build(p["raw"])
        l, dh_ = loss_decc(b, cfg)
        if not with_grads:
            return l, None
        draw = np.empty_like(p["raw"])
        for i in range(len(p["raw"])):
            n = np.linalg.norm(p["raw"][i])
            hrow = p["raw"][i] / n
            draw[i] = (dh_[i] - hrow * float(hrow @ dh_[i])) / n
        return l, {"raw": draw}

    err = gradient_check(loss_fn, params, epsilon=1e-6, seed=1)
    assert err < 1e-4


def test_decc_rotation_invariance():
    rng = np.random.default_rng(19)
    h = unit_rows(rng, 7, 8)
    labels = np.array([0, 0, 1, 1, 2, 2, 0])
    anchors = [rng.uniform(0, 3, 3) for _ in range(7)]
    batch = make_batch(h, labels, anchors)
    cfg = ContrastiveConfig(tau0=0.2, gamma=1.3)
    base, _ = loss_decc(batch, cfg)
    q, _ = np.linalg.qr(rng.normal(size=(8, 8)))  # orthogonal
    rotated = make_batch(h @ q.T, labels, anchors)
    rot_loss, _ = loss_decc(rotated, cfg)
    assert rot_loss == pytest.approx(base, abs=1e-9)


def test_decc_can_be_negative_but_finite():
    # an anti-aligned distant positive: the tempered numerator exponent
    # (s / tau(dist)) beats the raw tau0 denominator exponent when s < 0
    h = np.stack([np.array([1.0, 0, 0, 0]), np.array([-1.0, 0, 0, 0])])
    anchors = [np.zeros(3), np.array([5.0, 0.0, 0.0])]
    batch = make_batch(h, [0, 0], anchors)
    loss, dh = loss_decc(batch, ContrastiveConfig(tau0=0.2, gamma=2.0))
    assert np.isfinite(loss) and loss < 0.0
    assert np.all(np.isfinite(dh))


def test_decc_no_positives():
    rng = np.random.default_rng(23)
    batch = make_batch(unit_rows(rng, 4, 8), [0, 1, 2, 3])
    with pytest.raises(NoPositives):
        loss_decc(batch, ContrastiveConfig())


def test_decc_gamma_saturation():
    # gamma -> inf direction: distant positives stop attracting; with
    # gamma = 1e3 the positive exponentials sit at 1 once gamma**dist
    # dominates any unit-range similarity
    rng = np.random.default_rng(29)
    h = unit_rows(rng, 6, 8)
    labels = np.array([0, 0, 0, 1, 1, 1])
    anchors = [rng.uniform(0, 1, 3) + np.array([4.0 * i, 0, 0]) for i in range(6)]
    batch = make_batch(h, labels, anchors)
    cfg = ContrastiveConfig(tau0=0.2, gamma=1e3)
    dist = np.linalg.norm(batch.anchors[:, None] - batch.anchors[None], axis=-1)
    sim = batch.embeddings @ batch.embeddings.T
    for i in range(6):
        for t in range(6):
            if t != i and labels[i] == labels[t]:
                assert dist[i, t] >= 3.0
                exponent = sim[i, t] / (cfg.tau0 * cfg.gamma ** dist[i, t])
                assert abs(np.exp(exponent) - 1.0) < 1e-6


# --------------------------------------------------------------- assemblies


def micro_world(seed=0, n_scenes=1, n_cls=2):
    """A miniature dataset + model for end-to-end loss checks."""
    cfg = default_config()
    cfg.update(points_per_scene=64, objects_min=2, objects_max=2,
               scene_extent_x=4.0, scene_extent_y=4.0, scene_extent_z=2.5,
               image_size=48, cls_per_class=1, queries=4, feat_dim=16,
               embed_dim=8, point_hidden1=8, point_hidden2=12, img_hidden=12,
               query_dim=6, head_hidden=12)
    mcfg = ModelConfig.from_config(cfg)
    scenes = [generate_scene(cfg, 100 + seed + i) for i in range(n_scenes)]
    images = [render_paired_image(s, cfg) for s in scenes]
    cls_samples = generate_classification_set(cfg, seed + 50)[:n_cls]
    split = VocabularySplit(frozenset({0, 1, 2, 3}), frozenset(range(8)),
                            frozenset(range(8)))
    params = init_params(mcfg, seed=seed + 7)
    return cfg, mcfg, scenes, images, cls_samples, split, params


def test_phase1_empty_supervision_is_background_only():
    cfg, mcfg, scenes, images, cls_samples, split, params = micro_world()
    empty_split = VocabularySplit(frozenset({7}), frozenset(range(8)),
                                  frozenset(range(8)))
    # force no labeled seen objects by masking everything
    for s in scenes:
        s.label_mask = [False] * len(s.objects)
    total, parts, grads = assemble_phase1_loss(scenes, images, [], empty_split,
                                               params, mcfg)
    assert parts["box3d"] == 0.0 and parts["box2d"] == 0.0 and parts["ign"] == 0.0
    assert parts["cls3d"] > 0.0 and parts["cls2d"] > 0.0
    assert total == parts["cls3d"] + parts["cls2d"]


def test_phase1_additivity():
    cfg, mcfg, scenes, images, cls_samples, split, params = micro_world(seed=1)
    total, parts, _ = assemble_phase1_loss(scenes, images, cls_samples, split,
                                           params, mcfg, compute_grads=False)
    assert total == pytest.approx(sum(parts.values()), abs=1e-12)
    assert set(parts) == {"box3d", "cls3d", "box2d", "cls2d", "ign"}


def test_phase2_additivity_and_decc_over_seen_gt():
    cfg, mcfg, scenes, images, cls_samples, split, params = micro_world(seed=2)
    total, parts, _ = assemble_phase2_loss(scenes, images, cls_samples, split,
                                           {}, params, mcfg, compute_grads=False)
    assert set(parts) == {"box3d", "cls3d", "box2d", "cls2d", "ign", "decc"}
    assert total == pytest.approx(sum(parts.values()), abs=1e-12)


def test_phase2_pseudo_records_enter_matching():
    cfg, mcfg, scenes, images, cls_samples, split, params = micro_world(seed=3)
    # fabricate one pseudo record per scene on an unseen class
    pseudo = {}
    for s in scenes:
        box = Box3D(np.array([2.0, 2.0, 0.4]), np.array([0.6, 0.6, 0.8]), 0.2)
        pseudo[s.scene_id] = [SupervisionRecord(box, 5, "pseudo")]
    t_with, parts_with, _ = assemble_phase2_loss(
        scenes, images, cls_samples, split, pseudo, params, mcfg, compute_grads=False)
    t_without, parts_without, _ = assemble_phase2_loss(
        scenes, images, cls_samples, split, {}, params, mcfg, compute_grads=False)
    assert parts_with["box3d"] != parts_without["box3d"]


def test_phase1_gradient_full_fd():
    cfg, mcfg, scenes, images, cls_samples, split, params = micro_world(seed=4)

    def loss_fn(p, with_grads):
        total, _, grads = assemble_phase1_loss(scenes, images, cls_samples,
                                               split, p, mcfg,
                                               compute_grads=with_grads)
        return total, grads

    err = gradient_check(loss_fn, params, epsilon=2e-5,
                         coords_per_tensor=8, seed=3)
    assert err < 1e-3


def test_phase2_gradient_full_fd():
    cfg, mcfg, scenes, images, cls_samples, split, params = micro_world(seed=5)
    pseudo = {}
    for s in scenes:
        box = Box3D(np.array([1.6, 2.3, 0.45]), np.array([0.7, 0.5, 0.9]), -0.4)
        pseudo[s.scene_id] = [SupervisionRecord(box, 6, "pseudo")]

    def loss_fn(p, with_grads):
        total, _, grads = assemble_phase2_loss(scenes, images, cls_samples,
                                               split, pseudo, p, mcfg,
                                               compute_grads=with_grads)
        return total, grads

    err = gradient_check(loss_fn, params, epsilon=2e-5,
                         coords_per_tensor=8, seed=4)
    assert err < 1e-3


def test_seen_ground_truth_respects_mask_and_split():
    cfg, mcfg, scenes, images, cls_samples, split, params = micro_world(seed=6)
    scene = scenes[0]
    records = seen_ground_truth(scene, split)
    assert all(r.class_id in split.seen for r in records)
    scene.label_mask = [False] * len(scene.objects)
    assert seen_ground_truth(scene, split) == []
