import math

import numpy as np
import pytest

from trackgraph import assocgraph as ag
from trackgraph import learn
from trackgraph import numcore as nc
from trackgraph import synthworld as sw
from trackgraph import trackman as tm
from trackgraph.numcore import Tensor


class Box:
    def __init__(self, box):
        self.box = np.asarray(box, dtype=np.float64)


def small_config(**kw):
    base = dict(num_classes=3, embed_dim=8, appearance_dim=3, mask_grid=6,
                max_tracks=6, max_detections=5)
    base.update(kw)
    return ag.ModelConfig(**base)


def small_world(seed=0, frames=6, objects=2):
    return sw.WorldConfig(seed=seed, frames=frames, max_objects=objects,
                          num_classes=3, appearance_dim=3, mask_grid=6,
                          exit_prob=0.0, entry_window=1)


# ---------------------------------------------------------------------------
# target assignment


def test_assign_iou_above_threshold():
    gt = [(7, [0.5, 0.5, 0.2, 0.2])]
    det = [Box([0.5, 0.5, 0.2, 0.2 * 0.6 / (2 - 0.6)])]
    # construct a detection with IoU exactly 0.6: nested box, area ratio 0.6
    det = [Box([0.5, 0.5, 0.2, 0.2 * 0.6])]
    assert ag.iou(gt[0][1], det[0].box) == pytest.approx(0.6)
    assert learn.assign_targets(det, gt) == {0: 7}


def test_assign_iou_below_threshold():
    gt = [(7, [0.5, 0.5, 0.2, 0.2])]
    det = [Box([0.5, 0.5, 0.2, 0.2 * 0.4])]
    assert ag.iou(gt[0][1], det[0].box) == pytest.approx(0.4)
    assert learn.assign_targets(det, gt) == {}


def test_assign_best_detection_wins():
    gt = [(3, [0.5, 0.5, 0.2, 0.2])]
    dets = [Box([0.5, 0.5, 0.2, 0.2 * 0.6]), Box([0.5, 0.5, 0.2, 0.2 * 0.7])]
    labels = learn.assign_targets(dets, gt)
    assert labels == {1: 3}


def test_assign_one_to_one_across_objects():
    gt = [(0, [0.3, 0.5, 0.2, 0.2]), (1, [0.32, 0.5, 0.2, 0.2])]
    dets = [Box([0.3, 0.5, 0.2, 0.2]), Box([0.32, 0.5, 0.2, 0.2])]
    labels = learn.assign_targets(dets, gt)
    assert labels == {0: 0, 1: 1}


# ---------------------------------------------------------------------------
# score loss


def test_ramp_weights_sum_to_one():
    for T in (1, 5, 10):
        w = learn.ramp_weights(T)
        assert w.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(np.diff(w) > 0) or T == 1


def test_loss_score_perfect_predictions_near_zero():
    dist = Tensor([0.0, 1.0, 0.0, 0.0])
    frames = [[(dist, 1)] for _ in range(4)]
    out = learn.loss_score(frames, seq_len=4)
    assert out.item() < 1e-6


def test_loss_score_uniform_is_log5_per_weighted_frame():
    dist = Tensor(np.full(5, 0.2))
    frames = [[(dist, 0)] for _ in range(3)]
    out = learn.loss_score(frames, seq_len=3)
    # ramp weights sum to 1, one track per frame -> exactly ln 5
    assert out.item() == pytest.approx(math.log(5.0), abs=1e-10)


def test_loss_score_later_frames_weigh_more():
    good = Tensor([1.0, 0.0])
    bad = Tensor([0.0, 1.0])
    early_bad = learn.loss_score([[(bad, 0)], [(good, 0)]], seq_len=2)
    late_bad = learn.loss_score([[(good, 0)], [(bad, 0)]], seq_len=2)
    assert late_bad.item() > early_bad.item()


# ---------------------------------------------------------------------------
# binary cross-entropy losses


def test_loss_bce_extremes_near_zero():
    probs = Tensor(np.array([[1.0, 0.0]]))
    targets = np.array([[1.0, 0.0]])
    mask = np.ones((1, 2))
    out = learn.loss_bce([(probs, targets, mask)], seq_len=1)
    assert out.item() < 1e-5


def test_loss_bce_half_probability_count():
    k = 6
    probs = Tensor(np.full((2, 3), 0.5))
    targets = np.zeros((2, 3))
    mask = np.ones((2, 3))
    for T, B in ((1, 1), (4, 2)):
        out = learn.loss_bce([(probs, targets, mask)], seq_len=T, batch_size=B)
        assert out.item() == pytest.approx(k * math.log(2.0) / (B * T), rel=1e-12)


def test_loss_bce_false_positives_do_not_dilute():
    # Independent-oracle comparison: adding pure false-positive pairs adds
    # exactly their own BCE; the true pairs' contribution is untouched.
    p_true = 0.8
    probs_a = Tensor(np.array([[p_true]]))
    loss_a = learn.loss_bce([(probs_a, np.array([[1.0]]), np.ones((1, 1)))],
                            seq_len=1)
    probs_b = Tensor(np.array([[p_true, 0.1, 0.1]]))
    targets_b = np.array([[1.0, 0.0, 0.0]])
    loss_b = learn.loss_bce([(probs_b, targets_b, np.ones((1, 3)))], seq_len=1)
    fp_only = -2 * math.log(1 - 0.1)
    assert loss_b.item() == pytest.approx(loss_a.item() + fp_only, rel=1e-10)
    assert loss_b.item() > loss_a.item()


def test_bce_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    store = nc.ParamStore()
    store.add("logits", rng.normal(size=(2, 3)))
    targets = rng.integers(0, 2, size=(2, 3)).astype(np.float64)
    mask = np.ones((2, 3))

    def fn(p):
        probs = nc.sigmoid(p["logits"])
        return learn.masked_bce_sum(probs, targets, mask)

    assert nc.grad_check(fn, store, epsilon=1e-5) < 1e-6


# ---------------------------------------------------------------------------
# Lovasz segmentation loss


def jaccard_oracle(pred: np.ndarray, gt: np.ndarray) -> float:
    inter = np.logical_and(pred, gt).sum()
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return inter / union


def binary_logits(pred: np.ndarray, scale=40.0) -> Tensor:
    fg = np.where(pred > 0, scale, -scale)
    return Tensor(np.stack([np.zeros_like(fg), fg]))


def test_lovasz_equals_one_minus_jaccard_on_all_corners():
    rng = np.random.default_rng(1)
    for code in range(512):
        gt = np.array([(code >> i) & 1 for i in range(9)]).reshape(3, 3)
        preds = [gt, 1 - gt, np.zeros((3, 3), int), np.ones((3, 3), int),
                 rng.integers(0, 2, size=(3, 3))]
        for pred in preds:
            loss = learn.lovasz_softmax_frame(binary_logits(pred), gt).item()
            assert abs(loss - (1.0 - jaccard_oracle(pred, gt))) < 1e-10


def test_lovasz_perfect_saturated_prediction():
    gt = np.zeros((4, 4), int)
    gt[1:3, 1:3] = 1
    loss = learn.lovasz_softmax_frame(binary_logits(gt), gt).item()
    assert loss < 1e-10


def test_lovasz_all_background_prediction_in_unit_interval():
    gt = np.zeros((3, 3), int)
    gt[0, 0] = 1
    pred = np.zeros((3, 3), int)
    loss = learn.lovasz_softmax_frame(binary_logits(pred), gt).item()
    assert 0.0 < loss <= 1.0


def test_lovasz_multiclass_range_and_gradients():
    rng = np.random.default_rng(2)
    store = nc.ParamStore()
    store.add("logits", rng.normal(size=(3, 4, 4)))
    labels = rng.integers(0, 3, size=(4, 4))

    def fn(p):
        return learn.lovasz_softmax_frame(p["logits"], labels)

    val = fn(store).item()
    assert 0.0 <= val <= 1.0
    assert nc.grad_check(fn, store, epsilon=1e-5) < 1e-4


# ---------------------------------------------------------------------------
# total loss


def test_total_loss_zeros():
    zero = Tensor(0.0)
    total, bd = learn.total_loss(zero, zero, zero, zero, learn.LossConfig())
    assert total.item() == 0.0 and bd.total == 0.0


def test_total_loss_weights():
    one = Tensor(1.0)
    total, bd = learn.total_loss(one, one, one, one, learn.LossConfig())
    assert total.item() == pytest.approx(7.0)
    assert bd.match == 1.0


def test_loss_config_rejects_negative_lambda():
    with pytest.raises(ValueError):
        learn.LossConfig(lambdas=(1, -1, 1, 1))


# ---------------------------------------------------------------------------
# unrolled sequences and training


def build_dataset(world_seeds, noise=None, crossing=False):
    data = []
    noise = noise or sw.NoiseConfig(miss_prob=0.05, class_temperature=0.25,
                                    box_jitter=0.005, appearance_noise=0.05,
                                    false_positive_rate=0.3)
    for s in world_seeds:
        cfg = small_world(seed=s)
        gt = (sw.crossing_sequence(cfg) if crossing else sw.generate_sequence(cfg))
        det = sw.corrupt(gt, noise, seed=s + 5000)
        data.append((det.frames, gt))
    return data


def test_unroll_sequence_identities_and_targets():
    config = small_config()
    model = tm.build_model(config, seed=0)
    model.params["init_head/b"].data[...] = 2.0  # births everywhere
    gt = sw.generate_sequence(small_world(seed=3))
    det = sw.corrupt(gt, sw.NoiseConfig(), seed=4)
    parts = learn.unroll_sequence(model, det.frames, gt, learn.LossConfig(),
                                  tm.Thresholds(), mode="train")
    for key in ("score", "seg", "match", "init"):
        v = parts[key].item()
        assert np.isfinite(v) and v >= 0.0
    # tracks were born and carry gt identities via their init detections
    assert len(parts["memory"]) >= len(gt.objects)


def test_one_adam_step_descends_on_fixed_batch():
    config = small_config()
    model = tm.build_model(config, seed=1)
    data = build_dataset([11])
    det_frames, gt = data[0]

    def batch_loss():
        with nc.Tape() as tape:
            total, _ = learn.sequence_loss(model, det_frames, gt,
                                           learn.LossConfig(), tm.Thresholds())
        return total, tape

    total0, tape = batch_loss()
    grads = nc.backward(tape, total0, model.params)
    state = nc.AdamState(model.params)
    nc.adam_step(model.params, grads, state, lr=1e-4, weight_decay=0.0)
    total1, _ = batch_loss()
    assert total1.item() < total0.item()


def test_training_reproducible():
    def run():
        config = small_config()
        model = tm.build_model(config, seed=2)
        data = build_dataset([21, 22])
        curve = learn.train(data, model, learn.TrainConfig(
            iterations=5, batch_size=1, lr=1e-3, seed=9))
        return [b.total for b in curve], model.params.flat_values()

    c1, p1 = run()
    c2, p2 = run()
    assert c1 == c2
    np.testing.assert_array_equal(p1, p2)


def test_divergence_detected_and_reported():
    config = small_config(gate_mode="none")
    model = tm.build_model(config, seed=3)
    for t in model.params.tensors():
        t.data *= 40.0  # blow up the recurrent loop deliberately
    data = build_dataset([31])
    with np.errstate(all="ignore"), pytest.raises(learn.DivergenceError) as info:
        learn.train(data, model, learn.TrainConfig(iterations=50, batch_size=1,
                                                   lr=10.0, seed=0))
    assert info.value.iteration >= 0


def test_checkpoint_roundtrip(tmp_path):
    config = small_config(limited_gnn=True)
    model = tm.build_model(config, seed=4)
    path = tmp_path / "model.npz"
    learn.save_checkpoint(path, model, extra={"seed": 4})
    back = learn.load_checkpoint(path)
    assert back.config == config
    np.testing.assert_array_equal(back.params.flat_values(),
                                  model.params.flat_values())


def test_checkpoint_rejects_wrong_format(tmp_path):
    path = tmp_path / "bad.npz"
    np.savez(path, flat=np.zeros(3), meta=np.array('{"format": "other"}'))
    with pytest.raises(ValueError):
        learn.load_checkpoint(path)


def test_train_config_schema_round_trip():
    d = {"T": 8, "batch_size": 3, "lr": 1e-3, "weight_decay": 0.0,
         "lambdas": [1, 2, 3, 4], "seed": 5, "D": 16, "blocks": 1,
         "ablations": {"limited_gnn": True}}
    model_config, train_config, thresholds = learn.train_config_from_dict(d)
    assert model_config.embed_dim == 16 and model_config.limited_gnn
    assert train_config.loss.lambdas == (1, 2, 3, 4)
    assert thresholds.init_train == 0.31 and thresholds.init_infer == 0.13


def test_train_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown"):
        learn.train_config_from_dict({"T": 8, "bogus": 1})


def test_batch_duplication_keeps_per_sequence_loss():
    config = small_config()
    model = tm.build_model(config, seed=6)
    data = build_dataset([41])
    det_frames, gt = data[0]
    total_single, _ = learn.sequence_loss(model, det_frames, gt,
                                          learn.LossConfig(), tm.Thresholds())
    # the batch mean of two copies equals the single-sequence loss
    totals = []
    for _ in range(2):
        t, _ = learn.sequence_loss(model, det_frames, gt, learn.LossConfig(),
                                   tm.Thresholds())
        totals.append(t.item())
    assert np.mean(totals) == pytest.approx(total_single.item(), rel=1e-12)
