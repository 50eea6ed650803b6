import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_model, unit_scale
from point2vec.config import AugmentationSpec, FinetuneConfig
from point2vec.downstream import (
    ClassificationHead,
    ClassificationTrainer,
    PartSegHead,
    average_layers,
    classification_report,
    classify_forward,
    confusion_matrix,
    label_smoothing_loss,
    miou_scores,
    part_ious,
    partseg_forward,
    pca_rgb,
    pool_tokens,
    sample_fewshot_episode,
)
from point2vec.geometry import interpolation_weights
from point2vec.numerics import Tensor, check_gradients
from point2vec.numerics import functional as F
from point2vec.numerics.errors import ParameterError, ShapeError
from point2vec.pretraining import PointEncoder


def f64(x):
    return Tensor(np.asarray(x, dtype=np.float64), dtype=np.float64)


# -- classification head ---------------------------------------------------------------------------
def test_single_token_pool_is_duplicated_token():
    tok = np.random.default_rng(0).standard_normal((1, 6))
    pooled = pool_tokens(f64(tok)).data
    np.testing.assert_array_equal(pooled, np.concatenate([tok[0], tok[0]]))


def test_logits_invariant_to_token_order():
    rng = np.random.default_rng(1)
    head = ClassificationHead(4, 3, rng, hidden=(8,)).to(np.float64)
    toks = rng.standard_normal((2, 7, 4))
    perm = rng.permutation(7)
    a = classify_forward([f64(toks)], head).data
    b = classify_forward([f64(toks[:, perm])], head).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
    assert a.shape == (2, 3)
    np.testing.assert_allclose(F.softmax(f64(a)).data.sum(-1), 1.0, atol=1e-12)


def test_head_rejects_wrong_width():
    head = ClassificationHead(4, 3, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        head(Tensor(np.zeros((1, 4))))


# -- label smoothing ---------------------------------------------------------------------------------------
def test_label_smoothing_zero_is_plain_cross_entropy():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((5, 4))
    labels = rng.integers(0, 4, 5)
    logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    expected = -logp[np.arange(5), labels].mean()
    assert label_smoothing_loss(f64(logits), labels, 0.0).item() == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("eps", [0.0, 0.2, 0.7])
def test_uniform_logits_give_log_c(eps):
    assert label_smoothing_loss(f64(np.zeros((3, 6))), [0, 2, 5], eps).item() == pytest.approx(math.log(6))


def test_label_smoothing_two_class_hand_value():
    got = label_smoothing_loss(f64([[math.log(3), 0.0]]), [0], 0.2).item()
    assert got == pytest.approx(0.8 * math.log(4 / 3) + 0.2 * math.log(4), rel=1e-12)


# -- part segmentation ---------------------------------------------------------------------------------------
def test_identical_layers_average_to_one_of_them():
    t = f64(np.random.default_rng(0).standard_normal((5, 4)))
    out = average_layers([t, t, t, t, t, t], (2, 4, 6)).data
    np.testing.assert_allclose(out, t.data, rtol=1e-15)


def test_average_layers_rejects_missing_layer():
    with pytest.raises(ParameterError):
        average_layers([f64(np.zeros((2, 2)))] * 6, (4, 8, 12))


def _partseg_toy(seed=0):
    rng = np.random.default_rng(seed)
    head = unit_scale(PartSegHead(4, 2, 3, rng, hidden=(6,), dropout=0.0).to(np.float64), seed)
    pts = rng.standard_normal((16, 3))
    centers = pts[:4]
    layers = [f64(rng.standard_normal((4, 4))) for _ in range(2)]
    return head, pts, centers, layers


def test_partseg_logits_shape():
    head, pts, centers, layers = _partseg_toy()
    out = partseg_forward(layers, centers, pts, np.array([0.0, 1.0]), head, (1, 2))
    assert out.shape == (16, 3)


def test_point_at_center_gets_its_token():
    head, pts, centers, layers = _partseg_toy()
    w = interpolation_weights(pts, centers, head.k_interp)
    for i in range(4):  # the first four points are the centers
        assert w[i, i] >= 1 - 1e-6


def test_partseg_gradients_sixteen_points():
    head, pts, centers, layers = _partseg_toy(1)
    r = f64(np.random.default_rng(5).standard_normal((16, 3)))

    def loss():
        return (partseg_forward(layers, centers, pts, np.array([1.0, 0.0]), head, (1, 2)) * r).sum()

    assert check_gradients(loss, [*layers, *head.parameters()]) < 1e-4


def test_part_iou_hand_case():
    pred = np.array([0, 0, 1, 1, 2])
    label = np.array([0, 1, 1, 1, 2])
    np.testing.assert_allclose(part_ious(pred, label, [0, 1, 2, 3]), [0.5, 2 / 3, 1.0, 1.0])


def test_miou_instance_vs_category_average():
    parts = {0: [0, 1], 1: [2, 3]}
    preds = [np.array([0, 0]), np.array([0, 1]), np.array([2, 3])]
    labels = [np.array([0, 1]), np.array([0, 1]), np.array([2, 3])]
    s = miou_scores(preds, labels, [0, 0, 1], parts)
    inst = [0.25, 1.0, 1.0]  # (1/2 + 0) / 2 for the first instance
    assert s["mIoU_I"] == pytest.approx(np.mean(inst))
    assert s["mIoU_C"] == pytest.approx(np.mean([np.mean(inst[:2]), 1.0]))


# -- few-shot ------------------------------------------------------------------------------------------
@pytest.mark.parametrize("way,shot,n_sup,n_qry", [(5, 10, 50, 100), (10, 20, 200, 200)])
def test_episode_sizes(way, shot, n_sup, n_qry):
    labels = np.repeat(np.arange(12), 45)
    ep = sample_fewshot_episode(labels, way, shot, np.random.default_rng(0))
    assert len(ep.support) == n_sup and len(ep.query) == n_qry
    assert set(np.unique(ep.support_labels)) == set(range(way))


def test_episodes_disjoint_and_consistent():
    labels = np.repeat(np.arange(10), 40)
    for seed in range(100):
        ep = sample_fewshot_episode(labels, 5, 10, np.random.default_rng(seed))
        assert not set(ep.support) & set(ep.query)
        assert len(set(ep.support)) == 50 and len(set(ep.query)) == 100
        np.testing.assert_array_equal(labels[ep.support], ep.classes[ep.support_labels])
        np.testing.assert_array_equal(labels[ep.query], ep.classes[ep.query_labels])


def test_episode_errors_name_the_shortfall():
    with pytest.raises(ParameterError, match="dataset has 3"):
        sample_fewshot_episode(np.repeat(np.arange(3), 40), 5, 10, np.random.default_rng(0))
    with pytest.raises(ParameterError, match=r"'\w+' has 20 instances, episode needs 30"):
        sample_fewshot_episode(np.repeat(np.arange(5), 20), 5, 10, np.random.default_rng(0),
                               class_names=["sphere", "cube", "cylinder", "cone", "torus"])


# -- confusion matrix -------------------------------------------------------------------------------------
def test_confusion_perfect():
    y = np.array([0, 1, 2, 2, 1])
    cm = confusion_matrix(y, y, 3)
    assert np.count_nonzero(cm.counts - np.diag(np.diag(cm.counts))) == 0
    np.testing.assert_array_equal(np.diag(cm.row_normalized), 1.0)
    np.testing.assert_array_equal(np.diag(cm.column_normalized), 1.0)


def test_confusion_single_predicted_class():
    cm = confusion_matrix(np.full(6, 2), np.array([0, 1, 2, 0, 1, 2]), 3)
    assert np.flatnonzero(cm.counts.sum(axis=0)).tolist() == [2]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_confusion_matches_tally(seed):
    rng = np.random.default_rng(seed)
    y, p = rng.integers(0, 3, 40), rng.integers(0, 3, 40)
    cm = confusion_matrix(p, y, 3)
    for i in range(3):
        for j in range(3):
            assert cm.counts[i, j] == sum(1 for a, b in zip(y, p) if a == i and b == j)
    rep = classification_report(p, y, 3)
    assert rep["overall_accuracy"] == pytest.approx(np.mean(p == y))


def test_confusion_range_check():
    with pytest.raises(ParameterError):
        confusion_matrix([0, 3], [0, 1], 3)


# -- PCA colors ------------------------------------------------------------------------------------------
def test_pca_axis_aligned_features_map_to_axes():
    # points on the coordinate axes: the sample covariance is exactly diagonal
    scales = np.array([1.0, 5.0, 2.0])
    x = np.concatenate([np.outer(np.arange(-3.0, 4.0), scales[i] * np.eye(3)[i]) for i in range(3)])
    colors = pca_rgb(x)
    # largest variance axis (1) -> red, then axis 2 -> green, axis 0 -> blue
    for channel, axis in ((0, 1), (1, 2), (2, 0)):
        c = np.corrcoef(colors[:, channel], x[:, axis])[0, 1]
        assert abs(c) > 1 - 1e-12


def test_pca_duplicates_same_color_and_range():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((30, 8))
    x[10] = x[3]
    colors = pca_rgb([x[:15], x[15:]])
    assert colors[0][10].tolist() == colors[0][3].tolist()
    allc = np.concatenate(colors)
    assert allc.min() >= 0.0 and allc.max() <= 1.0


def test_pca_top_components_match_svd_oracle():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((100, 8)) @ rng.standard_normal((8, 8))
    colors = pca_rgb(x)
    xc = x - x.mean(0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    for c in range(3):
        assert abs(np.corrcoef(colors[:, c], xc @ vt[c])[0, 1]) > 1 - 1e-10
    top = (s[:3] ** 2).sum()
    for _ in range(50):
        q, _ = np.linalg.qr(rng.standard_normal((8, 3)))
        assert ((xc @ q) ** 2).sum() <= top * (1 + 1e-12)


def test_pca_low_rank_pads_with_half():
    x = np.zeros((5, 4))
    x[:, 0] = np.arange(5.0)
    colors = pca_rgb(x)
    np.testing.assert_array_equal(colors[:, 1:], 0.5)


# -- fine-tuning trainer ---------------------------------------------------------------------------------------
def _trainer(pretrained, freeze=1, seed=0):
    enc = PointEncoder(tiny_model(), np.random.default_rng(seed))
    cfg = FinetuneConfig(epochs=3, batch_size=5, warmup_epochs=1, freeze_epochs=freeze, head_dims=(8, 8),
                         drop_path=0.1, augment=AugmentationSpec(unit_sphere=True))
    return ClassificationTrainer(enc, 5, cfg, 2, pretrained, seed, num_centers=8, group_size=8)


def test_freeze_window_keeps_encoder_bit_identical(small_clouds):
    pts, labels = small_clouds
    tr = _trainer(pretrained=True, freeze=1)
    before = tr.model.state_dict()
    log = tr.train_epoch(pts, labels)
    after = tr.model.state_dict()
    assert log.frozen
    for name, v in before.items():
        frozen = name.startswith("encoder.") and not name.startswith("encoder.encoder.norm.")
        assert (v.tobytes() == after[name].tobytes()) == frozen, name
    tr.train_epoch(pts, labels)
    assert before["encoder.patch_embed.fc1.weight"].tobytes() != tr.model.state_dict()[
        "encoder.patch_embed.fc1.weight"].tobytes()


def test_scratch_uses_its_own_lr_and_no_freeze(small_clouds):
    pts, labels = small_clouds
    tr = _trainer(pretrained=False, freeze=2)
    assert tr.freeze_epochs == 0
    assert tr.schedule.max_lr == 1e-3
    assert not tr.train_epoch(pts, labels).frozen
    assert _trainer(pretrained=True).schedule.max_lr == 3e-4


def test_predict_is_deterministic(small_clouds):
    pts, labels = small_clouds
    tr = _trainer(pretrained=False)
    tr.train_epoch(pts, labels)
    assert tr.predict(pts).tolist() == tr.predict(pts).tolist()
    assert 0.0 <= tr.accuracy(pts, labels) <= 1.0
