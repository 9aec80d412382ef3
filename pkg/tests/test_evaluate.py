import numpy as np
import pytest

from expr3d.datagen import make_emotion_clips, make_emotion_prototypes
from expr3d.errors import ContractError, ValidationError
from expr3d.evaluate import (ConfusionMatrix, ExtractionStrategy, clip_feature,
                             confusion_to_rates, downscale_image,
                             ground_truth_strategy, knn_classify,
                             landmark_fit_strategy, leave_one_clip_out,
                             regressor_strategy, scale_sweep)
from expr3d.model import make_synthetic_model


@pytest.fixture(scope="module")
def model():
    return make_synthetic_model(n=120, s=4, m=6, n_landmarks=16, seed=21,
                                expr_scale=15.0)


@pytest.fixture(scope="module")
def clip_data(model):
    protos = make_emotion_prototypes(model, seed=2)
    return make_emotion_clips(model, protos, clips_per_class=3, frames_per_clip=2,
                              image_size=64, landmark_noise_sigma=0.0,
                              alpha_noise_sigma=0.0, seed=8, render=False)


def knn_oracle(feats, labels, q, k):
    """Rank by (distance, index), majority vote, nearest tied class wins."""
    def dist(i):
        return float(np.sqrt(np.sum((np.asarray(feats[i]) - q) ** 2)))

    order = sorted(range(len(labels)), key=lambda i: (dist(i), i))[:k]
    votes = {}
    for i in order:
        votes[labels[i]] = votes.get(labels[i], 0) + 1
    top = max(votes.values())
    tied = {lab for lab, c in votes.items() if c == top}
    if len(tied) == 1:
        return tied.pop()
    for i in order:
        if labels[i] in tied:
            return labels[i]


def test_clip_feature_protocols():
    stack = np.array([[1.0, 2.0], [3.0, 6.0]])
    assert np.array_equal(clip_feature(stack), np.array([2.0, 4.0]))
    assert np.array_equal(clip_feature(stack, "peak"), np.array([3.0, 6.0]))
    with pytest.raises(ContractError):
        clip_feature(np.zeros((0, 3)))
    with pytest.raises(ContractError):
        clip_feature(np.zeros(3))
    with pytest.raises(ValidationError):
        clip_feature(stack, "median")


def test_knn_matches_bruteforce_oracle():
    rng = np.random.default_rng(0)
    classes = ["a", "b", "c"]
    for trial in range(50):
        n = int(rng.integers(3, 20))
        d = int(rng.integers(1, 5))
        feats = rng.normal(0, 1, (n, d))
        # inject exact duplicates to force distance ties
        if n >= 6:
            feats[1] = feats[0]
            feats[4] = feats[2]
        labels = [classes[i] for i in rng.integers(0, 3, n)]
        q = rng.normal(0, 1, d)
        k = int(rng.integers(1, n + 1))
        assert knn_classify(feats, labels, q, k) == knn_oracle(feats, labels, q, k)


def test_knn_distance_tie_prefers_lower_index():
    feats = np.array([[1.0, 1.0], [1.0, 1.0]])
    assert knn_classify(feats, ["b", "a"], np.array([0.0, 0.0]), k=1) == "b"


def test_knn_vote_tie_prefers_nearest():
    feats = np.array([[1.0], [2.0], [3.0], [4.0]])
    labels = ["a", "b", "b", "a"]
    # votes split 2-2; index 0 is nearest to the query, so "a" wins
    assert knn_classify(feats, labels, np.array([0.0]), k=4) == "a"


def test_knn_validation():
    feats = np.ones((3, 2))
    with pytest.raises(ValidationError):
        knn_classify(np.zeros((0, 2)), [], np.zeros(2), 1)
    with pytest.raises(ContractError):
        knn_classify(feats, ["a", "b"], np.zeros(2), 1)
    with pytest.raises(ContractError):
        knn_classify(feats, ["a", "b", "c"], np.zeros(2), 4)
    with pytest.raises(ContractError):
        knn_classify(feats, ["a", "b", "c"], np.zeros(3), 1)


def test_confusion_matrix_and_rates():
    cm = ConfusionMatrix(("x", "y", "z"),
                         np.array([[2, 0, 0], [1, 1, 0], [0, 0, 0]]))
    assert cm.accuracy == pytest.approx(3 / 4)
    rates = confusion_to_rates(cm)
    assert np.array_equal(rates[0], [1.0, 0.0, 0.0])
    assert np.array_equal(rates[1], [0.5, 0.5, 0.0])
    assert np.array_equal(rates[2], [0.0, 0.0, 0.0])  # empty row stays zero
    with pytest.raises(ContractError):
        ConfusionMatrix(("x",), np.zeros((2, 2), dtype=int))
    with pytest.raises(ValidationError):
        ConfusionMatrix(("x", "y"), np.array([[1, -1], [0, 0]]))
    assert ConfusionMatrix(("x",), np.zeros((1, 1), dtype=int)).accuracy == 0.0


def test_loco_two_identical_class_clips():
    # each held-out clip finds its twin: perfect accuracy
    acc, cm = leave_one_clip_out(["c0", "c1"], ["joy", "joy"],
                                 [np.zeros(3), np.zeros(3)], k=5)
    assert acc == 1.0
    assert cm.counts.sum() == 2


def test_loco_two_disjoint_classes_fails_by_construction():
    # the only training clip always has the other label
    acc, cm = leave_one_clip_out(["c0", "c1"], ["joy", "fear"],
                                 [np.zeros(3), np.ones(3)], k=1)
    assert acc == 0.0
    assert cm.counts[cm.classes.index("joy"), cm.classes.index("fear")] == 1


def test_loco_permutation_invariance():
    rng = np.random.default_rng(5)
    centers = {"a": np.array([0.0, 0.0]), "b": np.array([4.0, 0.0]),
               "c": np.array([0.0, 4.0])}
    ids, labels, feats = [], [], []
    for lab, c in centers.items():
        for i in range(4):
            ids.append(f"{lab}{i}")
            labels.append(lab)
            feats.append(c + 0.1 * rng.normal(0, 1, 2))
    acc, cm = leave_one_clip_out(ids, labels, feats, k=3)
    assert acc == 1.0
    perm = rng.permutation(len(ids))
    acc2, cm2 = leave_one_clip_out([ids[i] for i in perm],
                                   [labels[i] for i in perm],
                                   [feats[i] for i in perm], k=3)
    assert acc2 == acc
    assert np.array_equal(cm2.counts, cm.counts)
    assert cm2.classes == cm.classes


def test_loco_isometry_invariance():
    rng = np.random.default_rng(9)
    ids, labels, feats = [], [], []
    for ci, lab in enumerate(["p", "q", "r"]):
        for i in range(3):
            ids.append(f"{lab}{i}")
            labels.append(lab)
            feats.append(np.eye(3)[ci] * 5.0 + 0.2 * rng.normal(0, 1, 3))
    q_mat, _ = np.linalg.qr(rng.normal(0, 1, (3, 3)))
    shift = rng.normal(0, 10, 3)
    moved = [q_mat @ f + shift for f in feats]
    acc, cm = leave_one_clip_out(ids, labels, feats, k=3)
    acc2, cm2 = leave_one_clip_out(ids, labels, moved, k=3)
    assert acc == acc2
    assert np.array_equal(cm.counts, cm2.counts)


def test_loco_uniform_features_deterministic():
    # all features identical: everything rides on the documented tie rules
    ids = ["c0", "c1", "c2", "c3"]
    labels = ["a", "a", "b", "b"]
    feats = [np.zeros(2)] * 4
    acc, cm = leave_one_clip_out(ids, labels, feats, k=3)
    acc2, cm2 = leave_one_clip_out(ids, labels, feats, k=3)
    assert acc == acc2
    assert np.array_equal(cm.counts, cm2.counts)


def test_loco_validation():
    f = [np.zeros(2)] * 2
    with pytest.raises(ValidationError):
        leave_one_clip_out(["a"], ["x"], [np.zeros(2)])
    with pytest.raises(ValidationError):
        leave_one_clip_out(["a", "a"], ["x", "x"], f)
    with pytest.raises(ContractError):
        leave_one_clip_out(["a", "b"], ["x"], f)
    with pytest.raises(ValidationError):
        leave_one_clip_out(["a", "b"], ["x", "y"], f, classes=("x",))
    with pytest.raises(ContractError):
        leave_one_clip_out(["a", "b"], ["x", "x"], f, k=0)


def test_loco_k_capped_at_training_size():
    # 2 clips: each round trains on 1, so k=5 must quietly become k=1
    acc, _ = leave_one_clip_out(["c0", "c1"], ["joy", "joy"],
                                [np.zeros(2), np.ones(2)], k=5)
    assert acc == 1.0


def test_downscale_image_basics():
    img = np.random.default_rng(1).uniform(0, 1, (16, 16))
    assert np.array_equal(downscale_image(img, 1.0), img)
    half = downscale_image(img, 0.5)
    assert half.shape == (8, 8)
    # side rounding is round-half-even on side * factor
    assert downscale_image(np.zeros((7, 7)), 0.5).shape == (4, 4)
    assert downscale_image(np.zeros((5, 5)), 0.5).shape == (2, 2)
    with pytest.raises(ValidationError):
        downscale_image(img, 0.0)
    with pytest.raises(ValidationError):
        downscale_image(img, 1.2)
    with pytest.raises(ContractError):
        downscale_image(np.zeros(5), 0.5)


def test_ground_truth_strategy(clip_data):
    strat = ground_truth_strategy()
    fr = clip_data.clips[0].frames[0]
    rng = np.random.default_rng(0)
    assert np.array_equal(strat.extract(fr, 1.0, rng), fr.eta_true)
    import dataclasses
    bare = dataclasses.replace(fr, eta_true=None)
    with pytest.raises(ValidationError):
        strat.extract(bare, 1.0, rng)


def test_landmark_strategy_recovers_truth_noiseless(model, clip_data):
    strat = landmark_fit_strategy(model, noise_sigma0=0.0)
    rng = np.random.default_rng(0)
    for clip in clip_data.clips[:3]:
        for fr in clip.frames:
            eta = strat.extract(fr, 1.0, rng)
            assert np.max(np.abs(eta - fr.eta_true)) < 1e-4


def test_landmark_strategy_noise_depends_on_scale(model, clip_data):
    strat = landmark_fit_strategy(model, noise_sigma0=0.5)
    fr = clip_data.clips[0].frames[0]
    a = strat.extract(fr, 1.0, np.random.default_rng(7))
    b = strat.extract(fr, 1.0, np.random.default_rng(7))
    c = strat.extract(fr, 0.5, np.random.default_rng(7))
    assert np.array_equal(a, b)  # same rng, same scale: identical
    assert not np.array_equal(a, c)  # smaller scale, louder noise


def test_regressor_strategy_runs(model, clip_data):
    from expr3d.regressor import build_default_net

    net = build_default_net(16, model.expr_dim, seed=0, conv_channels=(2,),
                            kernel=3, hidden=8)
    strat = regressor_strategy(net)
    fr = clip_data.clips[0].frames[0]
    import dataclasses
    rng = np.random.default_rng(0)
    with pytest.raises(ValidationError):
        strat.extract(fr, 1.0, rng)  # clip_data was generated without images
    with_img = dataclasses.replace(fr, image=np.random.default_rng(3).uniform(
        0, 1, (64, 64)))
    eta = strat.extract(with_img, 1.0, rng)
    assert eta.shape == (model.expr_dim,)


def test_sweep_matches_manual_loco(model, clip_data):
    strategies = [ground_truth_strategy(),
                  landmark_fit_strategy(model, noise_sigma0=0.0)]
    result = scale_sweep(clip_data, strategies, scales=(1.0, 0.5), k=5, seed=3)

    ids = [c.clip_id for c in clip_data.clips]
    labels = [c.emotion for c in clip_data.clips]
    feats = [clip_feature([fr.eta_true for fr in c.frames]) for c in clip_data.clips]
    want_acc, _ = leave_one_clip_out(ids, labels, feats, k=5,
                                     classes=clip_data.classes)

    assert result.scales == (1.0, 0.5)
    assert result.methods == ("ground_truth", "landmark_fit")
    # ground truth ignores resolution entirely
    assert result.accuracy_for("ground_truth")[0] == want_acc
    assert result.accuracy_for("ground_truth")[1] == want_acc
    # a noiseless landmark fit is as good as the truth
    assert result.accuracy_for("landmark_fit")[0] == want_acc
    assert np.all(result.skipped_frames == 0)


def test_sweep_deterministic(model, clip_data):
    strategies = [landmark_fit_strategy(model, noise_sigma0=0.5)]
    a = scale_sweep(clip_data, strategies, scales=(1.0, 0.4), k=5, seed=11)
    b = scale_sweep(clip_data, strategies, scales=(1.0, 0.4), k=5, seed=11)
    assert np.array_equal(a.accuracy, b.accuracy)
    assert np.array_equal(a.skipped_frames, b.skipped_frames)


def test_sweep_counts_skips(clip_data):
    def flaky(frame, scale, rng):
        if frame.frame_id.endswith("f001"):
            raise ValidationError("synthetic failure")
        return frame.eta_true

    result = scale_sweep(clip_data,
                         [ground_truth_strategy(),
                          ExtractionStrategy("flaky", flaky)],
                         scales=(1.0, 0.5), k=3, seed=0)
    n_clips = len(clip_data.clips)
    assert np.array_equal(result.skipped_frames[0], [0, 0])
    assert np.array_equal(result.skipped_frames[1], [n_clips, n_clips])


def test_sweep_validation(model, clip_data):
    strat = [ground_truth_strategy()]
    with pytest.raises(ValidationError):
        scale_sweep(clip_data, strat, scales=(0.8, 0.5))
    with pytest.raises(ValidationError):
        scale_sweep(clip_data, strat, scales=(1.0, 0.5, 0.5))
    with pytest.raises(ValidationError):
        scale_sweep(clip_data, strat, scales=())
    with pytest.raises(ValidationError):
        scale_sweep(clip_data, [], scales=(1.0,))
    with pytest.raises(ValidationError):
        scale_sweep(clip_data, [ground_truth_strategy(), ground_truth_strategy()],
                    scales=(1.0,))
    from expr3d.dataset import Clip, ClipDataset
    tiny = ClipDataset([Clip("only", "anger", clip_data.clips[0].frames)],
                       classes=clip_data.classes)
    with pytest.raises(ValidationError):
        scale_sweep(tiny, strat, scales=(1.0,))
