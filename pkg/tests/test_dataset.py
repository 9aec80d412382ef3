import numpy as np
import pytest

from expr3d.dataset import (Clip, ClipDataset, FrameRecord, load_dataset,
                            save_dataset, scale_frame)
from expr3d.datagen import make_emotion_clips, make_emotion_prototypes, sample_frames
from expr3d.errors import (ContractError, FormatError, FormatVersionError,
                           ValidationError)
from expr3d.model import make_synthetic_model
from expr3d.projection import CameraIntrinsics, Pose6DoF


@pytest.fixture(scope="module")
def model():
    # gentle expression scale so small-mesh faces stay inside the frame
    return make_synthetic_model(n=80, s=4, m=6, n_landmarks=16, seed=11,
                                expr_scale=10.0)


def make_frame(fid="f0", sid="s0", L=5, with_extras=True):
    rng = np.random.default_rng(3)
    lm = rng.uniform(5, 50, (L, 2))
    pose = Pose6DoF(np.array([0.01, -0.02, 0.003]), np.array([1.0, -2.0, 350.0]))
    intr = CameraIntrinsics(96.0, np.array([32.0, 32.0]))
    kw = {}
    if with_extras:
        kw = dict(image=rng.uniform(0, 1, (16, 16)),
                  eta_true=rng.normal(0, 1, 6),
                  alpha_est=rng.normal(0, 1, 4))
    return FrameRecord(fid, sid, lm, pose, intr, (4.0, 5.0, 40.0, 40.0), **kw)


def test_frame_validation():
    fr = make_frame()
    assert fr.n_landmarks == 5
    with pytest.raises(ContractError):
        FrameRecord("f", "s", np.zeros(10), fr.pose, fr.intrinsics, (0, 0, 1, 1))
    with pytest.raises(ContractError):
        FrameRecord("f", "s", fr.landmarks, fr.pose, fr.intrinsics, (0, 0, 1))
    with pytest.raises(ValidationError):
        FrameRecord("f", "s", np.array([[np.nan, 1.0]]), fr.pose, fr.intrinsics,
                    (0, 0, 1, 1))


def test_dataset_rejects_duplicates_and_unknown_labels():
    a = make_frame("fa")
    b = make_frame("fb")
    with pytest.raises(ValidationError):
        ClipDataset([Clip("c0", "", [a]), Clip("c0", "", [b])])
    with pytest.raises(ValidationError):
        ClipDataset([Clip("c0", "", [a]), Clip("c1", "", [make_frame("fa")])])
    with pytest.raises(ValidationError):
        ClipDataset([Clip("c0", "joy", [a])], classes=("anger",))
    with pytest.raises(ValidationError):
        ClipDataset([Clip("c0", "", [a])], protocol="middle")


def test_roundtrip_exact(tmp_path, model):
    frames = sample_frames(model, 2, 3, image_size=48, landmark_noise_sigma=0.4,
                           seed=5)
    ds = ClipDataset([Clip("train_000", "", frames)])
    out = tmp_path / "ds"
    save_dataset(ds, str(out))
    back = load_dataset(str(out))

    assert back.protocol == ds.protocol
    assert back.classes == ds.classes
    assert [c.clip_id for c in back.clips] == ["train_000"]
    for orig, got in zip(ds.clips[0].frames, back.clips[0].frames):
        assert got.frame_id == orig.frame_id
        assert got.subject_id == orig.subject_id
        assert np.array_equal(got.landmarks, orig.landmarks)
        assert np.array_equal(got.pose.rotation, orig.pose.rotation)
        assert np.array_equal(got.pose.translation, orig.pose.translation)
        assert got.intrinsics.focal == orig.intrinsics.focal
        assert np.array_equal(got.intrinsics.principal_point,
                              orig.intrinsics.principal_point)
        assert got.bbox == orig.bbox
        assert np.array_equal(got.eta_true, orig.eta_true)
        assert np.array_equal(got.alpha_est, orig.alpha_est)
        # images pass through 8-bit quantization exactly once
        want = np.rint(np.clip(orig.image, 0, 1) * 255.0) / 255.0
        assert np.array_equal(got.image, want)


def test_roundtrip_without_optionals(tmp_path):
    fr = make_frame(with_extras=False)
    ds = ClipDataset([Clip("c0", "", [fr])])
    out = tmp_path / "ds"
    save_dataset(ds, str(out))
    back = load_dataset(str(out))
    got = back.clips[0].frames[0]
    assert got.image is None and got.eta_true is None and got.alpha_est is None


def test_load_images_flag(tmp_path, model):
    frames = sample_frames(model, 1, 1, image_size=32, seed=1)
    save_dataset(ClipDataset([Clip("c0", "", frames)]), str(tmp_path / "d"))
    back = load_dataset(str(tmp_path / "d"), load_images=False)
    assert back.clips[0].frames[0].image is None
    assert back.clips[0].frames[0].landmarks.shape == frames[0].landmarks.shape


def test_load_error_taxonomy(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(str(tmp_path / "missing"))
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "manifest.json").write_text("{not json")
    with pytest.raises(FormatError):
        load_dataset(str(bad))
    (bad / "manifest.json").write_text('{"format": "other", "version": 1}')
    with pytest.raises(FormatError):
        load_dataset(str(bad))
    (bad / "manifest.json").write_text(
        '{"format": "expr3d-dataset", "version": 99, "classes": [], "clips": []}')
    with pytest.raises(FormatVersionError):
        load_dataset(str(bad))
    (bad / "manifest.json").write_text(
        '{"format": "expr3d-dataset", "version": 1, "classes": []}')
    with pytest.raises(FormatError):
        load_dataset(str(bad))


def test_labeled_clip_roundtrip(tmp_path, model):
    protos = make_emotion_prototypes(model, seed=2)
    ds = make_emotion_clips(model, protos, clips_per_class=1, frames_per_clip=2,
                            image_size=48, seed=9)
    save_dataset(ds, str(tmp_path / "clips"))
    back = load_dataset(str(tmp_path / "clips"))
    assert back.classes == protos.classes
    assert sorted(c.emotion for c in back.clips) == sorted(protos.classes)
    for orig, got in zip(ds.clips, back.clips):
        assert got.emotion == orig.emotion
        assert np.array_equal(got.frames[0].eta_true, orig.frames[0].eta_true)


def test_scale_frame_geometry():
    fr = make_frame()
    half = scale_frame(fr, 0.5)
    assert np.array_equal(half.landmarks, fr.landmarks * 0.5)
    assert half.intrinsics.focal == fr.intrinsics.focal * 0.5
    assert np.array_equal(half.intrinsics.principal_point,
                          fr.intrinsics.principal_point * 0.5)
    assert half.bbox == tuple(v * 0.5 for v in fr.bbox)
    assert half.image.shape == (8, 8)
    assert np.array_equal(half.pose.rotation, fr.pose.rotation)
    # factor 1.0 is an exact copy
    same = scale_frame(fr, 1.0)
    assert np.array_equal(same.image, fr.image)
    assert np.array_equal(same.landmarks, fr.landmarks)
    with pytest.raises(ValidationError):
        scale_frame(fr, 0.0)
    with pytest.raises(ValidationError):
        scale_frame(fr, 1.5)
