import numpy as np
import pytest

from stnet.detection import GroundTruth
from stnet.numerics import InputError, make_rng
from stnet.synthdata import (SyntheticDataset, generate_dataset, generate_video,
                             lesion_field, read_dataset, read_tensor,
                             sample_clip, single_frame_clip, write_dataset,
                             write_tensor)


def test_generation_deterministic():
    a = generate_video(seed=5, n_frames=8, difficulty=0.4)
    b = generate_video(seed=5, n_frames=8, difficulty=0.4)
    for fa, fb in zip(a.frames, b.frames):
        assert np.array_equal(fa, fb)
    for ga, gb in zip(a.annotations, b.annotations):
        assert np.array_equal(ga.boxes, gb.boxes)
        assert np.array_equal(ga.labels, gb.labels)
    assert np.array_equal(a.occluded, b.occluded)


def test_difficulty_zero_no_occlusion_and_contrast():
    video = generate_video(seed=11, n_frames=16, difficulty=0.0)
    assert not video.occluded.any()
    for f in range(len(video.frames)):
        for contrast in _lesion_contrasts(video, f):
            assert contrast >= 0.3


def _lesion_contrasts(video, f):
    """Mean intensity of each lesion's inner half-ellipse above background."""
    img = video.frames[f][0]
    h, w = img.shape
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    gt = video.annotations[f]
    outside = np.ones_like(img, dtype=bool)
    inners = []
    for cx, cy, bw, bh in gt.boxes:
        r = np.sqrt(((xs[None, :] - cx) / (bw / 2)) ** 2
                    + ((ys[:, None] - cy) / (bh / 2)) ** 2)
        inners.append(r <= 0.5)
        outside &= r > 1.2
    bg = img[outside].mean()
    return [img[m].mean() - bg for m in inners]


def test_occluded_frames_lose_contrast():
    video = generate_video(seed=13, n_frames=32, difficulty=0.5)
    assert video.occluded.any() and not video.occluded.all()
    for f in range(len(video.frames)):
        for contrast in _lesion_contrasts(video, f):
            if video.occluded[f]:
                assert contrast < 0.1
            else:
                assert contrast >= 0.3


def test_occlusion_count_regression():
    # frozen from the seeded generator: flags are a pure function of the seed
    video = generate_video(seed=42, height=64, width=64, n_frames=32, difficulty=0.3)
    count = int(video.occluded.sum())
    assert count == 8
    video2 = generate_video(seed=42, height=64, width=64, n_frames=32, difficulty=0.3)
    assert int(video2.occluded.sum()) == count


def test_trajectory_is_continuous():
    video = generate_video(seed=17, n_frames=32, difficulty=0.0)
    for prev, cur in zip(video.annotations, video.annotations[1:]):
        delta = np.abs(cur.boxes[:, :2] - prev.boxes[:, :2]).max()
        assert delta <= 0.05


def test_boxes_inside_unit_square():
    for seed in range(5):
        video = generate_video(seed=seed, n_frames=12, difficulty=0.0)
        for gt in video.annotations:
            gt.validate()


def test_lesion_support_inside_tight_box():
    rng = make_rng(80)
    h = w = 64
    for _ in range(20):
        a = rng.uniform(0.1, 0.17)
        b = rng.uniform(0.1, 0.17)
        cx = rng.uniform(a + 0.02, 1 - a - 0.02)
        cy = rng.uniform(b + 0.02, 1 - b - 0.02)
        field = lesion_field(h, w, cx, cy, a, b, 0.7, cored=bool(rng.integers(2)))
        ys, xs = np.nonzero(field > 0)
        px = (xs + 0.5) / w
        py = (ys + 0.5) / h
        # support strictly inside the box...
        assert px.min() >= cx - a and px.max() <= cx + a
        assert py.min() >= cy - b and py.max() <= cy + b
        # ...and tight to within one pixel per side
        assert px.min() - (cx - a) <= 1.0 / w
        assert (cx + a) - px.max() <= 1.0 / w
        assert py.min() - (cy - b) <= 1.0 / h
        assert (cy + b) - py.max() <= 1.0 / h


def test_bright_pixels_only_inside_boxes():
    video = generate_video(seed=19, n_frames=10, difficulty=0.0)
    h, w = video.frames[0][0].shape
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    for frame, gt in zip(video.frames, video.annotations):
        bright = frame[0] > 0.45  # background tops out at 0.2 + noise
        inside = np.zeros_like(bright)
        for cx, cy, bw, bh in gt.boxes:
            inside |= ((np.abs(xs[None, :] - cx) <= bw / 2)
                       & (np.abs(ys[:, None] - cy) <= bh / 2))
        assert not (bright & ~inside).any()


# ---------------------------------------------------------------------------
# clip sampling

def test_sample_clip_constrained_pool():
    video = generate_video(seed=23, n_frames=7, difficulty=0.0)
    clip = sample_clip(video, 1, make_rng(0))
    assert clip.frame_indices[:3] == [0, 1, 2]
    assert set(clip.frame_indices[3:]) <= {3, 4, 5, 6}
    assert len(set(clip.frame_indices)) == 6


def test_sample_clip_boundary_rejected():
    video = generate_video(seed=23, n_frames=8, difficulty=0.0)
    with pytest.raises(InputError):
        sample_clip(video, 0, make_rng(0))
    with pytest.raises(InputError):
        sample_clip(video, 7, make_rng(0))


def test_sample_clip_regression_pinned():
    video = generate_video(seed=29, n_frames=12, difficulty=0.0)
    clip = sample_clip(video, 5, make_rng(1234))
    assert clip.frame_indices == [4, 5, 6, 9, 10, 11]
    clip2 = sample_clip(video, 5, make_rng(1234))
    assert clip2.frame_indices == clip.frame_indices


def test_single_frame_clip():
    video = generate_video(seed=31, n_frames=8, difficulty=0.0)
    clip = single_frame_clip(video, 0)
    assert clip.frame_indices == [0]
    with pytest.raises(InputError):
        single_frame_clip(video, 8)


# ---------------------------------------------------------------------------
# dataset IO

def test_dataset_roundtrip(tmp_path):
    ds = generate_dataset(seed=37, n_videos=3, n_frames=8, difficulty=0.2)
    out = str(tmp_path / "ds")
    write_dataset(ds, out)
    back = read_dataset(out)
    assert back.seed == 37 and back.difficulty == pytest.approx(0.2)
    assert len(back.videos) == 3
    for va, vb in zip(ds.videos, back.videos):
        assert va.video_id == vb.video_id
        for fa, fb in zip(va.frames, vb.frames):
            assert np.array_equal(fa, fb)
        for ga, gb in zip(va.annotations, vb.annotations):
            assert np.array_equal(ga.boxes, gb.boxes)
            assert np.array_equal(ga.labels, gb.labels)


def test_tensor_roundtrip(tmp_path):
    rng = make_rng(82)
    arr = rng.standard_normal((1, 5, 7)).astype(np.float32)
    path = str(tmp_path / "t.tnsr")
    write_tensor(path, arr)
    assert np.array_equal(read_tensor(path), arr)


def test_truncated_tensor_rejected(tmp_path):
    path = tmp_path / "t.tnsr"
    write_tensor(str(path), np.ones((2, 3), dtype=np.float32))
    data = path.read_bytes()
    path.write_bytes(data[:-5])
    with pytest.raises(InputError, match="t.tnsr"):
        read_tensor(str(path))


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "t.tnsr"
    path.write_bytes(b"JUNKxxxx")
    with pytest.raises(InputError, match="magic"):
        read_tensor(str(path))


def test_invalid_annotation_rejected(tmp_path):
    ds = generate_dataset(seed=41, n_videos=1, n_frames=8)
    out = str(tmp_path / "ds")
    write_dataset(ds, out)
    ann = tmp_path / "ds" / "video_0" / "ann.txt"
    ann.write_text("0 1 0.5 0.5 0 0.2\n")  # w = 0 violates the invariant
    with pytest.raises(InputError, match="frame 0"):
        read_dataset(out)


def test_missing_video_dir_rejected(tmp_path):
    ds = generate_dataset(seed=43, n_videos=2, n_frames=8)
    out = str(tmp_path / "ds")
    write_dataset(ds, out)
    import shutil
    shutil.rmtree(tmp_path / "ds" / "video_1")
    with pytest.raises(InputError, match="video_1"):
        read_dataset(out)
