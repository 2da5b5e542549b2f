"""Deterministic generator of ultrasound-like video clips with exact boxes.

Each video is a dark, noisy, grayscale sequence containing one or two
elliptical lesions with soft inward-blurred boundaries, drifting along a
continuous trajectory with per-frame intensity flicker. The "difficulty"
knob randomly occludes whole frames by dropping lesion contrast toward the
background — the one property that makes temporal fusion pay off, since an
occluded frame still carries its exact ground-truth box.

On-disk layout (all little-endian):
  <dir>/meta.txt                 n_videos / seed / difficulty as key=value
  <dir>/video_<id>/frame_<i>.tnsr  "TNSR" | u8 dtype (1 = f32) | u8 rank |
                                   rank x u32 dims | f32 payload
  <dir>/video_<id>/ann.txt       one record per line:
                                   frame_index class_id cx cy w h
                                   (6 significant digits, space-separated)
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .detection import GroundTruth
from .numerics import InputError, require

TENSOR_MAGIC = b"TNSR"
DTYPE_F32 = 1

# lesion geometry bounds (normalized units)
_SEMI_AXIS_RANGE = (0.12, 0.18)
_STEP_LIMIT = 0.008          # per-frame center displacement per axis
_CONTRAST_RANGE = (0.60, 0.80)
_FLICKER = 0.10
_SECOND_LESION_PROB = 0.2
_OCCLUSION_FACTOR = 0.06     # occluded lesions keep 6% of their contrast
_EDGE_SOFTNESS = 0.35        # inward blur width in ellipse-radius units
_CORE_DIP = 0.55             # malignant lesions lose this much intensity at the core
_CORE_RADIUS = 0.5           # ... within this fraction of the ellipse radius
_BG_BASE = 0.12
_BG_NOISE = 0.06


@dataclass
class SyntheticVideo:
    frames: list                 # [1, H, W] float32 in [0, 1]
    annotations: list            # per-frame GroundTruth
    occluded: np.ndarray         # [n_frames] bool, frame-level occlusion flags
    video_id: int
    seed_key: tuple              # entropy used for this video's RNG


@dataclass
class SyntheticDataset:
    videos: list
    seed: int
    difficulty: float

    def split(self, n_train: int):
        require(0 <= n_train <= len(self.videos), "split: bad train count")
        return self.videos[:n_train], self.videos[n_train:]


@dataclass
class ClipSample:
    frames: list          # 6 frames ordered (k-1, k, k+1, r1, r2, r3)
    frame_indices: list
    target: GroundTruth   # frame k's annotations


def _six_digits(x: float) -> float:
    """Snap to the on-disk 6-significant-digit decimal representation."""
    return float(f"{x:.6g}")


def lesion_field(height: int, width: int, cx: float, cy: float,
                 a: float, b: float, contrast: float,
                 cored: bool = False) -> np.ndarray:
    """Additive intensity of one lesion; support is strictly inside the
    ellipse (cx, cy, a, b), blur runs inward only.

    `cored` lesions (the malignant class) carry a darker center, the visual
    correlate the classifier is supposed to pick up; benign lesions are
    solid.
    """
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    r = np.sqrt(((xs[None, :] - cx) / a) ** 2 + ((ys[:, None] - cy) / b) ** 2)
    s = np.clip((1.0 - r) / _EDGE_SOFTNESS, 0.0, 1.0)
    field = contrast * s * s * (3.0 - 2.0 * s)
    if cored:
        u = np.clip(r / _CORE_RADIUS, 0.0, 1.0)
        field *= 1.0 - _CORE_DIP * (1.0 - u * u * (3.0 - 2.0 * u))
    return field


def generate_video(seed, height: int = 64, width: int = 64, n_frames: int = 32,
                   difficulty: float = 0.0, video_id: int = 0) -> SyntheticVideo:
    """Deterministic video; `seed` may be an int or a tuple of ints."""
    require(height >= 16 and width >= 16 and height % 8 == 0 and width % 8 == 0,
            "generate_video: frame dims must be >= 16 and divisible by 8")
    require(n_frames >= 7, "generate_video: need at least 7 frames")
    require(0.0 <= difficulty <= 1.0, "generate_video: difficulty must be in [0, 1]")
    seed_key = tuple(seed) if isinstance(seed, (tuple, list)) else (int(seed),)
    rng = np.random.default_rng(list(seed_key))

    n_lesions = 1 + int(rng.random() < _SECOND_LESION_PROB)
    lesions = []
    for _ in range(n_lesions):
        a = rng.uniform(*_SEMI_AXIS_RANGE)
        b = rng.uniform(*_SEMI_AXIS_RANGE)
        margin_x = a + 0.02
        margin_y = b + 0.02
        cx = rng.uniform(margin_x, 1.0 - margin_x)
        cy = rng.uniform(margin_y, 1.0 - margin_y)
        vel = rng.uniform(-_STEP_LIMIT, _STEP_LIMIT, size=2)
        label = int(rng.integers(0, 2))
        contrast = rng.uniform(*_CONTRAST_RANGE)
        lesions.append({"a": a, "b": b, "cx": cx, "cy": cy, "vel": vel,
                        "label": label, "contrast": contrast,
                        "mx": margin_x, "my": margin_y})
    occluded = rng.random(n_frames) < difficulty

    frames = []
    annotations = []
    for f in range(n_frames):
        img = _BG_BASE + rng.uniform(0.0, _BG_NOISE, size=(height, width))
        boxes = []
        labels = []
        for les in lesions:
            flicker = 1.0 + rng.uniform(-_FLICKER, _FLICKER)
            c = les["contrast"] * flicker
            if occluded[f]:
                c *= _OCCLUSION_FACTOR
            img += lesion_field(height, width, les["cx"], les["cy"],
                                les["a"], les["b"], c, cored=les["label"] == 1)
            boxes.append([_six_digits(les["cx"]), _six_digits(les["cy"]),
                          _six_digits(2 * les["a"]), _six_digits(2 * les["b"])])
            labels.append(les["label"])
            # advance the trajectory, reflecting at the margins
            for axis, (key, mkey) in enumerate((("cx", "mx"), ("cy", "my"))):
                nxt = les[key] + les["vel"][axis]
                lo, hi = les[mkey], 1.0 - les[mkey]
                if nxt < lo or nxt > hi:
                    les["vel"][axis] = -les["vel"][axis]
                    nxt = les[key] + les["vel"][axis]
                les[key] = float(np.clip(nxt, lo, hi))
        frames.append(np.clip(img, 0.0, 1.0).astype(np.float32)[None])
        annotations.append(GroundTruth(np.array(boxes, dtype=np.float64),
                                       np.array(labels, dtype=np.int64)))
    return SyntheticVideo(frames=frames, annotations=annotations,
                          occluded=occluded, video_id=video_id, seed_key=seed_key)


def generate_dataset(seed: int, n_videos: int, height: int = 64, width: int = 64,
                     n_frames: int = 32, difficulty: float = 0.0) -> SyntheticDataset:
    """Per-video RNG derives from (master seed, video id), so videos are
    independently reproducible and parallelizable."""
    videos = [generate_video((seed, vid), height, width, n_frames, difficulty,
                             video_id=vid)
              for vid in range(n_videos)]
    return SyntheticDataset(videos=videos, seed=seed, difficulty=difficulty)


def sample_clip(video: SyntheticVideo, k: int, rng: np.random.Generator) -> ClipSample:
    """Three neighboring frames around k plus three distinct random frames."""
    n = len(video.frames)
    require(1 <= k <= n - 2, f"sample_clip: k={k} needs 1 <= k <= {n - 2}")
    eligible = [i for i in range(n) if i not in (k - 1, k, k + 1)]
    require(len(eligible) >= 3, "sample_clip: video too short for 3 random frames")
    randoms = sorted(int(i) for i in rng.choice(len(eligible), size=3, replace=False))
    idxs = [k - 1, k, k + 1] + [eligible[i] for i in randoms]
    return ClipSample(frames=[video.frames[i] for i in idxs],
                      frame_indices=idxs,
                      target=video.annotations[k])


def single_frame_clip(video: SyntheticVideo, k: int) -> ClipSample:
    """Degenerate one-frame clip for the single-frame ablation config."""
    n = len(video.frames)
    require(0 <= k <= n - 1, f"single_frame_clip: k={k} out of range")
    return ClipSample(frames=[video.frames[k]], frame_indices=[k],
                      target=video.annotations[k])


# ---------------------------------------------------------------------------
# tensor file format

def write_tensor(path: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<BB", DTYPE_F32, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(path: str) -> np.ndarray:
    def fail(what):
        raise InputError(f"{path}: {what}")
    try:
        f = open(path, "rb")
    except OSError as exc:
        raise InputError(f"cannot open tensor file {path}: {exc}") from exc
    with f:
        magic = f.read(4)
        if magic != TENSOR_MAGIC:
            fail(f"bad magic {magic!r}")
        header = f.read(2)
        if len(header) != 2:
            fail("truncated header")
        dtype_code, rank = struct.unpack("<BB", header)
        if dtype_code != DTYPE_F32:
            fail(f"unsupported dtype code {dtype_code}")
        raw_dims = f.read(4 * rank)
        if len(raw_dims) != 4 * rank:
            fail("truncated dims")
        dims = struct.unpack(f"<{rank}I", raw_dims)
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = f.read(4 * n)
        if len(payload) != 4 * n:
            fail("truncated payload")
        if f.read(1):
            fail("trailing bytes")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


# ---------------------------------------------------------------------------
# dataset directory IO

def write_dataset(ds: SyntheticDataset, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "meta.txt"), "w", encoding="utf-8") as f:
        f.write(f"n_videos={len(ds.videos)}\n")
        f.write(f"seed={ds.seed}\n")
        f.write(f"difficulty={ds.difficulty:.6g}\n")
    for video in ds.videos:
        vdir = os.path.join(out_dir, f"video_{video.video_id}")
        os.makedirs(vdir, exist_ok=True)
        for i, frame in enumerate(video.frames):
            write_tensor(os.path.join(vdir, f"frame_{i}.tnsr"), frame)
        with open(os.path.join(vdir, "ann.txt"), "w", encoding="utf-8") as f:
            for i, gt in enumerate(video.annotations):
                for box, label in zip(gt.boxes, gt.labels):
                    f.write(f"{i} {int(label)} " +
                            " ".join(f"{v:.6g}" for v in box) + "\n")


def _read_meta(path: str) -> dict:
    meta = {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                key, _, val = line.partition("=")
                meta[key.strip()] = val.strip()
    except OSError as exc:
        raise InputError(f"cannot read dataset meta {path}: {exc}") from exc
    for key in ("n_videos", "seed", "difficulty"):
        if key not in meta:
            raise InputError(f"{path}: missing key {key!r}")
    return meta


def read_dataset(dir_path: str) -> SyntheticDataset:
    meta = _read_meta(os.path.join(dir_path, "meta.txt"))
    n_videos = int(meta["n_videos"])
    seed = int(meta["seed"])
    difficulty = float(meta["difficulty"])
    videos = []
    for vid in range(n_videos):
        vdir = os.path.join(dir_path, f"video_{vid}")
        if not os.path.isdir(vdir):
            raise InputError(f"{dir_path}: missing directory video_{vid}")
        frames = []
        i = 0
        while True:
            fpath = os.path.join(vdir, f"frame_{i}.tnsr")
            if not os.path.exists(fpath):
                break
            arr = read_tensor(fpath)
            if arr.ndim != 3 or arr.shape[0] != 1:
                raise InputError(f"{fpath}: expected a [1, H, W] frame, got {arr.shape}")
            frames.append(arr)
            i += 1
        if not frames:
            raise InputError(f"{vdir}: no frames found")
        ann_path = os.path.join(vdir, "ann.txt")
        per_frame = [([], []) for _ in range(len(frames))]
        try:
            with open(ann_path, "r", encoding="utf-8") as f:
                for lineno, line in enumerate(f, 1):
                    parts = line.split()
                    if not parts:
                        continue
                    if len(parts) != 6:
                        raise InputError(f"{ann_path}:{lineno}: expected 6 fields")
                    fi = int(parts[0])
                    if not 0 <= fi < len(frames):
                        raise InputError(f"{ann_path}:{lineno}: frame index {fi} out of range")
                    per_frame[fi][0].append([float(v) for v in parts[2:6]])
                    per_frame[fi][1].append(int(parts[1]))
        except OSError as exc:
            raise InputError(f"cannot read annotations {ann_path}: {exc}") from exc
        annotations = []
        for fi, (boxes, labels) in enumerate(per_frame):
            gt = GroundTruth(np.array(boxes, dtype=np.float64).reshape(len(boxes), 4),
                             np.array(labels, dtype=np.int64))
            try:
                gt.validate()
            except InputError as exc:
                raise InputError(f"{ann_path}: frame {fi}: {exc}") from exc
            annotations.append(gt)
        videos.append(SyntheticVideo(frames=frames, annotations=annotations,
                                     occluded=np.zeros(len(frames), dtype=bool),
                                     video_id=vid, seed_key=(seed, vid)))
    return SyntheticDataset(videos=videos, seed=seed, difficulty=difficulty)
