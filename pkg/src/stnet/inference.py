"""Multi-frame prediction with encoder feature shuffle, plus benchmarks.

The naive path runs stem + encoder + decoder once per target frame. The
shuffle path runs stem + encoder exactly once per clip and only re-runs the
decoder, reordering the encoder output pyramids so each neighboring frame in
turn occupies the slot the center frame holds in canonical order. The middle
ordering is the canonical one, so its detections are bit-identical to the
naive path at the center frame.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .config import NetConfig
from .detection import evaluate_ap, scored_detections
from .numerics import InputError, require
from .synthdata import SyntheticVideo, sample_clip, single_frame_clip
from .transformer import (Detection, NetParams, PassCounters, decoder_forward,
                          encoder_forward, net_forward, stem_forward)

_CLIP_TAG = 0xC11F


@dataclass
class ShufflePlan:
    """Decoder-input orderings of the six encoder pyramids, one per target.

    Slot 1 always holds the target frame; the two remaining neighbors fill
    slots 0 and 2 in temporal order; random frames stay in slots 3-5.
    """
    orderings: tuple

    def validate(self) -> None:
        require(len(self.orderings) == 3, "ShufflePlan: need one ordering per neighbor")
        for i, order in enumerate(self.orderings):
            require(sorted(order) == [0, 1, 2, 3, 4, 5],
                    f"ShufflePlan: ordering {i} is not a permutation of 6 frames")
            require(order[1] == i, f"ShufflePlan: target {i} must sit in slot 1")
            rest = [f for f in order[:3] if f != i]
            require(rest == sorted(rest),
                    f"ShufflePlan: ordering {i} must keep remaining neighbors in temporal order")
            require(tuple(order[3:]) == (3, 4, 5),
                    f"ShufflePlan: ordering {i} must keep random frames in slots 3-5")


def default_shuffle_plan() -> ShufflePlan:
    plan = ShufflePlan(orderings=(
        (1, 0, 2, 3, 4, 5),   # predict frame k-1
        (0, 1, 2, 3, 4, 5),   # predict frame k (canonical)
        (0, 2, 1, 3, 4, 5),   # predict frame k+1
    ))
    plan.validate()
    return plan


def clip_rng(video: SyntheticVideo, k: int) -> np.random.Generator:
    """Random-frame selection is a pure function of (video seed, k)."""
    return np.random.default_rng(list(video.seed_key) + [int(k), _CLIP_TAG])


def canonical_clip(cfg: NetConfig, video: SyntheticVideo, k: int):
    if cfg.frames == 1:
        return single_frame_clip(video, k)
    require(cfg.frames == 6, "inference: clips support frames=1 or frames=6")
    return sample_clip(video, k, clip_rng(video, k))


def full_infer(cfg: NetConfig, net: NetParams, video: SyntheticVideo, k: int,
               counters: PassCounters | None = None) -> Detection:
    """Whole network on the clip centered at k; returns frame-k detections."""
    clip = canonical_clip(cfg, video, k)
    det, _ = net_forward(cfg, net, clip.frames, counters)
    return det


def shuffle_infer(cfg: NetConfig, net: NetParams, video: SyntheticVideo, k: int,
                  counters: PassCounters | None = None) -> list:
    """One stem+encoder pass, three decoder passes; detections for k-1, k, k+1."""
    require(cfg.frames == 6, "shuffle_infer: requires the 6-frame configuration")
    n = len(video.frames)
    require(1 <= k <= n - 2, f"shuffle_infer: k={k} needs 1 <= k <= {n - 2}")
    clip = canonical_clip(cfg, video, k)
    pyramids = []
    for frame in clip.frames:
        maps, _ = stem_forward(net.stem, frame)
        pyramids.append(maps)
    if counters is not None:
        counters.stem += 1
    enc_out, _ = encoder_forward(cfg, net, pyramids, counters)
    outputs = []
    for order in default_shuffle_plan().orderings:
        reordered = [enc_out[f] for f in order]
        det, _ = decoder_forward(cfg, net, reordered, counters=counters)
        outputs.append(det)
    return outputs


# ---------------------------------------------------------------------------
# dataset-level prediction and evaluation

def predict_video(cfg: NetConfig, net: NetParams, video: SyntheticVideo,
                  mode: str = "shuffle", max_triples: int | None = None):
    """Per-frame scored predictions for one video.

    shuffle mode walks center frames in strides of 3 (appending a final
    triple so the tail is covered) and keeps the first prediction per frame;
    full mode runs the whole net per frame. Single-frame configs always run
    per frame.
    """
    n = len(video.frames)
    preds: dict[int, tuple] = {}
    if cfg.frames == 1:
        ks = range(n)
        if max_triples is not None:
            ks = [int(i) for i in np.linspace(0, n - 1, min(n, 3 * max_triples)).round()]
        for k in dict.fromkeys(ks):
            preds[k] = scored_detections(full_infer(cfg, net, video, k))
    elif mode == "full":
        ks = range(1, n - 1)
        if max_triples is not None:
            ks = [int(i) for i in np.linspace(1, n - 2, min(n - 2, 3 * max_triples)).round()]
        for k in dict.fromkeys(ks):
            preds[k] = scored_detections(full_infer(cfg, net, video, k))
    elif mode == "shuffle":
        centers = list(range(1, n - 1, 3))
        if centers[-1] != n - 2:
            centers.append(n - 2)
        if max_triples is not None and len(centers) > max_triples:
            centers = [centers[int(i)] for i in
                       np.linspace(0, len(centers) - 1, max_triples).round()]
        for k in dict.fromkeys(centers):
            for i, det in enumerate(shuffle_infer(cfg, net, video, k)):
                frame = k - 1 + i
                if frame not in preds:
                    preds[frame] = scored_detections(det)
    else:
        raise InputError(f"predict_video: unknown mode {mode!r}")
    return preds


def evaluate_dataset(cfg: NetConfig, net: NetParams, videos,
                     mode: str = "shuffle", max_triples: int | None = None):
    """(AP, AP50, AP75) over every predicted frame of the given videos."""
    all_preds = []
    all_gts = []
    for video in videos:
        preds = predict_video(cfg, net, video, mode=mode, max_triples=max_triples)
        for frame, scored in sorted(preds.items()):
            all_preds.append(scored)
            all_gts.append(video.annotations[frame])
    if not all_gts:
        return 0.0, 0.0, 0.0
    return evaluate_ap(all_preds, all_gts)


# ---------------------------------------------------------------------------
# throughput benchmark

@dataclass
class BenchResult:
    fps_full: float
    fps_shuffle: float
    ratio: float


def bench_compare(cfg: NetConfig, net: NetParams, videos, n_triples: int = 10,
                  repeats: int = 5, warmup: int = 1) -> BenchResult:
    """Wall-clock FPS of naive 3x full inference vs shuffle inference.

    Both strategies process the same (video, center) triples and emit three
    frames of detections per triple; reported numbers are medians over
    `repeats` runs, warm-up excluded.
    """
    require(n_triples >= 1, "bench_compare: need at least one triple")
    require(cfg.frames == 6, "bench_compare: requires the 6-frame configuration")
    triples = []
    i = 0
    while len(triples) < n_triples:
        video = videos[i % len(videos)]
        n = len(video.frames)
        k = 2 + (3 * (i // len(videos)) + i) % (n - 4)  # keep k-1 and k+1 valid centers
        triples.append((video, k))
        i += 1
    for video, k in triples[:warmup]:
        for dk in (-1, 0, 1):
            full_infer(cfg, net, video, k + dk)
        shuffle_infer(cfg, net, video, k)

    full_times = []
    shuffle_times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for video, k in triples:
            for dk in (-1, 0, 1):
                full_infer(cfg, net, video, k + dk)
        full_times.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        for video, k in triples:
            shuffle_infer(cfg, net, video, k)
        shuffle_times.append(time.perf_counter() - t0)
    frames_done = 3.0 * n_triples
    fps_full = frames_done / float(np.median(full_times))
    fps_shuffle = frames_done / float(np.median(shuffle_times))
    return BenchResult(fps_full=fps_full, fps_shuffle=fps_shuffle,
                       ratio=fps_shuffle / fps_full)
