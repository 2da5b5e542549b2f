"""Two-phase training loop: adaptive-moment warm phase, then plain SGD.

Both phases share the same constant learning rate and weight decay. Batch
size counts clips per optimizer step (gradients are accumulated); gradients
are clipped by global norm before each update. One epoch draws one clip per
training video by default.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .detection import set_loss, set_loss_backward
from .inference import evaluate_dataset
from .numerics import make_rng, require, tree_add_, tree_arrays
from .synthdata import sample_clip, single_frame_clip
from .transformer import NetParams, init_net, net_backward, net_forward, save_checkpoint

_TRAIN_TAG = 0x7EA1


def global_grad_norm(grads: NetParams) -> float:
    total = 0.0
    for _, g in tree_arrays(grads):
        total += float(np.sum(np.square(g, dtype=np.float64)))
    return math.sqrt(total)


def clip_gradients_(grads: NetParams, max_norm: float) -> float:
    """Scale the whole gradient tree to `max_norm` if it exceeds it."""
    norm = global_grad_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for _, g in tree_arrays(grads):
            g *= scale
    return norm


@dataclass
class AdamState:
    step: int = 0
    moments: dict = field(default_factory=dict)

    def ensure(self, name: str, like: np.ndarray):
        if name not in self.moments:
            self.moments[name] = (np.zeros_like(like, dtype=np.float64),
                                  np.zeros_like(like, dtype=np.float64))
        return self.moments[name]


def adam_step(params: NetParams, grads: NetParams, state: AdamState, lr: float,
              weight_decay: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """AdamW-style update: decoupled weight decay, bias-corrected moments."""
    state.step += 1
    t = state.step
    for (name, p), (_, g) in zip(tree_arrays(params), tree_arrays(grads), strict=True):
        m, v = state.ensure(name, p)
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * np.square(g, dtype=np.float64)
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p -= (lr * weight_decay) * p
        p -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)


def sgd_step(params: NetParams, grads: NetParams, lr: float, weight_decay: float) -> None:
    """Plain stochastic gradient with L2 weight decay folded into the gradient."""
    for (_, p), (_, g) in zip(tree_arrays(params), tree_arrays(grads), strict=True):
        p -= (lr * (g + weight_decay * p)).astype(p.dtype)


@dataclass
class EpochLog:
    epoch: int
    phase: int
    loss: float
    ap50: float


def make_clip(cfg, video, k, rng):
    if cfg.frames == 1:
        return single_frame_clip(video, k)
    return sample_clip(video, k, rng)


def train_step(cfg, net, train_videos, order, step, rng, batch_size):
    """Accumulate gradients over `batch_size` clips; returns (loss, grads)."""
    total_loss = 0.0
    grads = None
    for b in range(batch_size):
        video = train_videos[order[(step * batch_size + b) % len(order)]]
        n = len(video.frames)
        if cfg.frames == 1:
            k = int(rng.integers(0, n))
        else:
            k = int(rng.integers(1, n - 1))
        clip = make_clip(cfg, video, k, rng)
        det, cache = net_forward(cfg, net, clip.frames)
        loss, lcache = set_loss(det, clip.target)
        d_logits, d_boxes = set_loss_backward(lcache)
        g = net_backward(cfg, net, cache,
                         d_logits.astype(det.class_logits.dtype),
                         d_boxes.astype(det.boxes.dtype))
        total_loss += loss
        if grads is None:
            grads = g
        else:
            tree_add_(grads, g)
    return total_loss / batch_size, grads


def train_run(run_cfg: RunConfig, dataset, log=print, out_dir: str | None = None,
              eval_mode: str | None = None):
    """Full two-phase schedule; returns (net, list of EpochLog)."""
    run_cfg.validate()
    cfg = run_cfg.net_config()
    dtype = run_cfg.dtype()
    rng = make_rng(run_cfg.seed, _TRAIN_TAG)
    net = init_net(cfg, rng, dtype)
    train_videos, test_videos = dataset.split(run_cfg.train_videos)
    require(len(train_videos) > 0, "train_run: no training videos")
    adam = AdamState()
    history = []
    total_epochs = run_cfg.phase1_epochs + run_cfg.phase2_epochs
    steps = run_cfg.steps_per_epoch or len(train_videos)
    if eval_mode is None:
        eval_mode = "shuffle" if cfg.frames == 6 else "full"
    for epoch in range(1, total_epochs + 1):
        phase = 1 if epoch <= run_cfg.phase1_epochs else 2
        order = rng.permutation(len(train_videos))
        losses = []
        for step in range(steps):
            loss, grads = train_step(cfg, net, train_videos, order, step, rng,
                                     run_cfg.batch_size)
            clip_gradients_(grads, run_cfg.grad_clip)
            if phase == 1:
                adam_step(net, grads, adam, run_cfg.lr, run_cfg.weight_decay)
            else:
                sgd_step(net, grads, run_cfg.lr, run_cfg.weight_decay)
            losses.append(loss)
        if test_videos and run_cfg.eval_triples > 0:
            _, ap50, _ = evaluate_dataset(cfg, net, test_videos, mode=eval_mode,
                                          max_triples=run_cfg.eval_triples)
        else:
            ap50 = 0.0
        entry = EpochLog(epoch=epoch, phase=phase, loss=float(np.mean(losses)), ap50=ap50)
        history.append(entry)
        log(f"epoch={entry.epoch} phase={entry.phase} loss={entry.loss:.6f} ap={entry.ap50:.4f}")
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            save_checkpoint(os.path.join(out_dir, f"checkpoint_epoch_{epoch}.stn1"), net)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(os.path.join(out_dir, "final.stn1"), net)
    return net, history
