"""Two-stage optimisation and score-averaged inference.

Stage 1 trains the backbone with two softmax heads, one on the final global
vector and one on the pooled final local map. Stage 2 tunes the whole network
through the sketched combination feature with a single head. Both stages use
SGD with momentum and a learning rate divided by ``lr_decay`` every
``decay_every`` epochs, restarting from ``base_lr`` at the start of each stage.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import synthdata as sd
from .seeding import stream
from .sketch import combined_feature

log = logging.getLogger(__name__)

STAGE1_HEADS = ("head_g.w", "head_g.b", "head_x.w", "head_x.b")
STAGE2_HEAD = ("head_c.w", "head_c.b")


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    stage: int = 1
    base_lr: float = 0.01
    lr_decay: float = 10.0
    decay_every: int = 20
    epochs: int = 30
    batch_size: int = 16
    momentum: float = 0.9
    weight_decay: float = 0.0
    flip: bool = True
    crop: list = None
    eval_samples: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.epochs < 0 or self.batch_size < 1 or self.decay_every < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and decay_every >= 1 are required")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")


def full_scale_preset(stage=1, **kw):
    """Schedule used for full-scale training: 0.01, divided by 10 every 20 epochs, 50 epochs."""
    return TrainConfig(stage=stage, base_lr=0.01, lr_decay=10.0, decay_every=20, epochs=50, **kw)


def lr_at(epoch, cfg):
    return cfg.base_lr * cfg.lr_decay ** (-(epoch // cfg.decay_every))


@dataclass
class MetricsRecord:
    epoch: int
    stage: int
    lr: float
    loss: float
    loss_global: float = None
    loss_local: float = None
    train_top1: float = None
    test_top1: float = None

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


# losses

def heads_logits(pair, P):
    lg = ad.linear(pair.g, P["head_g.w"], P["head_g.b"])
    lx = ad.linear(ad.global_avg_pool(pair.x), P["head_x.w"], P["head_x.b"])
    return lg, lx


def stage1_loss(pair, labels, P):
    """CE(W_g g, y) + CE(W_x gap(x), y), equally weighted. Returns (total, global term, local term)."""
    lg, lx = heads_logits(pair, P)
    a = ad.softmax_cross_entropy(lg, labels)
    b = ad.softmax_cross_entropy(lx, labels)
    return ad.add(a, b), a, b


def combined_logits(pair, P, sketch, normalize=False):
    return ad.linear(combined_feature(pair.x, pair.g, sketch, normalize), P["head_c.w"], P["head_c.b"])


def stage2_loss(pair, labels, P, sketch, normalize=False):
    return ad.softmax_cross_entropy(combined_logits(pair, P, sketch, normalize), labels)


def class_scores(net, x):
    """Softmax scores (B, K) from the network's active classifier, eval mode.

    ``combined`` uses the sketch head; ``separate_heads`` averages the
    softmax of the global and local heads.
    """
    P = bb.constant_params(net)
    pair = bb.forward(net, x, P, train=False)
    if net.spec.classifier == "combined":
        return ad.softmax(combined_logits(pair, P, net.sketch, net.spec.normalize_feature).data)
    lg, lx = heads_logits(pair, P)
    return 0.5 * (ad.softmax(lg.data) + ad.softmax(lx.data))


# sampling glue

def frame_indices(net, length, mode, rng=None):
    T = net.spec.input_shape[0]
    if net.spec.is_2d:
        return sd.sample_snippets(length, T, mode, rng)
    return sd.sample_clip(length, T, mode, rng)


def inference_indices(net, length, n):
    """(n, T) frame indices of the uniformly placed inference samples.

    Videos shorter than T are loop-padded: index ``i`` reads frame ``i mod length``.
    """
    T = net.spec.input_shape[0]
    if length < 1:
        raise ValueError("empty video")
    padded = max(length, T)
    if net.spec.is_2d:
        idx = sd.snippet_positions(padded, T, n)
    else:
        idx = sd.clip_starts(padded, T, n)[:, None] + np.arange(T)[None]
    return idx % length


def _fit_frames(net, frames):
    """Centre-crop frames (.., H, W) to the network input size."""
    H, W = net.spec.input_shape[1:]
    if frames.shape[-2:] == (H, W):
        return frames
    return sd.augment(frames, crop=(H, W))


def infer_video(net, video, n_samples=None):
    """Softmax scores averaged over ``n_samples`` uniformly placed samples of one video.

    Defaults: 10 snippet samples for 2-D networks, 15 clips for 3-D networks.
    """
    video = np.asarray(video)
    if video.ndim != 3 or video.shape[0] == 0:
        raise ValueError("video must be a non-empty (L, H, W) frame stack")
    if n_samples is None:
        n_samples = 10 if net.spec.is_2d else 15
    idx = inference_indices(net, video.shape[0], n_samples)
    batch = np.stack([_fit_frames(net, sd.to_input(video[row])) for row in idx]).astype(net.dtype)
    return class_scores(net, batch).mean(axis=0)


def evaluate(net, dataset, n_samples=1):
    """Score matrix (N, K) from :func:`infer_video` for every video."""
    return np.stack([infer_video(net, v, n_samples) for v in dataset.videos])


def top1(scores, labels):
    return float(np.mean(np.argmax(scores, axis=1) == np.asarray(labels)))


# training loop

def make_batch(net, dataset, idx, rng, cfg):
    xs = []
    for i in idx:
        video = dataset.videos[i]
        frames = video[frame_indices(net, video.shape[0], "random", rng)]
        sample = sd.to_input(frames)
        H, W = net.spec.input_shape[1:]
        crop = tuple(cfg.crop) if cfg.crop else (H, W)
        sample = sd.augment(sample, crop=crop, flip="random" if cfg.flip else False, rng=rng)
        xs.append(sample)
    return np.stack(xs).astype(net.dtype), dataset.labels[idx]


def trainable(net, stage):
    frozen = STAGE2_HEAD if stage == 1 else STAGE1_HEADS
    return [k for k in net.params if k not in frozen]


def step_losses(net, P, x, y, stage, train=True):
    pair = bb.forward(net, x, P, train=train)
    if stage == 1:
        total, a, b = stage1_loss(pair, y, P)
        lg, lx = heads_logits(pair, P)
        scores = 0.5 * (ad.softmax(lg.data) + ad.softmax(lx.data))
        return total, float(a.data), float(b.data), scores
    total = stage2_loss(pair, y, P, net.sketch, net.spec.normalize_feature)
    return total, None, None, None


@dataclass
class TrainState:
    velocity: dict = field(default_factory=dict)
    epoch: int = 0


def train(net, train_set, cfg, seed=0, test_set=None, from_scratch=False, state=None,
          on_record=None, on_epoch_end=None):
    """Train ``net`` in place for ``cfg.epochs`` epochs of stage ``cfg.stage``.

    Returns the list of :class:`MetricsRecord`. The first record (epoch -1)
    holds the loss of the untouched network over the training set. All
    randomness (order, sampling, flips) comes from named streams of ``seed``.
    """
    if cfg.stage == 2 and net.stage_done < 1 and not from_scratch:
        raise ValueError("stage 2 needs a network trained by stage 1 (pass from_scratch=True to override)")
    if train_set.num_classes != net.spec.num_classes:
        raise ValueError(f"dataset has {train_set.num_classes} classes, network {net.spec.num_classes}")
    state = state or TrainState()
    names = trainable(net, cfg.stage)
    names_set = set(names)
    for k in names:
        state.velocity.setdefault(k, np.zeros_like(net.params[k]))
    records = []

    def emit(rec):
        records.append(rec)
        if on_record is not None:
            on_record(rec)

    n = len(train_set)
    if state.epoch == 0:
        emit(_initial_record(net, train_set, cfg, seed))
    for epoch in range(state.epoch, cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        order = stream(seed, f"data/stage{cfg.stage}/epoch{epoch}").permutation(n)
        aug = stream(seed, f"augment/stage{cfg.stage}/epoch{epoch}")
        sums = np.zeros(3)
        correct, seen = 0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, y = make_batch(net, train_set, idx, aug, cfg)
            P = {k: ad.Tensor(v, requires_grad=k in names_set) for k, v in net.params.items()}
            total, lg, lx, scores = step_losses(net, P, x, y, cfg.stage)
            loss = float(total.data)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"non-finite loss {loss} at stage {cfg.stage}, epoch {epoch}")
            total.backward()
            for k in names:
                g = P[k].grad
                if g is None:
                    continue
                if cfg.weight_decay:
                    g = g + cfg.weight_decay * net.params[k]
                v = state.velocity[k]
                v *= cfg.momentum
                v += g
                net.params[k] = net.params[k] - lr * v
            b = len(idx)
            sums += np.array([loss, lg or 0.0, lx or 0.0]) * b
            if scores is not None:
                correct += int(np.sum(np.argmax(scores, 1) == y))
            seen += b
        rec = MetricsRecord(epoch, cfg.stage, lr, sums[0] / seen)
        if cfg.stage == 1:
            rec.loss_global, rec.loss_local = sums[1] / seen, sums[2] / seen
            rec.train_top1 = correct / seen
        state.epoch = epoch + 1
        if cfg.stage == 2:
            net.spec.classifier = "combined"
        if test_set is not None and cfg.eval_samples > 0:
            rec.test_top1 = top1(evaluate(net, test_set, cfg.eval_samples), test_set.labels)
        log.info("stage %d epoch %d lr %.4g loss %.4f test %s (%.1fs)", cfg.stage, epoch, lr, rec.loss,
                 rec.test_top1, time.perf_counter() - t0)
        emit(rec)
        if on_epoch_end is not None:
            on_epoch_end(net, state, rec, time.perf_counter() - t0)
    net.stage_done = max(net.stage_done, cfg.stage)
    if cfg.stage == 2:
        net.spec.classifier = "combined"
    return records


def _initial_record(net, dataset, cfg, seed):
    """Loss of the current network over the training set, no updates (batch-norm buffers untouched)."""
    saved = {k: v.copy() for k, v in net.buffers.items()}
    rng = stream(seed, f"augment/stage{cfg.stage}/initial")
    sums, seen = np.zeros(3), 0
    P = bb.constant_params(net)
    for start in range(0, len(dataset), cfg.batch_size):
        idx = np.arange(start, min(start + cfg.batch_size, len(dataset)))
        x, y = make_batch(net, dataset, idx, rng, cfg)
        total, lg, lx, _ = step_losses(net, P, x, y, cfg.stage)
        sums += np.array([float(total.data), lg or 0.0, lx or 0.0]) * len(idx)
        seen += len(idx)
    net.buffers.update(saved)
    rec = MetricsRecord(-1, cfg.stage, 0.0, sums[0] / seen)
    if cfg.stage == 1:
        rec.loss_global, rec.loss_local = sums[1] / seen, sums[2] / seen
    return rec
