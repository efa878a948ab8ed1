"""Augmentation, initialization strategies and the per-generation training loop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .analysis import segmentation_metrics
from .data import Checkpoint, Sample
from .nets import Generation, backbone_param_names, build_generation, forward_logits
from .tensor import Graph, LrSchedule, SgdMomentum, Tensor, backward, poly_lr_at


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    resize_range: tuple[float, float] = (0.5, 2.0)
    crop: tuple[int, int] = (64, 64)

    def __post_init__(self):
        lo, hi = self.resize_range
        if lo > hi or lo <= 0:
            raise ValueError("resize_range must satisfy 0 < low <= high")


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 8
    lr0: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    seed: int = 0
    init_strategy: str = "random"  # or "warmstart"
    warmstart_checkpoint: str | None = None
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    ignore_label: int | None = 255

    def __post_init__(self):
        if self.init_strategy not in ("random", "warmstart"):
            raise ValueError(f"unknown init strategy {self.init_strategy!r}")
        if (self.init_strategy == "warmstart") != (self.warmstart_checkpoint is not None):
            raise ValueError("warmstart_checkpoint required iff strategy is warmstart")


@dataclass
class TrainHistory:
    step_loss: list[float] = field(default_factory=list)
    epoch_val_miou: list[float] = field(default_factory=list)
    final_lr: float = 0.0


def augment_sample(
    image: np.ndarray,
    label: np.ndarray,
    params: AugmentConfig,
    rng: np.random.Generator,
    ignore_label: int | None = 255,
) -> tuple[np.ndarray, np.ndarray]:
    """Identical geometric transform for image (bilinear) and label (nearest)."""
    h, w = label.shape
    lo, hi = params.resize_range
    scale = float(rng.uniform(lo, hi))
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    if (nh, nw) != (h, w):
        image = T.bilinear_resize(Tensor(image[None]), nh, nw).data[0]
        label = T.resize_nearest(label, nh, nw)
    if rng.uniform() < params.flip_prob:
        image = image[:, :, ::-1].copy()
        label = label[:, ::-1].copy()
    ch, cw = params.crop
    pad_h, pad_w = max(0, ch - image.shape[1]), max(0, cw - image.shape[2])
    if pad_h or pad_w:
        fill = 0 if ignore_label is None else ignore_label
        image = np.pad(image, ((0, 0), (0, pad_h), (0, pad_w)))
        label = np.pad(label, ((0, pad_h), (0, pad_w)), constant_values=fill)
    y0 = int(rng.integers(0, image.shape[1] - ch + 1))
    x0 = int(rng.integers(0, image.shape[2] - cw + 1))
    return (
        np.ascontiguousarray(image[:, y0 : y0 + ch, x0 : x0 + cw]),
        np.ascontiguousarray(label[y0 : y0 + ch, x0 : x0 + cw]),
    )


def init_parameters(
    g: Generation,
    strategy: str,
    warmstart: Checkpoint | None = None,
    seed: int = 0,
) -> None:
    """random: full reseed. warmstart: copy backbone, reseed head/blocks/embedding."""
    if (strategy == "warmstart") != (warmstart is not None):
        raise ValueError("warmstart checkpoint required iff strategy is warmstart")
    fresh = build_generation(g.config, seed=seed, index=g.generation_index)
    for name, t in g.parameters.items():
        t.data = fresh.parameters[name].data.copy()
    if strategy == "warmstart":
        for name in backbone_param_names(g.config):
            src = warmstart.tensors.get(name)
            if src is None or src.shape != g.parameters[name].data.shape:
                raise ValueError(f"warmstart checkpoint incompatible at {name!r}")
            g.parameters[name].data = src.astype(np.float32).copy()


def _predict_probs_batch(g: Generation, images: np.ndarray, provider=None) -> np.ndarray:
    cond = None if provider is None else provider(images)
    logits = forward_logits(g, Tensor(images), None if cond is None else Tensor(cond))
    return T.channel_softmax(logits).data


def evaluate_miou(
    g: Generation,
    dataset: list[Sample],
    provider=None,
    ignore_label: int | None = 255,
    batch_size: int = 16,
) -> float:
    preds, gts = [], []
    for start in range(0, len(dataset), batch_size):
        batch = dataset[start : start + batch_size]
        images = np.stack([s.image for s in batch])
        probs = _predict_probs_batch(g, images, provider)
        preds.extend(np.argmax(probs, axis=1))
        gts.extend(s.label for s in batch)
    return segmentation_metrics(preds, gts, g.config.num_classes, ignore_label).miou


def train_generation(
    g: Generation,
    train: list[Sample],
    val: list[Sample],
    cfg: TrainConfig,
    condition_provider=None,
) -> TrainHistory:
    """SGD+momentum under a polynomial LR schedule; deterministic given cfg.seed.

    condition_provider maps a batch of images (N,3,H,W) to a probability map
    (N,C,H,W); it must be frozen — no gradients reach it because its output
    enters the graph as a constant.
    """
    needs_cond = g.config.conditioning in ("adon", "early_fusion", "late_fusion")
    if needs_cond and condition_provider is None:
        raise ValueError(f"{g.config.conditioning} conditioning needs a provider")
    if not needs_cond and condition_provider is not None:
        raise ValueError("provider given but this generation takes no conditioning input")
    if not train:
        raise ValueError("empty training set")

    init_ckpt = None
    if cfg.init_strategy == "warmstart":
        from .data import load_checkpoint

        init_ckpt = (
            cfg.warmstart_checkpoint
            if isinstance(cfg.warmstart_checkpoint, Checkpoint)
            else load_checkpoint(cfg.warmstart_checkpoint)
        )
    init_parameters(g, cfg.init_strategy, init_ckpt, seed=cfg.seed)

    rng = np.random.Generator(
        np.random.Philox(key=np.array([np.uint64(cfg.seed), np.uint64(0x5E9)], dtype=np.uint64))
    )
    params = g.trainable()
    opt = SgdMomentum(params, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    steps_per_epoch = (len(train) + cfg.batch_size - 1) // cfg.batch_size
    # LrSchedule requires lr0 > 0; a zero rate means "evaluate but don't move"
    sched = None
    if cfg.lr0 != 0.0:
        sched = LrSchedule(cfg.lr0, max(1, cfg.epochs * steps_per_epoch), cfg.poly_power)

    history = TrainHistory()
    step = 0
    lr = cfg.lr0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(train), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            images, labels = [], []
            for i in idx:
                im, lb = augment_sample(
                    train[i].image, train[i].label, cfg.augment, rng, cfg.ignore_label
                )
                images.append(im)
                labels.append(lb)
            images = np.stack(images)
            labels = np.stack(labels)
            cond = None
            if condition_provider is not None:
                cond = Tensor(condition_provider(images))  # frozen: plain constant

            lr = 0.0 if sched is None else poly_lr_at(sched, step)
            opt.zero_grad()
            with Graph() as graph:
                logits = forward_logits(g, Tensor(images), cond)
                probs = T.channel_softmax(logits)
                loss = T.pixel_cross_entropy(probs, labels, cfg.ignore_label)
            backward(graph, loss)
            opt.step(lr)
            history.step_loss.append(float(loss.data))
            step += 1
        if val:
            provider = None
            if condition_provider is not None:
                provider = condition_provider
            history.epoch_val_miou.append(
                evaluate_miou(g, val, provider, cfg.ignore_label)
            )
    history.final_lr = lr
    return history
