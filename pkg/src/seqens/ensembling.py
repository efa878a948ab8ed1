"""Combination rules, sequential chains with self-refinement, and chain forests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import Generation, PredictionBundle, build_generation, forward_logits, predict
from .tensor import Tensor
from . import tensor as T

COMBINE_KINDS = ("uniform", "confidence_weighted", "median", "vote")


@dataclass
class CombineStrategy:
    kind: str = "uniform"
    renormalize: bool = True  # median only

    def __post_init__(self):
        if self.kind not in COMBINE_KINDS:
            raise ValueError(f"unknown combine strategy {self.kind!r}")


@dataclass
class Chain:
    generations: list[Generation]
    self_loops: int = 0

    def __post_init__(self):
        if not self.generations:
            raise ValueError("chain needs at least one generation")
        if self.self_loops < 0:
            raise ValueError("self_loops must be >= 0")
        g0 = self.generations[0]
        if g0.config.conditioning not in ("none", "fixed_embedding"):
            raise ValueError("chain head must be unconditioned")
        for i, g in enumerate(self.generations[1:], start=1):
            if g.config.conditioning == "none":
                raise ValueError(f"generation {i} must be conditioned")


@dataclass
class Forest:
    chains: list[Chain]

    def __post_init__(self):
        if not self.chains:
            raise ValueError("forest needs at least one chain")
        classes = {c.generations[0].config.num_classes for c in self.chains}
        if len(classes) != 1:
            raise ValueError("all chains must share the class count")


def combine(maps: list[np.ndarray], strategy: CombineStrategy) -> np.ndarray:
    if len(maps) == 0:
        raise ValueError("combine needs at least one probability map")
    maps = [np.asarray(m) for m in maps]
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise ValueError("probability maps must share one shape")
    stack = np.stack(maps).astype(np.float64)  # (M, N, C, H, W)

    if strategy.kind == "uniform":
        out = stack.mean(axis=0)
    elif strategy.kind == "confidence_weighted":
        conf = stack.max(axis=2, keepdims=True)  # (M, N, 1, H, W)
        weights = conf / conf.sum(axis=0, keepdims=True)
        out = (weights * stack).sum(axis=0)
    elif strategy.kind == "median":
        out = np.median(stack, axis=0)
        if strategy.renormalize:
            out = out / out.sum(axis=1, keepdims=True)
    else:  # vote
        votes = np.argmax(stack, axis=2)  # (M, N, H, W), ties to lowest class
        c = shape[1]
        onehots = np.stack([(votes == k).sum(axis=0) for k in range(c)], axis=1)
        winner = np.argmax(onehots, axis=1)  # modal class, ties to lowest index
        out = np.zeros(shape, dtype=np.float64)
        np.put_along_axis(out, winner[:, None], 1.0, axis=1)
    return out.astype(maps[0].dtype, copy=False)


def _bundle_from_probs(probs: np.ndarray) -> PredictionBundle:
    # combined maps have no native logits; log-probabilities stand in
    logits = np.log(np.maximum(probs, T.LOG_CLAMP)).astype(probs.dtype)
    return PredictionBundle(logits=logits, probs=probs, labels=np.argmax(probs, axis=1))


def chain_predict(chain: Chain, image) -> list[PredictionBundle]:
    """Run the conditional chain; optionally re-feed the tail its own output."""
    image = image if isinstance(image, Tensor) else Tensor(np.asarray(image))
    bundles = [predict(chain.generations[0], image)]
    for g in chain.generations[1:]:
        bundles.append(predict(g, image, bundles[-1].probs))
    tail = chain.generations[-1]
    if chain.self_loops and tail.config.conditioning in ("none", "fixed_embedding"):
        raise ValueError("self-refinement needs a conditioned tail generation")
    for _ in range(chain.self_loops):
        bundles.append(predict(tail, image, bundles[-1].probs))
    return bundles


def forest_predict(forest: Forest, image, strategy: CombineStrategy | None = None) -> PredictionBundle:
    strategy = strategy or CombineStrategy("uniform")
    finals = [chain_predict(c, image)[-1].probs for c in forest.chains]
    return _bundle_from_probs(combine(finals, strategy))


def chain_provider(prefix: list[Generation]):
    """Closure running a frozen chain prefix; feeds the next generation's training."""

    def provider(images: np.ndarray) -> np.ndarray:
        bundles = chain_predict(Chain(list(prefix)), images)
        return bundles[-1].probs

    return provider


def train_chain(train, val, configs, archs, train_fn=None) -> Chain:
    """Train generations left to right, each conditioned on the frozen prefix.

    configs/archs: per-generation TrainConfig and BackboneConfig lists of
    equal length. Returns the assembled chain; histories are attached as
    `chain.histories`.
    """
    from .training import train_generation

    train_fn = train_fn or train_generation
    if len(configs) != len(archs) or not configs:
        raise ValueError("need one (TrainConfig, BackboneConfig) pair per generation")
    generations: list[Generation] = []
    histories = []
    for i, (cfg, arch) in enumerate(zip(configs, archs)):
        g = build_generation(arch, seed=cfg.seed, index=i)
        provider = chain_provider(list(generations)) if i > 0 else None
        histories.append(train_fn(g, train, val, cfg, provider))
        generations.append(g)
    chain = Chain(generations)
    chain.histories = histories
    return chain


def train_generalized(g0_pool: list[Generation], train, val, cfg, arch) -> Generation:
    """Train one conditioned generation against a pool of first-stage models.

    Each training step draws a pool member uniformly (seeded by cfg.seed) to
    supply the conditioning map.
    """
    from .training import train_generation

    if not g0_pool:
        raise ValueError("empty conditioning pool")
    classes = {g.config.num_classes for g in g0_pool}
    if len(classes) != 1:
        raise ValueError("pool members must share the class count")
    for g in g0_pool:
        if g.config.conditioning not in ("none", "fixed_embedding"):
            raise ValueError("pool members must be unconditioned")

    draw_rng = np.random.Generator(
        np.random.Philox(key=np.array([np.uint64(cfg.seed), np.uint64(0xD7A)], dtype=np.uint64))
    )

    def provider(images: np.ndarray) -> np.ndarray:
        member = g0_pool[int(draw_rng.integers(0, len(g0_pool)))]
        return predict(member, images).probs

    g1 = build_generation(arch, seed=cfg.seed, index=1)
    train_generation(g1, train, val, cfg, provider)
    return g1
