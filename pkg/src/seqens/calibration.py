"""Temperature scaling, expected calibration error and confidence histograms."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class CalibrationConfig:
    num_bins: int = 10
    temperature_grid: tuple[float, ...] = (0.5, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0)

    def __post_init__(self):
        self.temperature_grid = tuple(self.temperature_grid)
        if self.num_bins < 1:
            raise ValueError("num_bins must be >= 1")
        if any(t <= 0 for t in self.temperature_grid):
            raise ValueError("temperatures must be > 0")
        if list(self.temperature_grid) != sorted(self.temperature_grid):
            raise ValueError("temperature grid must be sorted ascending")


@dataclass
class CalibrationReport:
    per_temperature_ece: list[tuple[float, float]]
    best_temperature: float
    bins: list[tuple[int, float, float]]  # (count, mean confidence, accuracy) at best T
    per_bin_by_temperature: dict[float, list[tuple[int, float, float]]] = field(
        default_factory=dict
    )


def temperature_scale(logits, temperature: float) -> np.ndarray:
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    t = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits))
    scaled = T.mul_scalar(t, 1.0 / temperature)
    return T.channel_softmax(scaled).data


def _bin_index(conf: np.ndarray, num_bins: int) -> np.ndarray:
    # equal-width bins on (0, 1], right-closed: bin m covers (m/B, (m+1)/B]
    idx = np.ceil(conf * num_bins).astype(np.int64) - 1
    return np.clip(idx, 0, num_bins - 1)


def _flatten_pixels(probs, labels, ignore_label):
    # accepts per-image (C,H,W)/(H,W) or batched (N,C,H,W)/(N,H,W) pairs
    confs, hits = [], []
    for p, y in zip(probs, labels):
        p = np.asarray(p, dtype=np.float64)
        y = np.asarray(y)
        valid = np.ones_like(y, dtype=bool) if ignore_label is None else (y != ignore_label)
        conf = p.max(axis=-3)
        pred = np.argmax(p, axis=-3)
        confs.append(conf[valid])
        hits.append((pred == y)[valid])
    if not confs:
        raise ValueError("no inputs")
    conf = np.concatenate(confs)
    hit = np.concatenate(hits)
    if conf.size == 0:
        raise ValueError("no valid pixels")
    return conf, hit


def bin_statistics(probs, labels, cfg: CalibrationConfig, ignore_label=None):
    """Per-bin (count, mean confidence, accuracy); empty bins report zeros."""
    conf, hit = _flatten_pixels(_aslist(probs), _aslist(labels), ignore_label)
    idx = _bin_index(conf, cfg.num_bins)
    stats = []
    for m in range(cfg.num_bins):
        mask = idx == m
        n = int(mask.sum())
        if n == 0:
            stats.append((0, 0.0, 0.0))
        else:
            stats.append((n, float(conf[mask].mean()), float(hit[mask].mean())))
    return stats


def _aslist(x):
    arr = np.asarray(x) if not isinstance(x, (list, tuple)) else x
    if isinstance(arr, np.ndarray):
        return [arr]
    return list(x)


def expected_calibration_error(probs, labels, cfg: CalibrationConfig, ignore_label=None) -> float:
    stats = bin_statistics(probs, labels, cfg, ignore_label)
    total = sum(n for n, _, _ in stats)
    return float(sum(n / total * abs(acc - conf) for n, conf, acc in stats if n))


def confidence_histogram(probs, labels, cfg: CalibrationConfig, ignore_label=None):
    conf, hit = _flatten_pixels(_aslist(probs), _aslist(labels), ignore_label)
    idx = _bin_index(conf, cfg.num_bins)
    correct = np.bincount(idx[hit], minlength=cfg.num_bins)[: cfg.num_bins]
    incorrect = np.bincount(idx[~hit], minlength=cfg.num_bins)[: cfg.num_bins]
    return list(map(int, correct)), list(map(int, incorrect))


def temperature_sweep(logit_source, val, cfg: CalibrationConfig, ignore_label=None) -> CalibrationReport:
    """Evaluate ECE on cached logits at each grid temperature and pick the best.

    logit_source maps the dataset to a list of per-image logits (C,H,W).
    Ties in ECE break toward the temperature closest to 1.
    """
    if not cfg.temperature_grid:
        raise ValueError("empty temperature grid")
    if 1.0 not in cfg.temperature_grid:
        raise ValueError("temperature grid must contain 1.0")
    logits = [np.asarray(l) for l in logit_source(val)]
    labels = [s.label for s in val]
    rows = []
    per_bin = {}
    for t in cfg.temperature_grid:
        probs = [temperature_scale(l[None], t)[0] for l in logits]
        rows.append((t, expected_calibration_error(probs, labels, cfg, ignore_label)))
        per_bin[t] = bin_statistics(probs, labels, cfg, ignore_label)
    best_t = min(rows, key=lambda r: (r[1], abs(r[0] - 1.0)))[0]
    return CalibrationReport(
        per_temperature_ece=rows,
        best_temperature=best_t,
        bins=per_bin[best_t],
        per_bin_by_temperature=per_bin,
    )


def calibrated_combine(logit_maps, temperature: float, strategy) -> np.ndarray:
    from .ensembling import combine

    scaled = [temperature_scale(l, temperature) for l in logit_maps]
    return combine(scaled, strategy)
