"""Pixel metrics, label-distance scoring, and hyper-parameter sweeps."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DomainError
from .raster import rasterize_buffer, values_of, write_pgm
from .synth import point_polyline_distance

THRESHOLD = 0.5


@dataclass(frozen=True)
class ConfusionMatrix:
    tn: int
    fp: int
    fn: int
    tp: int

    @property
    def total(self):
        return self.tn + self.fp + self.fn + self.tp

    def __add__(self, other):
        return ConfusionMatrix(self.tn + other.tn, self.fp + other.fp,
                               self.fn + other.fn, self.tp + other.tp)


class PRF(NamedTuple):
    precision: float
    recall: float
    f1: float
    degenerate: bool = False


def to_mask(prob_map, threshold: float = THRESHOLD) -> np.ndarray:
    return (np.asarray(prob_map) >= threshold).astype(np.uint8)


def confusion(pred_mask, truth_mask) -> ConfusionMatrix:
    """Pixel counts with class 1 (stream) as the positive class."""
    p = np.asarray(values_of(pred_mask)).astype(bool)
    t = np.asarray(values_of(truth_mask)).astype(bool)
    if p.shape != t.shape:
        raise DomainError(f"shape mismatch: pred {p.shape} vs truth {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionMatrix(tn=int(p.size) - tp - fp - fn, fp=fp, fn=fn, tp=tp)


def prf(m: ConfusionMatrix) -> PRF:
    """Precision, recall and F1 of the stream class.

    An undefined ratio is reported as 0 and flags the result degenerate.
    """
    degenerate = False
    if m.tp + m.fp > 0:
        precision = m.tp / (m.tp + m.fp)
    else:
        precision, degenerate = 0.0, True
    if m.tp + m.fn > 0:
        recall = m.tp / (m.tp + m.fn)
    else:
        recall, degenerate = 0.0, True
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return PRF(precision, recall, f1, degenerate)


def mean_label_distance(inferred, truth) -> float:
    """Mean over inferred vertices of the distance to the nearest truth line."""
    if not inferred or not truth:
        raise DomainError("mean_label_distance needs non-empty inferred and truth lists")
    pts = np.concatenate([np.asarray(getattr(l, "vertices", l)) for l in inferred])
    d = np.full(len(pts), np.inf)
    for t in truth:
        np.minimum(d, point_polyline_distance(pts[:, 0], pts[:, 1],
                                              getattr(t, "vertices", t)), out=d)
    return float(d.mean())


def window_confusion(prob_map, truth_mask, origins, size) -> ConfusionMatrix:
    """Sum of per-window confusion counts over the given window origins."""
    pred = to_mask(prob_map)
    truth = np.asarray(values_of(truth_mask))
    total = ConfusionMatrix(0, 0, 0, 0)
    for r, c in origins:
        total = total + confusion(pred[r:r + size, c:c + size], truth[r:r + size, c:c + size])
    return total


def evaluate_prob_map(prob_map, truth_lines, origins, size, buffer=2.0, resolution=1.0):
    h, w = np.asarray(prob_map).shape
    truth = rasterize_buffer(truth_lines, buffer, h, w, resolution)
    m = window_confusion(prob_map, truth, origins, size)
    return m, prf(m)


METRIC_FIELDS = ["name", "tn", "fp", "fn", "tp", "precision", "recall", "f1"]


def write_metrics_csv(path, rows) -> None:
    """``rows`` are ``(name, ConfusionMatrix)`` pairs."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for name, m in rows:
            s = prf(m)
            w.writerow([name, m.tn, m.fp, m.fn, m.tp,
                        f"{s.precision:.6f}", f"{s.recall:.6f}", f"{s.f1:.6f}"])


def overlay_image(shape, truth=(), noisy=(), inferred=(), buffer=0.5, resolution=1.0):
    """Gray-level overlay: truth 255, noisy 170, inferred 85 (later wins)."""
    h, w = shape
    img = np.zeros((h, w), dtype=np.uint8)
    for lines, level in ((noisy, 170), (inferred, 85), (truth, 255)):
        if lines:
            img[rasterize_buffer(lines, buffer, h, w, resolution).values == 1] = level
    return img


def write_overlay_pgm(path, shape, truth=(), noisy=(), inferred=(), **kw) -> None:
    write_pgm(path, overlay_image(shape, truth, noisy, inferred, **kw), lo=0, hi=255)


SWEEP_FIELDS = ["epsilon", "top_k", "precision", "recall", "f1", "tp", "fp", "fn",
                "mean_label_dist"]


def sensitivity_sweep(scene, eps_values, k_values, cfg, out_csv=None, log=None):
    """Run the EM trainer once per (epsilon, K) setting with a shared seed.

    ``cfg`` is a :class:`emshift.config.RunConfig`. Returns one dict per
    setting in ``eps`` major order.
    """
    from .pipeline import evaluate_model, run_em

    rows = []
    for eps in eps_values:
        for k in k_values:
            setting = cfg.replace(epsilon=float(eps), top_k=int(k))
            try:
                model, history = run_em(scene, setting, log=log)
                m, s = evaluate_model(model, scene, setting)
            except Exception as exc:
                exc.args = (f"sweep setting epsilon={eps}, K={k}: {exc}",) + exc.args[1:]
                raise
            dist = history.iterations[-1].mean_label_dist if history.iterations else \
                history.initial_label_dist
            rows.append({"epsilon": eps, "top_k": k, "precision": s.precision,
                         "recall": s.recall, "f1": s.f1, "tp": m.tp, "fp": m.fp, "fn": m.fn,
                         "mean_label_dist": dist})
            if out_csv is not None:
                _write_sweep(out_csv, rows)
    if out_csv is not None:
        _write_sweep(out_csv, rows)
    return rows


def _write_sweep(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(r)
