"""Expectation-maximization over discretized label-location candidates.

The E-step scores every candidate placement of every chunk with the current
model, combines the score with the location-error prior, and picks one
candidate per chunk. The M-step re-trains the model on the rasterized picks.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from itertools import combinations
from pathlib import Path

import numpy as np

from .errors import CapacityError, DegeneracyError, DomainError, PreconditionError, TrainingError
from .evalkit import confusion, mean_label_distance, prf, to_mask
from .geometry_error import (
    PolarErrorModel,
    Polyline,
    chunk_polyline,
    generate_candidates,
    write_polylines,
)
from .raster import (
    augment_all,
    buffer_pixels,
    cut_windows,
    rasterize_buffer,
    tile_origins,
    values_of,
)
from .segmodel import TrainCurve, TrainSchedule, build_model, dice_loss_and_grad, predict, train

P_CLAMP = 1e-6


@dataclass(frozen=True)
class EmConfig:
    epsilon: float = 0.05
    top_k: int = 5
    max_iterations: int = 8
    retrain_from_scratch: bool = True
    chunk_len: float = 20.0
    n_side: int = 9
    step: float = 1.0
    error_model: PolarErrorModel = field(default_factory=lambda: PolarErrorModel(rho_max=9.0))
    buffer: float = 2.0
    resolution: float = 1.0
    estep: str = "sample"
    window_size: int = 32
    n_train_windows: int = 28
    n_val_windows: int = 4
    augment: bool = True
    # (row0, col0, height, width) for train and validation windows; None = whole grid
    train_region: tuple | None = None

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise DomainError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        n_cand = 2 * self.n_side + 1
        if not 1 <= self.top_k <= n_cand:
            raise DomainError(f"top_k must lie in [1, {n_cand}], got {self.top_k}")
        if self.max_iterations < 0:
            raise DomainError("max_iterations must be >= 0")
        if self.estep not in ("sample", "expected"):
            raise DomainError(f"estep must be 'sample' or 'expected', got {self.estep!r}")
        if self.n_train_windows < 1 or self.n_val_windows < 1:
            raise DomainError("need at least one train and one validation window")

    def replace(self, **kw) -> "EmConfig":
        return replace(self, **kw)


@dataclass
class PosteriorRow:
    chunk_id: int
    offsets: np.ndarray
    prior: np.ndarray
    likelihood: np.ndarray
    posterior: np.ndarray

    def __len__(self):
        return len(self.posterior)


@dataclass
class PosteriorTable:
    rows: list

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def validate(self, tol: float = 1e-9):
        for r in self.rows:
            if np.any(r.posterior < 0) or abs(r.posterior.sum() - 1.0) > tol:
                raise DomainError(f"chunk {r.chunk_id}: posterior is not a distribution")


def _likelihood_from_pixels(prob, idx) -> float:
    p = np.clip(prob.ravel()[idx], P_CLAMP, 1.0 - P_CLAMP)
    return float(math.exp(np.log(p).mean()))


def _pixels(line, buffer, resolution, h, w):
    # vertices are in pixel units; the buffer is in meters
    if not isinstance(line, Polyline):
        line = Polyline(line)
    return buffer_pixels(line, buffer / resolution, h, w)


def candidate_likelihood(prob_map, candidate, buffer: float = 2.0,
                         resolution: float = 1.0) -> float:
    """Geometric mean of the predicted stream probability over the buffer."""
    prob = np.asarray(prob_map, dtype=np.float64)
    h, w = prob.shape
    idx = _pixels(candidate, buffer, resolution, h, w)
    if idx.size == 0:
        raise DomainError("candidate rasterizes to no pixel inside the map")
    return _likelihood_from_pixels(prob, idx)


def candidate_posterior(likelihoods, priors, chunk_id: int = 0, offsets=None) -> PosteriorRow:
    like = np.asarray(likelihoods, dtype=np.float64)
    prior = np.asarray(priors, dtype=np.float64)
    if like.ndim != 1 or like.shape != prior.shape or like.size == 0:
        raise DomainError("likelihoods and priors must be equal-length non-empty vectors")
    if np.any(like < 0) or np.any(prior < 0):
        raise DomainError("likelihoods and priors must be non-negative")
    if abs(prior.sum() - 1.0) > 1e-9:
        raise DomainError(f"priors sum to {prior.sum()}, expected 1")
    joint = prior * like
    z = joint.sum()
    if not z > 0:
        raise DegeneracyError(f"chunk {chunk_id}: every candidate has zero posterior mass")
    offs = np.zeros(like.size) if offsets is None else np.asarray(offsets, dtype=np.float64)
    return PosteriorRow(chunk_id, offs, prior, like, joint / z)


def _rankings(table: PosteriorTable) -> list:
    """Candidate order of every row: descending posterior, ties toward smaller
    |offset|, then the negative side. One sort per candidate-set size."""
    out = [None] * len(table)
    by_size = {}
    for i, r in enumerate(table):
        by_size.setdefault(r.posterior.size, []).append(i)
    for idx in by_size.values():
        q = np.stack([table.rows[i].posterior for i in idx])
        off = np.stack([table.rows[i].offsets for i in idx])
        order = np.lexsort((off >= 0, np.abs(off), -q), axis=-1)
        for i, o in zip(idx, order):
            out[i] = o
    return out


def greedy_labels(table: PosteriorTable) -> np.ndarray:
    return np.array([o[0] for o in _rankings(table)], dtype=np.int64)


def select_labels(table: PosteriorTable, cfg: EmConfig, rng=None) -> np.ndarray:
    """Index of the chosen candidate in each row.

    Exploration draws are made as one array per call, indexed by row, so the
    outcome for a chunk does not depend on the order rows are processed in.
    With ``epsilon == 0`` the generator is not touched.
    """
    table.validate()
    n = len(table)
    if cfg.epsilon == 0 or n == 0:
        return greedy_labels(table)
    explore = rng.random(n) < cfg.epsilon
    pick = rng.integers(0, cfg.top_k, size=n)
    out = np.empty(n, dtype=np.int64)
    for i, order in enumerate(_rankings(table)):
        out[i] = order[min(pick[i], len(order) - 1)] if explore[i] else order[0]
    return out


# --- expected loss ----------------------------------------------------------


def _support_box(pixel_sets, width):
    allpix = np.concatenate(pixel_sets)
    rows, cols = np.divmod(allpix, width)
    return rows.min(), rows.max() + 1, cols.min(), cols.max() + 1


def _boxes_overlap(a, b):
    return a[0] < b[1] and b[0] < a[1] and a[2] < b[3] and b[2] < a[3]


def chunk_windows(candidate_sets, shape, buffer=2.0, resolution=1.0):
    """Per chunk: the bounding box of all candidate buffers and the pixels of each."""
    h, w = shape
    out = []
    for cs in candidate_sets:
        pix = [_pixels(c, buffer, resolution, h, w) for c in cs.candidates]
        if not any(p.size for p in pix):
            raise DomainError(f"chunk {cs.chunk_id}: every candidate falls outside the grid")
        out.append((_support_box([p for p in pix if p.size], w), pix))
    return out


def check_separation(windows):
    bad = [(i, j) for i, j in combinations(range(len(windows)), 2)
           if _boxes_overlap(windows[i][0], windows[j][0])]
    if bad:
        raise PreconditionError(f"candidate supports overlap for chunk pairs {bad}")


def _local_terms(prob, windows, width, with_grad):
    """For each chunk and candidate, the local negative dice and its gradient."""
    terms = []
    for (r0, r1, c0, c1), pix in windows:
        p = prob[r0:r1, c0:c1]
        row = []
        for idx in pix:
            t = np.zeros((r1 - r0, c1 - c0))
            rr, cc = np.divmod(idx, width)
            t[rr - r0, cc - c0] = 1.0
            loss, g = dice_loss_and_grad(p, t)
            row.append((float(loss), g if with_grad else None))
        terms.append(row)
    return terms


def expected_loss_and_grad(table: PosteriorTable, candidate_sets, prob_map,
                           buffer=2.0, resolution=1.0):
    """Posterior-weighted sum of local negative dice and its gradient in the map."""
    prob = np.asarray(prob_map, dtype=np.float64)
    h, w = prob.shape
    wins = chunk_windows(candidate_sets, (h, w), buffer, resolution)
    check_separation(wins)
    if len(table) != len(wins):
        raise DomainError("table and candidate sets differ in length")
    total = 0.0
    grad = np.zeros_like(prob)
    for row, ((r0, r1, c0, c1), _), terms in zip(
            table, wins, _local_terms(prob, wins, w, True)):
        for q, (loss, g) in zip(row.posterior, terms):
            total += q * loss
            grad[r0:r1, c0:c1] += q * g
    return total, grad


def expected_loss(table: PosteriorTable, model, x, candidate_sets=None, buffer=2.0,
                  resolution=1.0) -> float:
    """Expected loss of ``model`` on ``x`` under the posterior in ``table``.

    The loss of a joint labelling is the sum over chunks of the negative dice
    inside each chunk's candidate support box. When the boxes are disjoint
    the expectation factorizes over chunks; overlapping boxes raise
    :class:`PreconditionError`.
    """
    if candidate_sets is None:
        raise DomainError("expected_loss needs the candidate sets behind the table")
    prob = predict(model, x) if model is not None else np.asarray(x, dtype=np.float64)
    val, _ = expected_loss_and_grad(table, candidate_sets, prob, buffer, resolution)
    return val


# --- the EM loop -----------------------------------------------------------


@dataclass
class EmIteration:
    iteration: int
    selected: np.ndarray
    selected_offsets: np.ndarray
    train_f1: float
    val_f1: float
    curve: TrainCurve
    mean_label_dist: float | None
    labels: list


@dataclass
class EmHistory:
    chunk_ids: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    initial_label_dist: float | None = None
    pretrain_curve: TrainCurve | None = None
    pretrained: object = None
    stopped: str = ""

    def __len__(self):
        return len(self.iterations)

    CSV_FIELDS = ["iteration", "chunk_id", "selected_offset", "train_f1", "val_f1",
                  "mean_label_dist"]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.CSV_FIELDS)
            for it in self.iterations:
                self._write_rows(w, it)

    def _write_rows(self, w, it):
        dist = "" if it.mean_label_dist is None else repr(it.mean_label_dist)
        for cid, off in zip(self.chunk_ids, it.selected_offsets):
            w.writerow([it.iteration, cid, repr(float(off)), repr(it.train_f1),
                        repr(it.val_f1), dist])

    def append_csv(self, path, it):
        with open(path, "a", newline="") as fh:
            self._write_rows(csv.writer(fh), it)


@dataclass
class _Prepared:
    chunks: list
    sets: list
    pixels: list
    origins_train: list
    origins_val: list


def _prepare(shape, noisy, cfg: EmConfig, rng) -> _Prepared:
    h, w = shape
    chunks, sets = [], []
    for li, line in enumerate(noisy):
        for ch in chunk_polyline(line, cfg.chunk_len, parent_id=li):
            cs = generate_candidates(ch, cfg.n_side, cfg.step, cfg.error_model,
                                     chunk_id=len(chunks))
            chunks.append(ch)
            sets.append(cs)
    if not chunks:
        raise DomainError("no chunks to infer: the noisy label set is empty")
    pixels = [[_pixels(c, cfg.buffer, cfg.resolution, h, w) for c in cs.candidates]
              for cs in sets]
    region = cfg.train_region or (0, 0, h, w)
    # a random subset of the regular tiling packs more windows than free placement
    tiles = tile_origins(cfg.window_size, region)
    need = cfg.n_train_windows + cfg.n_val_windows
    if need > len(tiles):
        raise CapacityError(f"region {region} holds {len(tiles)} windows of "
                            f"{cfg.window_size}px, {need} requested", achieved=len(tiles))
    both = [tiles[i] for i in rng.permutation(len(tiles))[:need]]
    return _Prepared(chunks, sets, pixels, both[:cfg.n_train_windows],
                     both[cfg.n_train_windows:])


def _label_grid(lines, shape, cfg):
    return rasterize_buffer(lines, cfg.buffer, shape[0], shape[1], cfg.resolution)


def _windows(x, labels, origins, cfg, augment):
    ws = cut_windows(x, labels, origins, cfg.window_size)
    return augment_all(ws) if augment else ws


def _fit(x, labels, prep, model_spec, sched, cfg, rng, log, init=None):
    model = build_model(model_spec) if init is None else init.astype(init.dtype)
    tr = _windows(x, labels, prep.origins_train, cfg, cfg.augment)
    va = _windows(x, labels, prep.origins_val, cfg, cfg.augment)
    return train(model, tr, va, sched, rng, log=log)


def _window_f1(prob, labels, origins, size):
    pred = to_mask(prob)
    lab = values_of(labels)
    total = None
    for r, c in origins:
        m = confusion(pred[r:r + size, c:c + size], lab[r:r + size, c:c + size])
        total = m if total is None else total + m
    return prf(total).f1


def posterior_table(prob, prep: _Prepared) -> PosteriorTable:
    rows = []
    for cs, pix in zip(prep.sets, prep.pixels):
        like = np.array([_likelihood_from_pixels(prob, idx) if idx.size else P_CLAMP
                         for idx in pix])
        rows.append(candidate_posterior(like, cs.prior, cs.chunk_id, cs.offsets))
    return PosteriorTable(rows)


def _train_expected(x, prep, table, model_spec, sched, rng, cfg, log=None):
    """Full-grid Adam on the expected loss (small, well separated instances)."""
    from .segmodel.train import Adam, PlateauController

    xv = np.asarray(values_of(x))[None]
    m = build_model(model_spec)
    mult = m.multiple
    h, w = xv.shape[1:3]
    if h % mult or w % mult:
        raise DomainError(f"expected-loss training needs dims divisible by {mult}")
    wins = chunk_windows(prep.sets, (h, w), cfg.buffer, cfg.resolution)
    check_separation(wins)
    ctl, opt, curve = PlateauController(sched), Adam(), TrainCurve()
    best = m.state_dict()
    for _ in range(sched.max_epochs):
        p = m.forward(xv, train=True, rng=rng)
        loss, g = expected_loss_and_grad(table, prep.sets, p[0], cfg.buffer, cfg.resolution)
        if not np.isfinite(loss):
            raise TrainingError("non-finite expected loss", epoch=ctl.epoch + 1)
        opt.step(m.get_params(), m.backward(g[None].astype(m.dtype)), ctl.lr)
        val, _ = expected_loss_and_grad(table, prep.sets, predict(m, x), cfg.buffer,
                                        cfg.resolution)
        curve.train_loss.append(float(loss))
        curve.val_loss.append(float(val))
        curve.lr.append(ctl.lr)
        stop = ctl.update(val)
        if ctl.improved:
            best = m.state_dict()
        if stop:
            break
    m.load_state_dict(best)
    return m, curve


def em_run(x, noisy, model_spec, sched: TrainSchedule, cfg: EmConfig, rng, *, truth=None,
           pretrained=None, on_iteration=None, log=None, window_rng=None):
    """Pre-train on the noisy labels, then alternate E- and M-steps.

    Candidates are generated once from the noisy lines. An iteration scores
    them with the current model, selects one per chunk, and re-trains a fresh
    model on the selection. The loop ends when the greedy selection repeats
    the previous one or after ``cfg.max_iterations`` iterations.

    ``on_iteration(history, it)`` is called after every completed iteration.
    Window placement draws from ``window_rng`` when given, otherwise ``rng``.
    Returns the final model and the history.
    """
    fv = values_of(x)
    shape = fv.shape[:2]
    prep = _prepare(shape, noisy, cfg, rng if window_rng is None else window_rng)
    hist = EmHistory(chunk_ids=[cs.chunk_id for cs in prep.sets])
    if truth:
        hist.initial_label_dist = mean_label_distance(
            [cs.candidates[cs.zero_index] for cs in prep.sets], truth)

    if pretrained is None:
        if log:
            log("pre-training on noisy labels")
        try:
            model, hist.pretrain_curve = _fit(x, _label_grid(noisy, shape, cfg), prep,
                                              model_spec, sched, cfg, rng, log)
        except TrainingError as exc:
            exc.iteration = 0
            exc.args = (f"iteration 0: {exc}",) + exc.args[1:]
            raise
    else:
        model = pretrained
    hist.pretrained = model

    prev_greedy = None
    for it in range(1, cfg.max_iterations + 1):
        prob = predict(model, x)
        table = posterior_table(prob, prep)
        greedy = greedy_labels(table)
        if prev_greedy is not None and np.array_equal(greedy, prev_greedy):
            hist.stopped = f"selection unchanged at iteration {it}"
            break
        prev_greedy = greedy
        sel = select_labels(table, cfg, rng)
        labels = [cs.candidates[j] for cs, j in zip(prep.sets, sel)]
        lab_grid = _label_grid(labels, shape, cfg)
        try:
            if cfg.estep == "expected":
                model, curve = _train_expected(x, prep, table, model_spec, sched, rng, cfg, log)
            else:
                init = None if cfg.retrain_from_scratch else model
                model, curve = _fit(x, lab_grid, prep, model_spec, sched, cfg, rng, log, init)
        except TrainingError as exc:
            exc.iteration = it
            exc.args = (f"iteration {it}: {exc}",) + exc.args[1:]
            raise
        prob = predict(model, x)
        rec = EmIteration(
            iteration=it,
            selected=sel,
            selected_offsets=np.array([cs.offsets[j] for cs, j in zip(prep.sets, sel)]),
            train_f1=_window_f1(prob, lab_grid, prep.origins_train, cfg.window_size),
            val_f1=_window_f1(prob, lab_grid, prep.origins_val, cfg.window_size),
            curve=curve,
            mean_label_dist=mean_label_distance(labels, truth) if truth else None,
            labels=labels,
        )
        hist.iterations.append(rec)
        if log:
            d = "" if rec.mean_label_dist is None else f" label dist {rec.mean_label_dist:.3f}"
            log(f"EM iteration {it}: train F1 {rec.train_f1:.3f} val F1 {rec.val_f1:.3f}{d}")
        if on_iteration is not None:
            on_iteration(hist, rec)
    else:
        hist.stopped = "iteration cap" if cfg.max_iterations else "no EM iterations"
    return model, hist


def write_iteration_labels(out_dir, it: EmIteration, resolution=1.0) -> Path:
    path = Path(out_dir) / f"labels_iter{it.iteration:02d}.json"
    write_polylines(path, it.labels, resolution)
    return path


__all__ = [
    "EmConfig", "PosteriorRow", "PosteriorTable", "EmHistory", "EmIteration",
    "candidate_likelihood", "candidate_posterior", "select_labels", "greedy_labels",
    "expected_loss", "expected_loss_and_grad", "chunk_windows", "check_separation",
    "posterior_table", "em_run", "write_iteration_labels",
]
