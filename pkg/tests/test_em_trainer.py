import csv
import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from emshift.em_trainer import (
    EmConfig,
    EmHistory,
    PosteriorTable,
    candidate_likelihood,
    candidate_posterior,
    em_run,
    expected_loss,
    select_labels,
)
from emshift.errors import DegeneracyError, DomainError, PreconditionError
from emshift.geometry_error import CandidateSet, PolarErrorModel, Polyline, chunk_polyline
from emshift.raster import rasterize_buffer
from emshift.segmodel import ModelSpec, TrainSchedule, build_model, dice_loss_and_grad, predict
from oracles import brute_force_raster, enumerate_expected_loss


# --- likelihood ----------------------------------------------------------------


def test_likelihood_constant_map():
    prob = np.full((20, 20), 0.5)
    for y in (3.5, 10.0, 15.2):
        assert candidate_likelihood(prob, Polyline([[2, y], [15, y]])) == pytest.approx(0.5)


def test_likelihood_piecewise_map():
    a = Polyline([[2, 4.5], [18, 4.5]])
    b = Polyline([[2, 14.5], [18, 14.5]])
    prob = np.full((20, 20), 0.5)
    prob[rasterize_buffer([a], 2.0, 20, 20).values == 1] = 0.9
    prob[rasterize_buffer([b], 2.0, 20, 20).values == 1] = 0.1
    assert candidate_likelihood(prob, a) == pytest.approx(0.9, abs=1e-12)
    assert candidate_likelihood(prob, b) == pytest.approx(0.1, abs=1e-12)


def test_likelihood_single_pixel():
    prob = np.full((5, 5), 0.2)
    prob[2, 2] = 0.7
    line = Polyline([[2.4, 2.5], [2.6, 2.5]])
    assert candidate_likelihood(prob, line, buffer=0.2) == pytest.approx(0.7)


def test_likelihood_clamps_and_rejects_outside():
    prob = np.zeros((10, 10))
    val = candidate_likelihood(prob, Polyline([[1, 5], [8, 5]]))
    assert val == pytest.approx(1e-6)
    with pytest.raises(DomainError):
        candidate_likelihood(prob, Polyline([[30, 30], [40, 30]]))


# --- posterior -------------------------------------------------------------------


def test_posterior_examples():
    row = candidate_posterior([0.3] * 4, [0.25] * 4)
    assert row.posterior == pytest.approx([0.25] * 4)
    assert candidate_posterior([0.8, 0.2], [0.5, 0.5]).posterior == pytest.approx([0.8, 0.2])
    assert candidate_posterior([0.1, 0.9], [0.9, 0.1]).posterior == pytest.approx([0.5, 0.5])


def test_posterior_degenerate_and_invalid():
    with pytest.raises(DegeneracyError):
        candidate_posterior([0.0, 0.0], [0.5, 0.5])
    with pytest.raises(DomainError):
        candidate_posterior([0.1], [0.5])
    with pytest.raises(DomainError):
        candidate_posterior([0.1, 0.2], [1.0])


@given(st.lists(st.floats(1e-6, 1.0), min_size=1, max_size=19), st.floats(1e-3, 1e3),
       st.integers(0, 10 ** 6))
def test_posterior_normalized_and_scale_invariant(like, scale, seed):
    prior = np.random.default_rng(seed).dirichlet(np.ones(len(like)))
    prior = prior / prior.sum()
    a = candidate_posterior(like, prior).posterior
    b = candidate_posterior(np.array(like) * scale, prior).posterior
    assert abs(a.sum() - 1) < 1e-9 and np.all(a >= 0)
    assert np.allclose(a, b, rtol=1e-9, atol=1e-15)


# --- selection -------------------------------------------------------------------


def _table(posts, offsets=None):
    rows = []
    for i, q in enumerate(posts):
        q = np.asarray(q, float)
        off = np.arange(len(q)) - len(q) // 2 if offsets is None else np.asarray(offsets, float)
        rows.append(candidate_posterior(q, np.full(len(q), 1 / len(q)), i, off))
    return PosteriorTable(rows)


def test_greedy_picks_argmax_without_touching_rng():
    t = _table([[0.1, 0.6, 0.3], [0.5, 0.2, 0.3]])
    rng = np.random.default_rng(0)
    before = rng.bit_generator.state
    assert select_labels(t, EmConfig(epsilon=0.0), rng).tolist() == [1, 0]
    assert rng.bit_generator.state == before
    assert select_labels(t, EmConfig(epsilon=0.0), None).tolist() == [1, 0]


def test_tie_breaking():
    offs = [-2, -1, 0, 1, 2]
    t = _table([[0.3, 0.1, 0.2, 0.1, 0.3], [0.1, 0.3, 0.1, 0.3, 0.2]], offs)
    # |offset| ties resolve to the negative side
    assert select_labels(t, EmConfig(epsilon=0.0)).tolist() == [0, 1]
    t = _table([[0.2, 0.3, 0.3, 0.1, 0.1]], offs)
    assert select_labels(t, EmConfig(epsilon=0.0)).tolist() == [2]


def test_exploration_frequencies():
    n = 100_000
    q = np.array([0.02, 0.2, 0.15, 0.03, 0.25, 0.1, 0.05, 0.2])
    t = _table([q] * n)
    sel = select_labels(t, EmConfig(epsilon=1.0, top_k=5, n_side=9), np.random.default_rng(0))
    top5 = sorted(np.argsort(-q, kind="stable")[:5].tolist())
    counts = np.bincount(sel, minlength=len(q)) / n
    assert set(np.flatnonzero(counts)) == set(top5)
    assert np.all(np.abs(counts[top5] - 0.2) <= 0.01)


def test_selection_deterministic_per_seed():
    t = _table([np.random.default_rng(i).dirichlet(np.ones(7)) for i in range(50)])
    cfg = EmConfig(epsilon=0.3, top_k=3)
    a = select_labels(t, cfg, np.random.default_rng(42))
    b = select_labels(t, cfg, np.random.default_rng(42))
    assert np.array_equal(a, b)


def test_config_validation():
    with pytest.raises(DomainError):
        EmConfig(epsilon=1.5)
    with pytest.raises(DomainError):
        EmConfig(top_k=20)
    with pytest.raises(DomainError):
        EmConfig(top_k=0)
    assert (EmConfig().epsilon, EmConfig().top_k) == (0.05, 5)


# --- expected loss ---------------------------------------------------------------

ROWS = (5.5, 15.5, 26.5)


def _candidate_set(cid, y, n_cand, x0=3.0, x1=13.0):
    base = np.array([[x0, y], [0.5 * (x0 + x1), y + 0.3], [x1, y]])
    offsets = np.array([0.0, 1.0, -1.0][:n_cand])
    order = np.argsort(offsets)
    offsets = offsets[order]
    cands = [Polyline(base + o * np.array([0.0, 1.0])) for o in offsets]
    # normal of this chord points +y
    return CandidateSet(cid, cands, offsets, np.full(n_cand, 1.0 / n_cand), np.array([0, 1.0]))


def _instance(sizes, seed):
    rng = np.random.default_rng(seed)
    sets = [_candidate_set(i, ROWS[i], k, 3 + 4 * i, 13 + 5 * i) for i, k in enumerate(sizes)]
    rows = [candidate_posterior(rng.random(k) + 0.05, cs.prior, i, cs.offsets)
            for i, (k, cs) in enumerate(zip(sizes, sets))]
    return sets, PosteriorTable(rows)


def _oracle(prob, sets, table):
    # support window of each chunk, derived from brute-force rasters
    windows = []
    for cs in sets:
        m = np.zeros(prob.shape, bool)
        for c in cs.candidates:
            m |= np.array(brute_force_raster([c], 2.0, *prob.shape), bool)
        rr, cc = np.nonzero(m)
        windows.append((rr.min(), rr.max() + 1, cc.min(), cc.max() + 1))

    def raster(config):
        return np.array(brute_force_raster(
            [cs.candidates[j] for cs, j in zip(sets, config)], 2.0, *prob.shape), float)

    return enumerate_expected_loss(prob, windows, [r.posterior for r in table], raster)


def _model_and_input():
    m = build_model(ModelSpec("linear", 2, seed=1))
    x = np.random.default_rng(5).normal(size=(32, 32, 2))
    return m, x


def test_expected_loss_single_candidate_is_plain_loss():
    m, x = _model_and_input()
    sets, table = _instance([1], 0)
    prob = predict(m, x)
    lab = rasterize_buffer(sets[0].candidates, 2.0, 32, 32).values
    rr, cc = np.nonzero(lab)
    box = (slice(rr.min(), rr.max() + 1), slice(cc.min(), cc.max() + 1))
    want, _ = dice_loss_and_grad(prob[box], lab[box].astype(float))
    assert expected_loss(table, m, x, sets) == pytest.approx(want, abs=1e-12)


def test_expected_loss_two_by_two_matches_enumeration():
    m, x = _model_and_input()
    sets, table = _instance([2, 2], 3)
    got = expected_loss(table, m, x, sets)
    assert abs(got - _oracle(predict(m, x), sets, table)) < 1e-9


def test_expected_loss_all_small_instances():
    m, x = _model_and_input()
    prob = predict(m, x)
    n = 0
    for n_chunks in (1, 2, 3):
        for sizes in itertools.product((1, 2, 3), repeat=n_chunks):
            sets, table = _instance(sizes, n)
            got = expected_loss(table, None, prob, sets)
            assert abs(got - _oracle(prob, sets, table)) < 1e-9, sizes
            n += 1
    assert n == 39


def test_expected_loss_point_mass_is_selected_loss():
    m, x = _model_and_input()
    prob = predict(m, x)
    sets, table = _instance([3, 3], 9)
    for r in table:
        r.posterior[:] = 0
        r.posterior[2] = 1
    want = 0.0
    for cs in sets:
        union = rasterize_buffer(cs.candidates, 2.0, 32, 32).values
        rr, cc = np.nonzero(union)
        box = (slice(rr.min(), rr.max() + 1), slice(cc.min(), cc.max() + 1))
        lab = rasterize_buffer([cs.candidates[2]], 2.0, 32, 32).values
        want += dice_loss_and_grad(prob[box], lab[box].astype(float))[0]
    assert expected_loss(table, None, prob, sets) == pytest.approx(want, abs=1e-12)


def test_expected_loss_overlap_precondition():
    m, x = _model_and_input()
    a = _candidate_set(0, 10.0, 3)
    b = _candidate_set(1, 13.0, 3)
    c = _candidate_set(2, 27.0, 3)
    rows = [candidate_posterior([0.3, 0.3, 0.4], cs.prior, i, cs.offsets)
            for i, cs in enumerate((a, b, c))]
    with pytest.raises(PreconditionError, match=r"\(0, 1\)"):
        expected_loss(PosteriorTable(rows), m, x, [a, b, c])


# --- the loop --------------------------------------------------------------------


def _small_scene(shift=0.0, seed=0):
    from emshift.synth import SceneSpec, make_scene
    spec = SceneSpec(height=64, width=64, n_lines=1, min_length=40, min_separation=0,
                     amplitude=2.0, noise_std=0.3, seed=seed)
    sc = make_scene(spec)
    noisy = sc.truth
    if shift:
        from emshift.synth import corrupt_labels
        noisy = corrupt_labels(sc.truth, PolarErrorModel(rho_max=abs(shift)), 0.0, 20,
                               np.random.default_rng(0), mean=shift, std=0.0)
    return sc, noisy


FAST = TrainSchedule(max_epochs=6, early_stop_patience=3, lr_halving_patience=2,
                     initial_lr=0.02)
SMALL_CFG = EmConfig(window_size=16, n_train_windows=6, n_val_windows=2,
                     train_region=(32, 0, 32, 64), max_iterations=2)


def test_zero_iterations_returns_pretrained():
    sc, noisy = _small_scene()
    m, hist = em_run(sc.features, noisy, ModelSpec(widths=(2, 3, 4)), FAST,
                     SMALL_CFG.replace(max_iterations=0), np.random.default_rng(0),
                     truth=sc.truth)
    assert len(hist) == 0 and m is hist.pretrained
    assert hist.initial_label_dist == pytest.approx(0.0, abs=1e-9)


def test_history_csv_and_bounds(tmp_path):
    sc, noisy = _small_scene(shift=3.0)
    seen = []
    m, hist = em_run(sc.features, noisy, ModelSpec(widths=(2, 3, 4)), FAST, SMALL_CFG,
                     np.random.default_rng(1), truth=sc.truth,
                     on_iteration=lambda h, it: seen.append(it.iteration))
    assert 1 <= len(hist) <= SMALL_CFG.max_iterations
    assert seen == [it.iteration for it in hist.iterations]
    p = tmp_path / "h.csv"
    hist.to_csv(p)
    rows = list(csv.reader(p.open()))
    assert rows[0] == EmHistory.CSV_FIELDS
    assert len(rows) == 1 + len(hist) * len(hist.chunk_ids)
    p2 = tmp_path / "empty.csv"
    EmHistory().to_csv(p2)
    assert p2.read_text().strip() == ",".join(EmHistory.CSV_FIELDS)


def test_shifted_labels_move_toward_truth():
    from emshift.synth import SceneSpec, make_scene, corrupt_labels
    spec = SceneSpec(height=128, width=128, n_lines=1, min_length=80, amplitude=2.0,
                     noise_std=0.3, seed=2)
    sc = make_scene(spec)
    noisy = corrupt_labels(sc.truth, PolarErrorModel(rho_max=4), 0.0, 20,
                           np.random.default_rng(0), mean=4.0, std=0.0)
    cfg = EmConfig(window_size=32, n_train_windows=6, n_val_windows=2,
                   train_region=(64, 0, 64, 128), max_iterations=2, epsilon=0.0)
    sched = TrainSchedule(max_epochs=25, early_stop_patience=8)
    _, hist = em_run(sc.features, noisy, ModelSpec(), sched, cfg, np.random.default_rng(0),
                     truth=sc.truth)
    assert hist.initial_label_dist == pytest.approx(4.0, abs=0.3)
    assert hist.iterations[-1].mean_label_dist < hist.initial_label_dist
