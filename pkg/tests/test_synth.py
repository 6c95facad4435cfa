import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from emshift.errors import CapacityError, DomainError
from emshift.geometry_error import PolarErrorModel, Polyline
from emshift.synth import (
    SceneSpec,
    ar1_offsets,
    corrupt_labels,
    distance_field,
    generate_truth_polylines,
    load_scene,
    make_scene,
    render_features,
    save_scene,
)
from oracles import point_segment_d2


def lag1(x):
    x = np.asarray(x, float) - np.mean(x)
    return float((x[:-1] * x[1:]).sum() / (x * x).sum())


def test_spec_validation():
    for bad in ({"height": 32}, {"amplitude": 0.0}, {"phi": 1.0}, {"phi": -0.1}):
        with pytest.raises(DomainError):
            SceneSpec(**bad)


def test_spec_text_round_trip():
    spec = SceneSpec(n_lines=3, phi=0.2, seed=9, offset_std=1.5)
    assert SceneSpec.from_text(spec.to_text()) == spec
    with pytest.raises(DomainError, match="bogus"):
        SceneSpec.from_text("bogus = 1")


def test_straight_lines_with_zero_turn_std():
    spec = SceneSpec(turn_std=0.0, n_lines=2)
    for line in generate_truth_polylines(spec, np.random.default_rng(0)):
        d = np.diff(line.vertices, axis=0)
        ang = np.arctan2(d[:, 1], d[:, 0])
        assert np.ptp(np.unwrap(ang)) < 1e-9


def test_truth_deterministic_per_seed():
    spec = SceneSpec()
    a = generate_truth_polylines(spec, np.random.default_rng(5))
    b = generate_truth_polylines(spec, np.random.default_rng(5))
    assert a == b


@given(st.integers(0, 1000))
def test_three_lines_inside_and_long(seed):
    spec = SceneSpec(n_lines=3, min_separation=10)
    lines = generate_truth_polylines(spec, np.random.default_rng(seed))
    assert len(lines) == 3
    for line in lines:
        assert line.length >= 50
        v = line.vertices
        assert v.min() >= 0 and v[:, 0].max() <= spec.width and v[:, 1].max() <= spec.height
        assert np.allclose(np.hypot(*np.diff(v, axis=0).T), 2.0)


def test_truth_capacity_error():
    spec = SceneSpec(height=64, width=64, n_lines=5, min_length=200)
    with pytest.raises(CapacityError) as info:
        generate_truth_polylines(spec, np.random.default_rng(0), max_retries=20)
    assert info.value.achieved == 0


def test_features_zero_noise_match_distance_kernel():
    spec = SceneSpec(height=64, width=64, noise_std=0.0, n_lines=1, min_separation=0)
    rng = np.random.default_rng(2)
    lines = generate_truth_polylines(spec, rng)
    x = render_features(lines, spec, rng).values
    v = lines[0].vertices
    for r, c in [(0, 0), (10, 20), (33, 47), (63, 63), (31, 5)]:
        d2 = min(point_segment_d2(c + 0.5, r + 0.5, *a, *b) for a, b in zip(v[:-1], v[1:]))
        want = spec.amplitude * math.exp(-d2 / (2 * spec.kernel_width ** 2))
        assert x[r, c, 0] == pytest.approx(want, rel=1e-6, abs=1e-7)
    assert np.all(x[..., 1:] == 0)


def test_features_on_line_near_amplitude():
    spec = SceneSpec(amplitude=3.0, noise_std=0.1)
    rng = np.random.default_rng(0)
    lines = generate_truth_polylines(spec, rng)
    x = render_features(lines, spec, rng).values
    d = distance_field(lines, spec.height, spec.width)
    on = x[d < 0.3, 0]
    assert abs(on.mean() - 3.0) < 0.1
    assert x.shape == (256, 256, 3) and np.isfinite(x).all()


def test_features_pure_noise_without_lines():
    spec = SceneSpec(n_lines=0, noise_std=1.0)
    x = render_features([], spec, np.random.default_rng(0)).values
    assert abs(x[..., 0].std() - 1.0) < 0.02


def test_zero_support_leaves_lines_unchanged():
    lines = generate_truth_polylines(SceneSpec(), np.random.default_rng(1))
    out = corrupt_labels(lines, PolarErrorModel(rho_max=0), 0.7, 20, np.random.default_rng(0))
    assert out == lines


def test_ar1_independent_draws():
    m = PolarErrorModel(rho_max=6)
    x = ar1_offsets(10_000, m, 0.0, np.random.default_rng(0))
    assert abs(lag1(x)) < 0.05


def test_ar1_strong_autocorrelation():
    m = PolarErrorModel(rho_max=6)
    x = ar1_offsets(10_000, m, 0.9, np.random.default_rng(0))
    assert 0.8 <= lag1(x) <= 0.95


def test_ar1_grid_and_bounds():
    m = PolarErrorModel(delta_rho=1.5, rho_max=6)
    x = ar1_offsets(2000, m, 0.5, np.random.default_rng(0), mean=3.0, std=4.0)
    assert np.all(np.abs(x) <= 6) and np.allclose(x / 1.5, np.round(x / 1.5))
    assert x.mean() > 1.5


@given(st.integers(0, 500), st.floats(0, 0.95))
def test_corrupted_lines_stay_within_support(seed, phi):
    rng = np.random.default_rng(seed)
    m = PolarErrorModel(rho_max=6)
    truth = generate_truth_polylines(SceneSpec(), rng)
    noisy = corrupt_labels(truth, m, phi, 20, rng)
    for t, n in zip(truth, noisy):
        # every noisy vertex lies within rho_max + 1 of its true line
        pts = n.vertices
        best = np.full(len(pts), np.inf)
        for a, b in zip(t.vertices[:-1], t.vertices[1:]):
            best = np.minimum(best, [point_segment_d2(px, py, *a, *b) for px, py in pts])
        assert np.sqrt(best).max() <= 6 + 1 + 1e-9


def test_scene_reproducible_and_round_trip(tmp_path):
    spec = SceneSpec(height=96, width=96, seed=4)
    a, b = make_scene(spec), make_scene(spec)
    assert a.features.values.tobytes() == b.features.values.tobytes()
    assert a.truth == b.truth and a.noisy == b.noisy
    save_scene(a, tmp_path / "s1")
    save_scene(b, tmp_path / "s2")
    for name in ("features.grid", "truth.json", "noisy.json", "scene.txt"):
        assert (tmp_path / "s1" / name).read_bytes() == (tmp_path / "s2" / name).read_bytes()
    back = load_scene(tmp_path / "s1")
    assert np.array_equal(back.features.values, a.features.values)
    assert back.truth == a.truth and back.noisy == a.noisy and back.spec == a.spec


def test_load_scene_missing_file(tmp_path):
    save_scene(make_scene(SceneSpec(height=64, width=64)), tmp_path)
    (tmp_path / "noisy.json").unlink()
    with pytest.raises(FileNotFoundError, match="noisy.json"):
        load_scene(tmp_path)


def test_learnable_with_true_labels():
    from emshift.raster import augment_all, cut_windows, rasterize_buffer, tile_origins
    from emshift.segmodel import ModelSpec, TrainSchedule, build_model, train

    spec = SceneSpec(height=128, width=128, amplitude=3.0, noise_std=0.3, seed=1)
    sc = make_scene(spec)
    lab = rasterize_buffer(sc.truth, 2.0, 128, 128)
    tiles = tile_origins(32, (0, 0, 128, 128))
    rng = np.random.default_rng(0)
    ws = cut_windows(sc.features, lab, tiles, 32)
    ws = [w for w in ws if w.labels.any()]
    tr, va = augment_all(ws[:-2]), augment_all(ws[-2:])
    _, curve = train(build_model(ModelSpec()), tr, va, TrainSchedule(max_epochs=30), rng)
    assert -min(curve.val_loss) > 0.9
