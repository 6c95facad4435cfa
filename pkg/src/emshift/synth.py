"""Synthetic scenes with known true streamlines and corrupted labels."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import CapacityError, DomainError
from .geometry_error import (
    PolarErrorModel,
    Polyline,
    chunk_normal,
    chunk_polyline,
    read_polylines,
    write_polylines,
)
from .raster import FeatureGrid, read_grid, write_grid


@dataclass
class SceneSpec:
    height: int = 256
    width: int = 256
    n_lines: int = 2
    turn_std: float = 0.08
    vertex_spacing: float = 2.0
    min_length: float = 50.0
    margin: float = 4.0
    min_separation: float = 24.0
    amplitude: float = 1.0
    noise_std: float = 0.35
    n_distractors: int = 2
    kernel_width: float = 2.0
    rho_max: float = 6.0
    delta_rho: float = 1.0
    phi: float = 0.7
    # stationary mean and std of the signed offset process (std None = rho_max / 2)
    offset_mean: float = 0.0
    offset_std: float | None = None
    chunk_len: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.height < 64 or self.width < 64:
            raise DomainError(f"scene dims must be >= 64, got {self.height}x{self.width}")
        if not self.amplitude > 0:
            raise DomainError(f"amplitude must be > 0, got {self.amplitude}")
        if not 0.0 <= self.phi < 1.0:
            raise DomainError(f"phi must lie in [0, 1), got {self.phi}")
        if self.n_lines < 0 or self.n_distractors < 0:
            raise DomainError("n_lines and n_distractors must be >= 0")
        if self.noise_std < 0 or self.turn_std < 0:
            raise DomainError("noise_std and turn_std must be >= 0")
        if self.offset_std is not None and self.offset_std < 0:
            raise DomainError("offset_std must be >= 0")
        if abs(self.offset_mean) > self.rho_max:
            raise DomainError(f"|offset_mean| must be <= rho_max = {self.rho_max}")

    @property
    def error_model(self) -> PolarErrorModel:
        # angular resolution is irrelevant for perpendicular shifts
        return PolarErrorModel(delta_rho=self.delta_rho, delta_theta=math.pi / 4,
                               rho_max=self.rho_max)

    def to_text(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "SceneSpec":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = (s.strip() for s in line.partition("="))
            if key not in types:
                raise DomainError(f"unknown scene key {key!r}")
            if val == "None":
                kw[key] = None
            else:
                kw[key] = int(val) if types[key] in (int, "int") else float(val)
        return cls(**kw)


def point_polyline_distance(px, py, vertices) -> np.ndarray:
    """Distance from each point to the nearest point of a polyline."""
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    best = np.full(px.shape, np.inf)
    v = np.asarray(vertices, dtype=np.float64)
    for (ax, ay), (bx, by) in zip(v[:-1], v[1:]):
        abx, aby = bx - ax, by - ay
        den = abx * abx + aby * aby
        t = np.clip(((px - ax) * abx + (py - ay) * aby) / den, 0.0, 1.0) if den > 0 else 0.0
        d2 = (px - ax - t * abx) ** 2 + (py - ay - t * aby) ** 2
        np.minimum(best, d2, out=best)
    return np.sqrt(best)


def distance_field(lines, height, width) -> np.ndarray:
    """Distance from every pixel center to the nearest line (inf if none)."""
    rr, cc = np.mgrid[0:height, 0:width]
    px, py = cc + 0.5, rr + 0.5
    d = np.full((height, width), np.inf)
    for line in lines:
        np.minimum(d, point_polyline_distance(px, py, getattr(line, "vertices", line)), out=d)
    return d


def _walk(start, heading, spec, rng, max_steps):
    pts = [np.asarray(start, dtype=np.float64)]
    lo = spec.margin
    hi_x, hi_y = spec.width - spec.margin, spec.height - spec.margin
    for _ in range(max_steps):
        heading += rng.normal(0.0, spec.turn_std) if spec.turn_std > 0 else 0.0
        p = pts[-1] + spec.vertex_spacing * np.array([math.cos(heading), math.sin(heading)])
        if not (lo <= p[0] <= hi_x and lo <= p[1] <= hi_y):
            break
        pts.append(p)
    return pts


def generate_truth_polylines(spec: SceneSpec, rng, max_retries: int = 1000) -> list[Polyline]:
    """Smooth random-walk lines grown in both directions from a random seed point."""
    max_steps = int(2 * (spec.height + spec.width) / spec.vertex_spacing)
    lines: list[Polyline] = []
    tries = 0
    while len(lines) < spec.n_lines:
        tries += 1
        if tries > max_retries:
            raise CapacityError(
                f"placed {len(lines)} of {spec.n_lines} lines after {max_retries} tries",
                achieved=len(lines),
            )
        start = (rng.uniform(spec.margin, spec.width - spec.margin),
                 rng.uniform(spec.margin, spec.height - spec.margin))
        heading = rng.uniform(0.0, 2 * math.pi)
        fwd = _walk(start, heading, spec, rng, max_steps)
        back = _walk(start, heading + math.pi, spec, rng, max_steps)
        verts = np.array(back[::-1] + fwd[1:])
        if len(verts) < 2:
            continue
        line = Polyline(verts)
        if line.length < spec.min_length:
            continue
        if any(point_polyline_distance(verts[:, 0], verts[:, 1], o.vertices).min()
               < spec.min_separation for o in lines):
            continue
        lines.append(line)
    return lines


def render_features(lines, spec: SceneSpec, rng) -> FeatureGrid:
    """Channel 0: Gaussian ridge along the lines plus noise; others pure noise."""
    d = distance_field(lines, spec.height, spec.width)
    signal = spec.amplitude * np.exp(-d ** 2 / (2.0 * spec.kernel_width ** 2))
    chans = [signal]
    chans += [np.zeros((spec.height, spec.width)) for _ in range(spec.n_distractors)]
    x = np.stack(chans, axis=-1)
    if spec.noise_std > 0:
        x = x + rng.normal(0.0, spec.noise_std, size=x.shape)
    return FeatureGrid(x.astype(np.float32), resolution=1.0)


def ar1_offsets(n: int, model: PolarErrorModel, phi: float, rng, mean: float = 0.0,
                std: float | None = None) -> np.ndarray:
    """Signed perpendicular offsets with lag-1 autocorrelation ``phi``.

    The latent process has stationary mean ``mean`` and standard deviation
    ``std`` (default ``rho_max / 2``); every value is snapped to the
    ``delta_rho`` grid and clipped to ``[-rho_max, rho_max]``.
    """
    if not 0.0 <= phi < 1.0:
        raise DomainError(f"phi must lie in [0, 1), got {phi}")
    out = np.zeros(n)
    if model.rho_max == 0 or n == 0:
        return out
    sigma = model.rho_max / 2.0 if std is None else std
    kmax = model.n_rho - 1
    prev = None
    for t in range(n):
        if prev is None:
            val = mean + rng.normal(0.0, sigma)
        else:
            val = mean + phi * (prev - mean) + rng.normal(0.0, sigma * math.sqrt(1.0 - phi * phi))
        k = int(np.clip(round(val / model.delta_rho), -kmax, kmax))
        prev = out[t] = k * model.delta_rho
    return out


def _blend_weights(n_vertices, boundaries):
    # weight of the "next" chunk for vertices around each shared boundary vertex
    taper = {-1: 0.25, 0: 0.5, 1: 0.75}
    return [(b, {b + k: w for k, w in taper.items() if 0 <= b + k < n_vertices})
            for b in boundaries]


def corrupt_labels(lines, model: PolarErrorModel, phi: float = 0.7, chunk_len: float = 20.0,
                   rng=None, mean: float = 0.0, std: float | None = None) -> list[Polyline]:
    """Shift each chunk rigidly along its normal by an AR(1) signed offset.

    Around each chunk boundary the offsets of the two adjacent chunks are
    linearly blended over the neighbouring vertices, which keeps the line
    connected.
    """
    rng = rng if rng is not None else np.random.default_rng()
    out = []
    for li, line in enumerate(lines):
        chunks = chunk_polyline(line, chunk_len, parent_id=li)
        offs = ar1_offsets(len(chunks), model, phi, rng, mean, std)
        vecs = [o * chunk_normal(c) for o, c in zip(offs, chunks)]
        verts, owner, boundaries = [], [], []
        for ci, c in enumerate(chunks):
            v = c.vertices if ci == 0 else c.vertices[1:]
            if ci > 0:
                boundaries.append(len(verts) - 1)
            verts.extend(v)
            owner.extend([ci] * len(v))
        verts = np.array(verts)
        disp = np.array([vecs[o] for o in owner])
        for ci, (b, ws) in enumerate(_blend_weights(len(verts), boundaries)):
            left, right = vecs[ci], vecs[ci + 1]
            for vi, w in ws.items():
                disp[vi] = (1.0 - w) * left + w * right
        moved = verts + disp
        keep = np.concatenate([[True], np.any(np.diff(moved, axis=0) != 0.0, axis=1)])
        out.append(Polyline(moved[keep]))
    return out


@dataclass
class Scene:
    features: FeatureGrid
    truth: list
    noisy: list
    spec: SceneSpec


def make_scene(spec: SceneSpec) -> Scene:
    """Truth lines, features and corrupted labels from one seed, in that order."""
    rng = np.random.default_rng(spec.seed)
    truth = generate_truth_polylines(spec, rng)
    features = render_features(truth, spec, rng)
    noisy = corrupt_labels(truth, spec.error_model, spec.phi, spec.chunk_len, rng,
                           spec.offset_mean, spec.offset_std)
    return Scene(features, truth, noisy, spec)


SCENE_FILES = ("features.grid", "truth.json", "noisy.json", "scene.txt")


def save_scene(scene: Scene, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / n for n in SCENE_FILES]
    write_grid(paths[0], scene.features.values.astype(np.float32))
    write_polylines(paths[1], scene.truth, scene.features.resolution)
    write_polylines(paths[2], scene.noisy, scene.features.resolution)
    paths[3].write_text(scene.spec.to_text())
    return paths


def load_scene(scene_dir) -> Scene:
    d = Path(scene_dir)
    for n in SCENE_FILES:
        if not (d / n).is_file():
            raise FileNotFoundError(f"missing scene file: {d / n}")
    spec = SceneSpec.from_text((d / "scene.txt").read_text())
    truth, res = read_polylines(d / "truth.json")
    noisy, _ = read_polylines(d / "noisy.json")
    return Scene(FeatureGrid(read_grid(d / "features.grid"), res), truth, noisy, spec)
