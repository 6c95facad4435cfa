"""Polar-coordinate label location error model and polyline chunk machinery.

Coordinates are in pixel units (x = column axis, y = row axis). A true point
``l`` and its observed position ``l~`` differ by a displacement expressed in
polar form ``(rho, theta) = (k_rho * delta_rho, k_theta * delta_theta)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DomainError

GRID_TOL = 1e-9
# chunk tails shorter than this are merged into the preceding chunk
_MIN_TAIL = 1e-6


def _as_vertices(vertices) -> np.ndarray:
    v = np.array(vertices, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != 2:
        raise DomainError(f"vertices must have shape (n, 2), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise DomainError("vertex coordinates must be finite")
    return v


@dataclass(frozen=True, eq=False)
class Polyline:
    """Ordered vertex sequence ``(n, 2)`` in pixel coordinates."""

    vertices: np.ndarray

    def __post_init__(self):
        v = _as_vertices(self.vertices)
        if len(v) < 2:
            raise DomainError("a polyline needs at least 2 vertices")
        seg = np.diff(v, axis=0)
        if np.any(np.all(seg == 0.0, axis=1)):
            raise DomainError("consecutive polyline vertices coincide")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    @property
    def length(self) -> float:
        return float(segment_lengths(self.vertices).sum())

    def translated(self, offset) -> "Polyline":
        return Polyline(self.vertices + np.asarray(offset, dtype=np.float64))

    def __len__(self):
        return len(self.vertices)

    def __eq__(self, other):
        if not isinstance(other, Polyline):
            return NotImplemented
        return np.array_equal(self.vertices, other.vertices)


@dataclass(frozen=True, eq=False)
class Chunk:
    """A contiguous piece of a parent polyline."""

    parent_id: int
    vertices: np.ndarray
    arc_length: float
    index: int = 0

    def as_polyline(self) -> Polyline:
        return Polyline(self.vertices)


@dataclass(frozen=True)
class PolarErrorModel:
    """Discretized polar error distribution ``P(observed | true)``.

    Every distinct grid displacement is equally likely. The origin is a
    single cell (its angle is undefined), so the grid has
    ``1 + (n_rho - 1) * n_theta`` cells.
    """

    delta_rho: float = 1.0
    delta_theta: float = math.pi / 4
    rho_max: float = 9.0

    def __post_init__(self):
        if not (self.delta_rho > 0 and math.isfinite(self.delta_rho)):
            raise DomainError(f"delta_rho must be > 0, got {self.delta_rho}")
        if not (self.delta_theta > 0 and math.isfinite(self.delta_theta)):
            raise DomainError(f"delta_theta must be > 0, got {self.delta_theta}")
        if not (self.rho_max >= 0 and math.isfinite(self.rho_max)):
            raise DomainError(f"rho_max must be >= 0, got {self.rho_max}")
        ratio = 2 * math.pi / self.delta_theta
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise DomainError(f"delta_theta={self.delta_theta} does not divide 2*pi evenly")

    @property
    def n_rho(self) -> int:
        return int(math.floor(self.rho_max / self.delta_rho + GRID_TOL)) + 1

    @property
    def n_theta(self) -> int:
        return int(round(2 * math.pi / self.delta_theta))

    @property
    def n_cells(self) -> int:
        return 1 + (self.n_rho - 1) * self.n_theta

    @property
    def cell_mass(self) -> float:
        return 1.0 / self.n_cells

    def cells(self):
        """Yield every distinct ``(k_rho, k_theta)`` cell; the origin once."""
        yield 0, 0
        for k_rho in range(1, self.n_rho):
            for k_theta in range(self.n_theta):
                yield k_rho, k_theta


def polar_to_offset(k_rho: int, k_theta: int, model: PolarErrorModel) -> np.ndarray:
    """Displacement ``(dx, dy)`` from the true to the observed point."""
    if k_rho < 0:
        raise DomainError(f"k_rho must be >= 0, got {k_rho}")
    if k_rho * model.delta_rho > model.rho_max + GRID_TOL:
        raise DomainError(
            f"k_rho*delta_rho = {k_rho * model.delta_rho} exceeds rho_max = {model.rho_max}"
        )
    if not 0 <= k_theta < model.n_theta:
        raise DomainError(
            f"k_theta*delta_theta must lie in [0, 2*pi); k_theta={k_theta} "
            f"outside [0, {model.n_theta})"
        )
    rho = k_rho * model.delta_rho
    theta = k_theta * model.delta_theta
    return np.array([rho * math.cos(theta), rho * math.sin(theta)])


def offset_to_polar(offset, model: PolarErrorModel, nearest: bool = False) -> tuple[int, int]:
    """Recover the grid cell of a displacement.

    The origin maps to ``(0, 0)``. Without ``nearest`` the offset must sit on
    a grid point within ``GRID_TOL``.
    """
    dx, dy = (float(c) for c in offset)
    rho = math.hypot(dx, dy)
    if rho > model.rho_max + GRID_TOL:
        raise DomainError(f"|offset| = {rho} exceeds rho_max = {model.rho_max}")
    k_rho = min(int(round(rho / model.delta_rho)), model.n_rho - 1)
    if k_rho == 0:
        k_theta = 0
    else:
        theta = math.atan2(dy, dx) % (2 * math.pi)
        k_theta = int(round(theta / model.delta_theta)) % model.n_theta
    if not nearest:
        gx, gy = polar_to_offset(k_rho, k_theta, model)
        if math.hypot(dx - gx, dy - gy) > GRID_TOL:
            raise DomainError(
                f"offset ({dx}, {dy}) is not on the (k_rho, k_theta) grid; "
                "pass nearest=True to snap it"
            )
    return k_rho, k_theta


def error_prior(offset, model: PolarErrorModel, nearest: bool = False) -> float:
    """Probability mass of one displacement under the uniform polar model."""
    dx, dy = (float(c) for c in offset)
    if math.hypot(dx, dy) > model.rho_max + GRID_TOL:
        return 0.0
    offset_to_polar((dx, dy), model, nearest=nearest)
    return model.cell_mass


def multipoint_prior(offsets: Sequence, model: PolarErrorModel, nearest: bool = False) -> float:
    """Joint prior of independent point errors."""
    p = 1.0
    for i, off in enumerate(offsets):
        try:
            p *= error_prior(off, model, nearest=nearest)
        except DomainError as exc:
            raise DomainError(f"offset {i}: {exc}") from exc
    return p


def segment_lengths(vertices: np.ndarray) -> np.ndarray:
    return np.hypot(*np.diff(vertices, axis=0).T)


def chunk_polyline(line: Polyline, chunk_len: float = 20.0, parent_id: int = 0) -> list[Chunk]:
    """Split a polyline into consecutive pieces of arc length ``chunk_len``.

    All but the last chunk are exactly ``chunk_len`` long; split points that
    fall inside a segment become new shared vertices.
    """
    if not chunk_len > 0:
        raise DomainError(f"chunk_len must be > 0, got {chunk_len}")
    v = line.vertices
    cum = np.concatenate([[0.0], np.cumsum(segment_lengths(v))])
    total = cum[-1]
    tol = GRID_TOL * max(1.0, total)

    cuts = [0.0]
    k = 1
    while k * chunk_len < total - _MIN_TAIL:
        cuts.append(k * chunk_len)
        k += 1
    cuts.append(total)

    def point_at(s):
        i = int(np.searchsorted(cum, s))
        if i < len(cum) and abs(cum[i] - s) <= tol:
            return i, v[i]
        if i > 0 and abs(cum[i - 1] - s) <= tol:
            return i - 1, v[i - 1]
        t = (s - cum[i - 1]) / (cum[i] - cum[i - 1])
        return None, v[i - 1] + t * (v[i] - v[i - 1])

    chunks = []
    for n, (a, b) in enumerate(zip(cuts[:-1], cuts[1:])):
        ia, pa = point_at(a)
        ib, pb = point_at(b)
        inner = np.nonzero((cum > a + tol) & (cum < b - tol))[0]
        pts = [pa] + [v[i] for i in inner] + [pb]
        verts = np.array(pts, dtype=np.float64)
        chunks.append(
            Chunk(parent_id=parent_id, vertices=verts,
                  arc_length=float(segment_lengths(verts).sum()), index=n)
        )
    return chunks


def chunk_normal(chunk) -> np.ndarray:
    """Unit vector perpendicular (+90 degrees) to the chunk chord."""
    v = np.asarray(chunk.vertices, dtype=np.float64)
    seg = np.diff(v, axis=0)
    lens = np.hypot(seg[:, 0], seg[:, 1])
    if lens.size == 0 or lens.max() == 0.0:
        raise DomainError("degenerate chunk: all vertices coincide")
    chord = v[-1] - v[0]
    norm = math.hypot(chord[0], chord[1])
    if norm <= 1e-12 * lens.sum():
        chord = seg[int(np.argmax(lens))]
        norm = math.hypot(chord[0], chord[1])
    return np.array([-chord[1], chord[0]]) / norm


@dataclass(frozen=True, eq=False)
class CandidateSet:
    """Rigid perpendicular translates of one chunk with their priors."""

    chunk_id: int
    candidates: list
    offsets: np.ndarray
    prior: np.ndarray
    normal: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __len__(self):
        return len(self.candidates)

    @property
    def zero_index(self) -> int:
        return int(np.flatnonzero(self.offsets == 0.0)[0])


def generate_candidates(chunk, n_side: int = 9, step: float = 1.0,
                        model: PolarErrorModel | None = None,
                        chunk_id: int | None = None) -> CandidateSet:
    """Enumerate ``2 * n_side + 1`` shifted copies of ``chunk``."""
    model = model or PolarErrorModel()
    if n_side < 0:
        raise DomainError(f"n_side must be >= 0, got {n_side}")
    if not step > 0:
        raise DomainError(f"step must be > 0, got {step}")
    if n_side * step > model.rho_max + GRID_TOL:
        raise DomainError(
            f"n_side*step = {n_side * step} exceeds rho_max = {model.rho_max}; "
            "candidates would fall outside the error support"
        )
    base = np.asarray(chunk.vertices, dtype=np.float64)
    normal = chunk_normal(chunk)
    idx = np.arange(-n_side, n_side + 1)
    offsets = idx * float(step)
    cands = []
    prior = np.empty(len(idx))
    for j, i in enumerate(idx):
        if i == 0:
            cands.append(Polyline(base.copy()))
        else:
            cands.append(Polyline(base + offsets[j] * normal))
        prior[j] = error_prior(offsets[j] * normal, model, nearest=True)
    prior /= prior.sum()
    if chunk_id is None:
        chunk_id = getattr(chunk, "index", 0)
    return CandidateSet(chunk_id=chunk_id, candidates=cands, offsets=offsets,
                        prior=prior, normal=normal)


def read_polylines(path) -> tuple[list[Polyline], float]:
    """Load ``{"lines": [[[x, y], ...], ...], "resolution_m_per_px": r}``."""
    with open(path) as fh:
        doc = json.load(fh)
    if "lines" not in doc:
        raise DomainError(f"{path}: missing 'lines' key")
    lines = [Polyline(v) for v in doc["lines"]]
    return lines, float(doc.get("resolution_m_per_px", 1.0))


def write_polylines(path, lines: Sequence, resolution: float = 1.0) -> None:
    doc = {
        "lines": [np.asarray(getattr(l, "vertices", l)).tolist() for l in lines],
        "resolution_m_per_px": float(resolution),
    }
    Path(path).write_text(json.dumps(doc))
