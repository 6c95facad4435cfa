"""Grid labels from polylines, training windows, augmentation and grid I/O.

Pixel ``(r, c)`` has its center at ``x = c + 0.5, y = r + 0.5`` in pixel
coordinates. Feature arrays are channel-last ``(H, W, C)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CapacityError, DomainError


@dataclass(eq=False)
class FeatureGrid:
    values: np.ndarray
    resolution: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or min(v.shape) < 1:
            raise DomainError(f"feature grid must be (H, W, C) with positive dims, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DomainError("feature values must be finite")
        self.values = v

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]


@dataclass(eq=False)
class LabelGrid:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise DomainError(f"label grid must be 2-D, got {v.shape}")
        if not np.all((v == 0) | (v == 1)):
            raise DomainError("label values must be exactly 0 or 1")
        self.values = v.astype(np.uint8, copy=False)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


def values_of(x) -> np.ndarray:
    return np.asarray(getattr(x, "values", x))


def _segment_hits(ax, ay, bx, by, px, py, r2):
    # the per-pixel predicate; rasterize_buffer must agree with it exactly
    abx = bx - ax
    aby = by - ay
    den = abx * abx + aby * aby
    if den > 0.0:
        t = ((px - ax) * abx + (py - ay) * aby) / den
        t = np.clip(t, 0.0, 1.0)
    else:
        t = np.zeros_like(px)
    qx = ax + t * abx
    qy = ay + t * aby
    dx = px - qx
    dy = py - qy
    return dx * dx + dy * dy <= r2


def buffer_pixels(line, buffer_px: float, height: int, width: int) -> np.ndarray:
    """Flat indices of pixels whose centers are within ``buffer_px`` of ``line``."""
    v = np.asarray(getattr(line, "vertices", line), dtype=np.float64)
    r2 = buffer_px * buffer_px
    hits = []
    for (ax, ay), (bx, by) in zip(v[:-1], v[1:]):
        c0 = max(int(np.floor(min(ax, bx) - buffer_px - 0.5)), 0)
        c1 = min(int(np.ceil(max(ax, bx) + buffer_px - 0.5)), width - 1)
        r0 = max(int(np.floor(min(ay, by) - buffer_px - 0.5)), 0)
        r1 = min(int(np.ceil(max(ay, by) + buffer_px - 0.5)), height - 1)
        if c0 > c1 or r0 > r1:
            continue
        rr, cc = np.mgrid[r0:r1 + 1, c0:c1 + 1]
        py = rr + 0.5
        px = cc + 0.5
        m = _segment_hits(ax, ay, bx, by, px, py, r2)
        hits.append((rr[m] * width + cc[m]).ravel())
    if not hits:
        return np.zeros(0, dtype=np.int64)
    return np.unique(np.concatenate(hits))


def rasterize_buffer(lines, buffer: float = 2.0, height: int = 0, width: int = 0,
                     resolution: float = 1.0) -> LabelGrid:
    """Mark every pixel whose center lies within ``buffer`` meters of a line."""
    if height < 1 or width < 1:
        raise DomainError(f"grid dims must be positive, got {height}x{width}")
    if buffer < 0:
        raise DomainError(f"buffer must be >= 0, got {buffer}")
    out = np.zeros(height * width, dtype=np.uint8)
    buf_px = buffer / resolution
    for line in lines:
        out[buffer_pixels(line, buf_px, height, width)] = 1
    return LabelGrid(out.reshape(height, width))


@dataclass(eq=False)
class Window:
    origin: tuple
    size: int
    features: np.ndarray
    labels: np.ndarray


def _overlaps(a, b, size):
    return abs(a[0] - b[0]) < size and abs(a[1] - b[1]) < size


def sample_origins(size: int, count: int, region, rng, exclude=(), max_rounds: int = 200,
                   tries_per_window: int = 200) -> list[tuple[int, int]]:
    """Non-overlapping square window origins placed uniformly inside ``region``.

    ``region`` is ``(row0, col0, height, width)``. A round places windows one
    by one; a round that gets stuck is discarded and restarted.
    """
    r0, c0, rh, rw = region
    if count < 0:
        raise DomainError(f"count must be >= 0, got {count}")
    if count == 0:
        return []
    if size < 1 or size > rh or size > rw:
        raise DomainError(f"window size {size} does not fit region {rh}x{rw}")
    best = 0
    for _ in range(max_rounds):
        placed = []
        for _ in range(count):
            for _ in range(tries_per_window):
                o = (int(rng.integers(r0, r0 + rh - size + 1)),
                     int(rng.integers(c0, c0 + rw - size + 1)))
                if not any(_overlaps(o, p, size) for p in placed) and \
                        not any(_overlaps(o, p, size) for p in exclude):
                    placed.append(o)
                    break
            else:
                break
        if len(placed) == count:
            return placed
        best = max(best, len(placed))
    raise CapacityError(
        f"could only place {best} of {count} non-overlapping {size}px windows", achieved=best
    )


def cut_windows(features, labels, origins, size: int) -> list[Window]:
    fv = values_of(features)
    lv = values_of(labels)
    out = []
    for r, c in origins:
        if r < 0 or c < 0 or r + size > fv.shape[0] or c + size > fv.shape[1]:
            raise DomainError(f"window at {(r, c)} of size {size} leaves the grid")
        out.append(Window((r, c), size, fv[r:r + size, c:c + size], lv[r:r + size, c:c + size]))
    return out


def extract_windows(grid_pair, size: int, count: int, region=None, rng=None) -> list[Window]:
    """Randomly place ``count`` non-overlapping windows and return views."""
    features, labels = grid_pair
    fv = values_of(features)
    if region is None:
        region = (0, 0, fv.shape[0], fv.shape[1])
    rng = rng if rng is not None else np.random.default_rng()
    origins = sample_origins(size, count, region, rng)
    return cut_windows(features, labels, origins, size)


def tile_origins(size: int, region) -> list[tuple[int, int]]:
    """Regular non-overlapping tiling of ``region``; partial tiles dropped."""
    r0, c0, rh, rw = region
    return [(r0 + i * size, c0 + j * size)
            for i in range(rh // size) for j in range(rw // size)]


def augment_window(w: Window) -> list[Window]:
    """Original, horizontal flip, vertical flip and 90-degree rotation."""
    f, l = w.features, w.labels
    if f.shape[0] != f.shape[1] or l.shape[0] != l.shape[1]:
        raise DomainError(f"augmentation needs a square window, got {l.shape}")
    pairs = [
        (f, l),
        (f[:, ::-1], l[:, ::-1]),
        (f[::-1, :], l[::-1, :]),
        (np.rot90(f, 1, axes=(0, 1)), np.rot90(l, 1, axes=(0, 1))),
    ]
    return [Window(w.origin, w.size, np.ascontiguousarray(a), np.ascontiguousarray(b))
            for a, b in pairs]


def augment_all(windows) -> list[Window]:
    return [a for w in windows for a in augment_window(w)]


def write_grid(path, values) -> None:
    """GRID1: ASCII header then little-endian float32, row-major, channel-last."""
    v = np.asarray(values_of(values))
    if v.ndim == 2:
        v = v[:, :, None]
    h, w, c = v.shape
    with open(path, "wb") as fh:
        fh.write(f"GRID1 {h} {w} {c}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def read_grid(path) -> np.ndarray:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    header = data[:nl].decode("ascii").split() if nl >= 0 else []
    if len(header) != 4 or header[0] != "GRID1":
        raise DomainError(f"{path}: not a GRID1 file")
    h, w, c = (int(t) for t in header[1:])
    body = np.frombuffer(data, dtype="<f4", offset=nl + 1)
    if body.size != h * w * c:
        raise DomainError(f"{path}: expected {h * w * c} floats, found {body.size}")
    return body.reshape(h, w, c).astype(np.float32)


def write_pgm(path, image, lo=None, hi=None) -> None:
    """Binary graymap (P5) of a 2-D array, linearly scaled to 0..255."""
    a = np.asarray(image, dtype=np.float64)
    if a.ndim != 2:
        raise DomainError(f"PGM export needs a 2-D array, got {a.shape}")
    lo = a.min() if lo is None else lo
    hi = a.max() if hi is None else hi
    span = hi - lo if hi > lo else 1.0
    g = np.clip(np.round((a - lo) / span * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii"))
        fh.write(g.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise DomainError(f"{path}: not a binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    # exactly one whitespace byte separates the header from the raster
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos + 1).reshape(h, w)
