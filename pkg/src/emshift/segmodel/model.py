"""Pixel classifiers producing a stream-probability map, plus checkpoint I/O."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import DomainError
from ..raster import values_of
from .layers import (
    ConvBlock,
    Conv2d,
    maxpool2_backward,
    maxpool2_forward,
    sigmoid,
    upsample2_backward,
    upsample2_forward,
)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; round-trips through ``str``/``parse``."""

    kind: str = "unet"
    in_channels: int = 3
    widths: tuple = (6, 12, 24)
    dropout: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("unet", "linear"):
            raise DomainError(f"unknown model kind {self.kind!r}")
        if self.in_channels < 1:
            raise DomainError("in_channels must be >= 1")
        if self.kind == "unet" and (len(self.widths) != 3 or min(self.widths) < 1):
            raise DomainError(f"unet needs three positive widths, got {self.widths}")
        if not 0.0 <= self.dropout < 1.0:
            raise DomainError(f"dropout must lie in [0, 1), got {self.dropout}")

    def __str__(self):
        if self.kind == "linear":
            return f"linear in={self.in_channels} seed={self.seed}"
        w = ",".join(str(x) for x in self.widths)
        return f"unet in={self.in_channels} widths={w} dropout={self.dropout!r} seed={self.seed}"

    @classmethod
    def parse(cls, text: str) -> "ModelSpec":
        parts = text.split()
        if not parts:
            raise DomainError("empty layer spec")
        kw = {"kind": parts[0]}
        for tok in parts[1:]:
            key, _, val = tok.partition("=")
            if key == "in":
                kw["in_channels"] = int(val)
            elif key == "widths":
                kw["widths"] = tuple(int(v) for v in val.split(","))
            elif key == "dropout":
                kw["dropout"] = float(val)
            elif key == "seed":
                kw["seed"] = int(val)
            else:
                raise DomainError(f"unknown layer spec field {key!r}")
        return cls(**kw)


class SegModel:
    """Base class: parameters are exposed as an ordered name -> array mapping."""

    spec: ModelSpec

    def __init__(self, spec: ModelSpec, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)

    # subclasses define _modules (ordered) and _forward/_backward

    def _entries(self, kind):
        out = []
        for m in self._modules:
            out.extend(getattr(m, kind)() if hasattr(m, kind) else [])
        return out

    def param_names(self):
        return [n for n, _, _ in self._entries("params")]

    def get_params(self) -> dict:
        return {n: getattr(o, a) for n, o, a in self._entries("params")}

    def set_params(self, values: dict):
        for n, o, a in self._entries("params"):
            setattr(o, a, np.array(values[n], dtype=self.dtype))

    def state(self) -> list:
        """Parameters and normalization statistics in declaration order."""
        out = []
        for m in self._modules:
            entries = list(m.params())
            if hasattr(m, "buffers"):
                entries += m.buffers()
            out.extend(entries)
        return out

    def state_dict(self) -> dict:
        return {n: getattr(o, a).copy() for n, o, a in self.state()}

    def load_state_dict(self, d: dict):
        for n, o, a in self.state():
            setattr(o, a, np.array(d[n], dtype=self.dtype))

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.get_params().values()))

    def zero_grads(self):
        self.grads = {n: np.zeros_like(v) for n, v in self.get_params().items()}

    def astype(self, dtype) -> "SegModel":
        m = copy.deepcopy(self)
        m.dtype = np.dtype(dtype)
        m.load_state_dict(self.state_dict())
        return m

    def forward(self, x, train=False, rng=None, resume=None):
        """``x`` is ``(N, H, W, C)`` with H, W divisible by ``self.multiple``.

        ``resume`` (a stage index from ``param_stage``) recomputes only the
        stages from that one on, reusing the previous full pass; it exists for
        finite-difference probes of a single parameter.
        """
        if x.shape[-1] != self.spec.in_channels:
            raise DomainError(
                f"input has {x.shape[-1]} channels, model expects {self.spec.in_channels}"
            )
        z = self._forward(np.asarray(x, dtype=self.dtype), train, rng, resume)
        self._p = sigmoid(z)
        return self._p

    def backward(self, dp):
        """Backpropagate ``dLoss/dp`` through the sigmoid and the network."""
        self.zero_grads()
        p = self._p
        self._backward((dp * p * (1.0 - p)).astype(self.dtype))
        return self.grads

    def logits(self, x):
        return self._forward(np.asarray(x, dtype=self.dtype), False, None)

    def kink_signature(self) -> np.ndarray:
        """Which side of every non-differentiable point the last forward took."""
        return np.zeros(0, dtype=np.int64)

    def param_stage(self, name) -> int:
        return 0


class LinearSegModel(SegModel):
    """A single 1x1 convolution followed by a sigmoid."""

    multiple = 1

    def __init__(self, spec: ModelSpec, dtype=np.float32):
        super().__init__(spec, dtype)
        rng = np.random.default_rng(spec.seed)
        self.head = Conv2d("head", spec.in_channels, 1, 1, rng, self.dtype)
        self._modules = [self.head]

    def _forward(self, x, train, rng, resume=None):
        return self.head.forward(x)[..., 0]

    def _backward(self, dz):
        self.head.backward(dz[..., None], self.grads)


class UNetSegModel(SegModel):
    """Two-level encoder-decoder with skip connections.

    Encoder blocks at full and half resolution, a bottleneck at quarter
    resolution, nearest-neighbour upsampling with channel concatenation on
    the way back up, and a 1x1 sigmoid head.
    """

    multiple = 4

    def __init__(self, spec: ModelSpec, dtype=np.float32):
        super().__init__(spec, dtype)
        rng = np.random.default_rng(spec.seed)
        w1, w2, w3 = spec.widths
        c, dr, dt = spec.in_channels, spec.dropout, self.dtype
        self.enc1 = ConvBlock("enc1", c, w1, rng, dt, dr)
        self.enc2 = ConvBlock("enc2", w1, w2, rng, dt, dr)
        self.bott = ConvBlock("bott", w2, w3, rng, dt, dr)
        self.dec2 = ConvBlock("dec2", w3 + w2, w2, rng, dt, dr)
        self.dec1 = ConvBlock("dec1", w2 + w1, w1, rng, dt, dr)
        self.head = Conv2d("head", w1, 1, 1, rng, dt)
        self._modules = [self.enc1, self.enc2, self.bott, self.dec2, self.dec1, self.head]

    _stages = {"enc1": 0, "enc2": 1, "bott": 2, "dec2": 3, "dec1": 4, "head": 5}

    def param_stage(self, name):
        return self._stages[name.split(".")[0]]

    def _forward(self, x, train, rng, resume=None):
        # resume=s reuses activations of the last full pass for stages < s
        s = resume or 0
        a = dict(self._base) if s else {}
        if s <= 0:
            a["e1"] = self.enc1.forward(x, train, rng)
            a["p1"], self._pc1 = maxpool2_forward(a["e1"])
        if s <= 1:
            a["e2"] = self.enc2.forward(a["p1"], train, rng)
            a["p2"], self._pc2 = maxpool2_forward(a["e2"])
        if s <= 2:
            a["b"] = self.bott.forward(a["p2"], train, rng)
        if s <= 3:
            cat = np.concatenate([upsample2_forward(a["b"]), a["e2"]], axis=-1)
            a["d2"] = self.dec2.forward(cat, train, rng)
        if s <= 4:
            cat = np.concatenate([upsample2_forward(a["d2"]), a["e1"]], axis=-1)
            a["d1"] = self.dec1.forward(cat, train, rng)
        if not s:
            self._base = a
        return self.head.forward(a["d1"])[..., 0]

    def _backward(self, dz):
        w1, w2, w3 = self.spec.widths
        g = self.grads
        dd1 = self.head.backward(dz[..., None], g)
        dcat1 = self.dec1.backward(dd1, g)
        dd2 = upsample2_backward(dcat1[..., :w2])
        de1 = dcat1[..., w2:]
        dcat2 = self.dec2.backward(dd2, g)
        db = upsample2_backward(dcat2[..., :w3])
        de2 = dcat2[..., w3:]
        dp2 = self.bott.backward(db, g)
        de2 = de2 + maxpool2_backward(dp2, self._pc2)
        dp1 = self.enc2.backward(de2, g)
        de1 = de1 + maxpool2_backward(dp1, self._pc1)
        self.enc1.backward(de1, g)

    def kink_signature(self):
        parts = [b._active.ravel() for b in
                 (self.enc1, self.enc2, self.bott, self.dec2, self.dec1)]
        parts += [self._pc1[0].ravel(), self._pc2[0].ravel()]
        return np.concatenate([p.astype(np.int64) for p in parts])


def build_model(spec: ModelSpec | str, dtype=np.float32) -> SegModel:
    if isinstance(spec, str):
        spec = ModelSpec.parse(spec)
    cls = {"unet": UNetSegModel, "linear": LinearSegModel}[spec.kind]
    return cls(spec, dtype)


def predict(model: SegModel, x) -> np.ndarray:
    """Per-pixel stream probability in the open interval (0, 1).

    Inference mode: dropout off, stored normalization statistics. Inputs whose
    size is not a multiple of the model's pooling factor are reflect-padded.
    """
    v = values_of(x)
    if v.ndim == 2:
        v = v[:, :, None]
    if v.shape[-1] != model.spec.in_channels:
        raise DomainError(
            f"input has {v.shape[-1]} channels, model expects {model.spec.in_channels}"
        )
    h, w = v.shape[:2]
    m = model.multiple
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        v = np.pad(v, ((0, ph), (0, pw), (0, 0)), mode="reflect" if min(h, w) > 1 else "edge")
    z = model.logits(v[None])[0, :h, :w].astype(np.float64)
    return 1.0 / (1.0 + np.exp(-np.clip(z, -30.0, 30.0)))


def save_model(path, model: SegModel) -> None:
    """SEGM1: ASCII header with the layer spec, then float32 LE values."""
    with open(path, "wb") as fh:
        fh.write(f"SEGM1 {model.spec}\n".encode("ascii"))
        for _, o, a in model.state():
            fh.write(np.ascontiguousarray(getattr(o, a), dtype="<f4").tobytes())


def load_model(path, dtype=np.float32) -> SegModel:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    header = data[:nl].decode("ascii")
    if not header.startswith("SEGM1 "):
        raise DomainError(f"{path}: not a SEGM1 checkpoint")
    model = build_model(header[len("SEGM1 "):], dtype)
    body = np.frombuffer(data, dtype="<f4", offset=nl + 1)
    expected = sum(getattr(o, a).size for _, o, a in model.state())
    if body.size != expected:
        raise DomainError(f"{path}: expected {expected} values, found {body.size}")
    pos = 0
    for _, o, a in model.state():
        cur = getattr(o, a)
        setattr(o, a, body[pos:pos + cur.size].reshape(cur.shape).astype(dtype))
        pos += cur.size
    return model
