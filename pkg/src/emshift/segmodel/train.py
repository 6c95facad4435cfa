"""Soft-dice training with plateau learning-rate halving and early stopping."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from ..errors import DomainError, GradientCheckError, TrainingError
from ..raster import values_of
from .model import SegModel

DICE_SMOOTH = 1.0


def dice_coeff(pred, target, smooth: float = DICE_SMOOTH) -> float:
    """Soft dice ``(2 sum(p t) + s) / (sum(p) + sum(t) + s)``."""
    p = np.asarray(values_of(pred), dtype=np.float64)
    t = np.asarray(values_of(target), dtype=np.float64)
    if p.shape != t.shape:
        raise DomainError(f"shape mismatch: pred {p.shape} vs target {t.shape}")
    return float((2.0 * (p * t).sum() + smooth) / (p.sum() + t.sum() + smooth))


def dice_loss_and_grad(p, t, smooth: float = DICE_SMOOTH):
    """Negative dice and its gradient with respect to ``p``."""
    sp = p.sum(dtype=np.float64)
    st = t.sum(dtype=np.float64)
    spt = (p * t).sum(dtype=np.float64)
    num = 2.0 * spt + smooth
    den = sp + st + smooth
    grad = -(2.0 * t * den - num) / (den * den)
    return -num / den, grad.astype(p.dtype)


@dataclass
class TrainSchedule:
    initial_lr: float = 1e-1
    lr_halving_patience: int = 5
    min_lr: float = 1e-5
    early_stop_patience: int = 20
    max_epochs: int = 50
    batch_size: int = 16
    dropout_rate: float = 0.2

    def __post_init__(self):
        if not 0 < self.min_lr <= self.initial_lr:
            raise DomainError(f"need 0 < min_lr <= initial_lr, got {self.min_lr}, {self.initial_lr}")
        if self.lr_halving_patience < 1 or self.early_stop_patience < 1:
            raise DomainError("patiences must be >= 1")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise DomainError("max_epochs and batch_size must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise DomainError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")


class PlateauController:
    """Tracks the validation loss and decides LR halvings and early stopping.

    An epoch improves only if it sets a new strict minimum. After
    ``lr_halving_patience`` consecutive stagnant epochs the rate halves
    (floored at ``min_lr``) and that counter restarts; after
    ``early_stop_patience`` stagnant epochs since the last improvement
    training stops.
    """

    def __init__(self, sched: TrainSchedule):
        self.sched = sched
        self.lr = sched.initial_lr
        self.best = np.inf
        self.best_epoch = 0
        self.epoch = 0
        self._lr_wait = 0
        self._es_wait = 0

    def update(self, val_loss: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        self.epoch += 1
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = self.epoch
            self._lr_wait = 0
            self._es_wait = 0
            improved = True
        else:
            self._lr_wait += 1
            self._es_wait += 1
            improved = False
        self.improved = improved
        if self._es_wait >= self.sched.early_stop_patience:
            return True
        if self._lr_wait >= self.sched.lr_halving_patience:
            self.lr = max(self.lr * 0.5, self.sched.min_lr)
            self._lr_wait = 0
        return self.epoch >= self.sched.max_epochs


@dataclass
class TrainCurve:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)

    def __len__(self):
        return len(self.val_loss)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for i in range(len(self)):
                w.writerow([i + 1, repr(self.train_loss[i]), repr(self.val_loss[i]),
                            repr(self.lr[i])])


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict, grads: dict, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def stack_windows(windows):
    x = np.stack([np.asarray(w.features) for w in windows])
    y = np.stack([np.asarray(w.labels) for w in windows])
    return x, y


def batched_predict(model: SegModel, x, batch_size=64):
    out = [model.forward(x[i:i + batch_size], train=False) for i in range(0, len(x), batch_size)]
    return np.concatenate(out)


def evaluate_loss(model: SegModel, x, y) -> float:
    p = batched_predict(model, x)
    loss, _ = dice_loss_and_grad(p.astype(np.float64), y.astype(np.float64))
    return float(loss)


def train(model: SegModel, train_set, val_set, sched: TrainSchedule, rng,
          log=None) -> tuple[SegModel, TrainCurve]:
    """Mini-batch Adam on the negative dice of each batch.

    The model is updated in place; on return it holds the parameters from the
    epoch with the lowest validation loss.
    """
    if not train_set or not val_set:
        raise DomainError("train and validation sets must be non-empty")
    xt, yt = stack_windows(train_set)
    xv, yv = stack_windows(val_set)
    yt = yt.astype(model.dtype)
    ctl = PlateauController(sched)
    opt = Adam()
    curve = TrainCurve()
    best_state = model.state_dict()
    t0 = time.perf_counter()
    for epoch in range(1, sched.max_epochs + 1):
        lr = ctl.lr
        order = rng.permutation(len(xt))
        losses = []
        for b, start in enumerate(range(0, len(xt), sched.batch_size)):
            idx = order[start:start + sched.batch_size]
            p = model.forward(xt[idx], train=True, rng=rng)
            loss, dp = dice_loss_and_grad(p, yt[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}",
                                    epoch=epoch, batch=b)
            grads = model.backward(dp)
            opt.step(model.get_params(), grads, lr)
            losses.append(loss)
        val = evaluate_loss(model, xv, yv)
        if not np.isfinite(val):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}", epoch=epoch)
        curve.train_loss.append(float(np.mean(losses)))
        curve.val_loss.append(val)
        curve.lr.append(lr)
        curve.wall_time.append(time.perf_counter() - t0)
        stop = ctl.update(val)
        if ctl.improved:
            best_state = model.state_dict()
        if log:
            log(f"epoch {epoch:3d} train {curve.train_loss[-1]:.4f} val {val:.4f} lr {lr:.2e}")
        if stop:
            break
    model.load_state_dict(best_state)
    return model, curve


def _dice_loss_ld(p, t_ld, smooth: float = DICE_SMOOTH):
    p = np.asarray(p, dtype=np.longdouble)
    return -(2.0 * np.sum(p * t_ld) + smooth) / (np.sum(p) + np.sum(t_ld) + smooth)


def gradient_check(model: SegModel, sample, h: float = 1e-4, max_params: int = 10_000,
                   return_details: bool = False):
    """Largest relative gap between analytic and central-difference gradients.

    Runs in float64 with training-mode normalization and dropout disabled.
    The error for one parameter is ``|g_a - g_n| / max(|g_a|, |g_n|, 1e-8)``.

    A probe pair whose perturbation flips a ReLU or changes a max-pool winner
    straddles a point where the loss is not differentiable, so the central
    difference measures the kink rather than the gradient. When only one
    side crosses, the second-order one-sided difference on the smooth side
    is used instead, ``(-3 L(0) + 4 L(h) - L(2h)) / 2h``. When both sides
    cross, the pair is repeated with the step divided by 10 (at most three
    times). Losses are accumulated in extended precision. The number of
    such retries is reported in the details.
    """
    x, y = sample
    x = np.asarray(values_of(x), dtype=np.float64)
    y = np.asarray(values_of(y), dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim == 3:
        x = x[None]
    if y.ndim == 2:
        y = y[None]
    m = model.astype(np.float64)
    if m.n_params > max_params:
        raise DomainError(f"model has {m.n_params} parameters; gradient check allows {max_params}")

    p = m.forward(x, train=True)
    _, dp = dice_loss_and_grad(p, y)
    analytic = {k: v.copy() for k, v in m.backward(dp).items()}
    y_ld = y.astype(np.longdouble)

    def loss_at(flat, i, value, s):
        flat[i] = value
        out = _dice_loss_ld(m.forward(x, train=True, resume=s), y_ld)
        return out, not np.array_equal(m.kink_signature(), base_sig)

    worst, worst_at, retries = 0.0, None, 0
    flat_index = 0
    stage = None
    for name, arr in m.get_params().items():
        s = m.param_stage(name)
        if s != stage:
            # fresh full pass so cached activations upstream of s are unperturbed
            l0 = _dice_loss_ld(m.forward(x, train=True), y_ld)
            base_sig = m.kink_signature()
            stage = s
        ga = analytic[name].ravel()
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            step = h
            for attempt in range(4):
                lp, cp = loss_at(flat, i, orig + step, s)
                lm, cm = loss_at(flat, i, orig - step, s)
                gn = (lp - lm) / (2 * step)
                if cp != cm:
                    sign = -1.0 if cp else 1.0
                    l2, c2 = loss_at(flat, i, orig + 2 * sign * step, s)
                    if not c2:
                        l1 = lm if cp else lp
                        gn = sign * (-3 * l0 + 4 * l1 - l2) / (2 * step)
                        retries += 1
                        break
                flat[i] = orig
                if not (cp or cm) or attempt == 3:
                    break
                retries += 1
                step /= 10.0
                gn = None
            flat[i] = orig
            gn = float(gn)
            if not (np.isfinite(gn) and np.isfinite(ga[i])):
                raise GradientCheckError(f"non-finite gradient for {name}[{i}]",
                                         index=flat_index)
            err = abs(ga[i] - gn) / max(abs(ga[i]), abs(gn), 1e-8)
            if err > worst:
                worst, worst_at = err, (name, i)
            flat_index += 1
    if return_details:
        return worst, {"kink_retries": retries, "worst_param": worst_at,
                       "n_params": flat_index}
    return worst
