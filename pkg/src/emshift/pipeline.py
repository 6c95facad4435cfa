"""Scene-level glue: pre-training, EM and held-out evaluation from one config."""

from __future__ import annotations

import numpy as np

from .config import RunConfig
from .em_trainer import _fit, _label_grid, _prepare, em_run
from .errors import DomainError
from .evalkit import evaluate_prob_map
from .raster import rasterize_buffer, tile_origins
from .segmodel import predict
from .synth import Scene

# stream ids for np.random.default_rng([seed, stream])
_WINDOW_STREAM = 0
_EM_STREAM = 1
_PRETRAIN_STREAM = 2


def train_rng(cfg: RunConfig, stream: int = _EM_STREAM):
    return np.random.default_rng([cfg.seed, stream])


def _shape(scene: Scene):
    return scene.features.values.shape[:2]


def _model_spec(scene: Scene, cfg: RunConfig):
    return cfg.model_spec(in_channels=scene.features.values.shape[2])


def test_origins(cfg: RunConfig, shape):
    region = cfg.test_region(shape)
    if region[2] < cfg.window_size or region[3] < cfg.window_size:
        raise DomainError(f"test region {region[2]}x{region[3]} holds no "
                          f"{cfg.window_size}px window")
    return tile_origins(cfg.window_size, region)


def pretrain(scene: Scene, cfg: RunConfig, log=None):
    """Train on the rasterized noisy labels only."""
    shape = _shape(scene)
    em = cfg.em_config(shape)
    rng = train_rng(cfg, _PRETRAIN_STREAM)
    prep = _prepare(shape, scene.noisy, em, train_rng(cfg, _WINDOW_STREAM))
    labels = _label_grid(scene.noisy, shape, em)
    return _fit(scene.features, labels, prep, _model_spec(scene, cfg), cfg.schedule(), em, rng,
                log)


def run_em(scene: Scene, cfg: RunConfig, log=None, pretrained=None, on_iteration=None,
           use_truth: bool = True):
    return em_run(scene.features, scene.noisy, _model_spec(scene, cfg), cfg.schedule(),
                  cfg.em_config(_shape(scene)), train_rng(cfg),
                  truth=scene.truth if use_truth else None, pretrained=pretrained,
                  on_iteration=on_iteration, log=log,
                  window_rng=train_rng(cfg, _WINDOW_STREAM))


def truth_prob(scene: Scene, cfg: RunConfig) -> np.ndarray:
    """Probability map of a perfect predictor: the buffered truth raster."""
    h, w = _shape(scene)
    return rasterize_buffer(scene.truth, cfg.buffer, h, w, cfg.resolution).values.astype(float)


def evaluate_prob(prob, scene: Scene, cfg: RunConfig):
    origins = test_origins(cfg, prob.shape)
    return evaluate_prob_map(prob, scene.truth, origins, cfg.window_size, cfg.buffer,
                             cfg.resolution)


def evaluate_model(model, scene: Scene, cfg: RunConfig):
    """Confusion counts and P/R/F1 on the upper-half test tiles against truth."""
    return evaluate_prob(predict(model, scene.features), scene, cfg)
