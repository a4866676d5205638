"""Scikit-learn style facade over the planner training and scoring stack."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .metrics import pdms, score_scenario
from .planner import ModelConfig, ade
from .scenarios import ScenarioSample
from .training import OptimizerParams, infer_batch, train


def validate_samples(X, image_shape=None, bev_shape=None):
    """Check X is a non-empty list of scenario samples with uniform rasters."""
    if not isinstance(X, (list, tuple)) or not X:
        raise ValueError("X must be a non-empty list of ScenarioSample objects")
    for i, s in enumerate(X):
        if not isinstance(s, ScenarioSample):
            raise TypeError(f"X[{i}] is {type(s).__name__}, expected ScenarioSample")
    shapes = {(tuple(s.camera.shape), tuple(s.bev.shape)) for s in X}
    if len(shapes) != 1:
        raise ValueError(f"X mixes raster shapes: {sorted(shapes)}")
    cam, bev = next(iter(shapes))
    if image_shape is not None and cam != tuple(image_shape):
        raise ValueError(f"camera rasters are {cam}, expected {tuple(image_shape)}")
    if bev_shape is not None and bev != tuple(bev_shape):
        raise ValueError(f"BEV rasters are {bev}, expected {tuple(bev_shape)}")
    return list(X)


class TrajectoryPlanner(BaseEstimator):
    """End-to-end planner exposed through the fit/predict/score protocol.

    ``fit`` imitates the ground-truth trajectories in the given scenario
    samples; ``predict`` returns one trajectory per sample; ``score``
    reports the mean driving score of the predictions.
    """

    def __init__(
        self,
        d_model=64,
        msc_channels=16,
        stages=4,
        mt_layers=3,
        heads=4,
        state_dim=16,
        query_tokens=1,
        state_rate=0.5,
        fusion_rate=0.1,
        lr=1e-4,
        weight_decay=0.01,
        batch_size=8,
        max_steps=2000,
        stop_ade=0.0,
        seed=0,
    ):
        self.d_model = d_model
        self.msc_channels = msc_channels
        self.stages = stages
        self.mt_layers = mt_layers
        self.heads = heads
        self.state_dim = state_dim
        self.query_tokens = query_tokens
        self.state_rate = state_rate
        self.fusion_rate = fusion_rate
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.stop_ade = stop_ade
        self.seed = seed

    def _model_config(self, samples):
        return ModelConfig(
            image_shape=tuple(samples[0].camera.shape),
            bev_shape=tuple(samples[0].bev.shape),
            d_model=self.d_model,
            msc_channels=self.msc_channels,
            stages=self.stages,
            mt_layers=self.mt_layers,
            heads=self.heads,
            state_dim=self.state_dim,
            query_tokens=self.query_tokens,
            state_rate=self.state_rate,
            fusion_rate=self.fusion_rate,
            seed=self.seed,
        )

    def fit(self, X, y=None):
        samples = validate_samples(X)
        cfg = self._model_config(samples)
        opt = OptimizerParams(
            lr=self.lr,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            max_steps=self.max_steps,
            stop_ade=self.stop_ade,
        )
        ckpt, rows = train(samples, cfg, opt=opt)
        self.checkpoint_ = ckpt
        self.train_log_ = rows
        self.n_steps_ = ckpt.step
        return self

    def predict(self, X):
        check_is_fitted(self, "checkpoint_")
        cfg = self.checkpoint_.config
        samples = validate_samples(X, image_shape=cfg.image_shape, bev_shape=cfg.bev_shape)
        return infer_batch(self.checkpoint_, samples)

    def score(self, X, y=None):
        """Mean driving score of the predicted trajectories over X."""
        plans = self.predict(X)
        subs = [score_scenario(s.log(plan=p)) for s, p in zip(X, plans)]
        return float(np.mean([pdms(s) for s in subs]))

    def mean_displacement_error(self, X):
        plans = self.predict(X)
        return float(np.mean([ade(p, s.gt) for p, s in zip(plans, X)]))
