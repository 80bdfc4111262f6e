"""scikit-learn style facade over the training pipeline.

``SplatReconstructor`` exposes the whole two-stage optimization as a
fit/predict estimator: ``fit`` consumes degraded views (a dataset directory
or a list of views), ``predict`` renders clean images for cameras, and
``score`` reports mean PSNR against references. Hyperparameters mirror the
training configuration one to one, and ``get_params``/``set_params`` follow
the sklearn contract so the estimator plugs into generic tooling.
"""

from __future__ import annotations

import inspect
from pathlib import Path

import numpy as np

from .gaussians import Camera
from .imaging import psnr
from .trainer import TrainConfig, Trainer, View


class NotFittedError(RuntimeError):
    pass


class SplatReconstructor:
    """Reconstruct a clean Gaussian-splat scene from weather-degraded views.

    Parameters mirror :class:`wxsplat.trainer.TrainConfig`; see the README
    for the full table. ``fit`` leaves the learned state on ``model_``,
    ``log_`` and ``summary_``.
    """

    def __init__(
        self,
        m_init: int = 200,
        m_joint: int = 800,
        z_ref: int = 100,
        k_samples: int = 64,
        r0: float = 3.0,
        lambda_r: float = 0.4,
        lambda_dcp: float = 1.0,
        lambda_tv: float = 0.1,
        dcp_patch: int = 7,
        seed: int = 0,
        grid_resolution: int = 32,
        grid_expansion: float = 2.0,
        init_points: int = 512,
        lr_grid: float = 5e-3,
        lr_airlight: float = 5e-4,
        stage1_scale_lr: float = 2e-3,
        densify_interval: int = 100,
        densify_grad_threshold: float = 2e-4,
        densify_max: int = 20000,
        csm_enabled: bool = True,
        plm_enabled: bool = True,
        ggs_enabled: bool = True,
        ggs_drop: str = "",
    ):
        self.m_init = m_init
        self.m_joint = m_joint
        self.z_ref = z_ref
        self.k_samples = k_samples
        self.r0 = r0
        self.lambda_r = lambda_r
        self.lambda_dcp = lambda_dcp
        self.lambda_tv = lambda_tv
        self.dcp_patch = dcp_patch
        self.seed = seed
        self.grid_resolution = grid_resolution
        self.grid_expansion = grid_expansion
        self.init_points = init_points
        self.lr_grid = lr_grid
        self.lr_airlight = lr_airlight
        self.stage1_scale_lr = stage1_scale_lr
        self.densify_interval = densify_interval
        self.densify_grad_threshold = densify_grad_threshold
        self.densify_max = densify_max
        self.csm_enabled = csm_enabled
        self.plm_enabled = plm_enabled
        self.ggs_enabled = ggs_enabled
        self.ggs_drop = ggs_drop

    # -- sklearn plumbing ------------------------------------------------------

    @classmethod
    def _param_names(cls) -> list[str]:
        sig = inspect.signature(cls.__init__)
        return [p for p in sig.parameters if p != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params) -> "SplatReconstructor":
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ValueError(f"invalid parameter {key!r} for SplatReconstructor")
            setattr(self, key, value)
        return self

    def _config(self) -> TrainConfig:
        return TrainConfig(**{k: v for k, v in self.get_params().items()})

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this SplatReconstructor is not fitted yet; call fit first")

    # -- estimator API -----------------------------------------------------------

    @staticmethod
    def _as_views(x) -> list[View]:
        if isinstance(x, (str, Path)):
            from .weathergen import load_dataset

            return load_dataset(x).views
        if hasattr(x, "views"):
            return list(x.views)
        views = list(x)
        if not views or not isinstance(views[0], View):
            raise ValueError("fit expects a dataset path, a Dataset, or a list of View objects")
        return views

    def fit(self, X, y=None) -> "SplatReconstructor":
        """Optimize the scene against degraded views; ``y`` is unused."""
        views = self._as_views(X)
        trainer = Trainer(views, self._config())
        self.model_ = trainer.run()
        self.log_ = list(trainer.log_rows)
        self.summary_ = dict(trainer.summary)
        self.n_iter_ = trainer.iteration
        return self

    def predict(self, X) -> list[np.ndarray]:
        """Render clean images for cameras (or the cameras of views/datasets)."""
        self._check_fitted()
        if isinstance(X, (str, Path)) or hasattr(X, "views"):
            cams = [v.cam for v in self._as_views(X)]
        else:
            items = list(X)
            cams = [it.cam if isinstance(it, View) else it for it in items]
            for c in cams:
                if not isinstance(c, Camera):
                    raise ValueError("predict expects cameras, views, or a dataset")
        return [self.model_.render_clean(c) for c in cams]

    def score(self, X, y) -> float:
        """Mean PSNR (dB) of clean renders against reference images."""
        renders = self.predict(X)
        refs = list(y)
        if len(refs) != len(renders):
            raise ValueError(f"got {len(renders)} renders but {len(refs)} references")
        return float(np.mean([psnr(np.clip(r, 0.0, 1.0), ref) for r, ref in zip(renders, refs)]))
