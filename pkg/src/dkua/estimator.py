"""Scikit-learn style facade over the lifelong trainer.

``DkuaLifelongReID`` is fitted on a sequence of domains and then acts as a
transformer from image batches to unified embedding vectors, so the model
composes with the usual sklearn pipeline/metric tooling.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import losses  # noqa: F401  (re-exported surface)
from .data import DomainData
from .distribution import DomainStats
from .errors import ConfigError
from .model import DkuaModel
from .trainer import Adam, TrainConfig, prune_optimizer, train_domain


def check_images(x: np.ndarray, channels: int, height: int,
                 width: int) -> np.ndarray:
    """Validate a batch of images: shape B x C x H x W, finite, in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != (channels, height, width):
        raise ConfigError(
            f"expected images of shape (B, {channels}, {height}, {width}), "
            f"got {x.shape}")
    if not np.isfinite(x).all():
        raise ConfigError("images contain non-finite values")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ConfigError("image values must lie in [0, 1]")
    return x


class DkuaLifelongReID(BaseEstimator, TransformerMixin):
    """Lifelong ReID model with the fit/transform estimator contract.

    ``fit`` trains sequentially over a list of :class:`DomainData`;
    ``partial_fit`` appends one more domain to an already-fitted model;
    ``transform`` maps image batches to unified embeddings.
    """

    def __init__(self, seed=0, epochs=15, lr=1e-3, lr_decay=0.1,
                 lr_period=10, p=4, k=4, margin=0.3, temperature=0.1,
                 height=32, width=16, channels=3, patch_size=8,
                 embed_dim=12, depth=2, heads=4, mlp_ratio=2.0,
                 use_dse=True, enable_ka=True, enable_uka=True,
                 enable_dkt=True):
        self.seed = seed
        self.epochs = epochs
        self.lr = lr
        self.lr_decay = lr_decay
        self.lr_period = lr_period
        self.p = p
        self.k = k
        self.margin = margin
        self.temperature = temperature
        self.height = height
        self.width = width
        self.channels = channels
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.depth = depth
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.use_dse = use_dse
        self.enable_ka = enable_ka
        self.enable_uka = enable_uka
        self.enable_dkt = enable_dkt

    def _config(self) -> TrainConfig:
        return TrainConfig(
            seed=self.seed, epochs=self.epochs, lr=self.lr,
            lr_decay=self.lr_decay, lr_period=self.lr_period, p=self.p,
            k=self.k, margin=self.margin, temperature=self.temperature,
            height=self.height, width=self.width, channels=self.channels,
            patch_size=self.patch_size, embed_dim=self.embed_dim,
            depth=self.depth, heads=self.heads, mlp_ratio=self.mlp_ratio,
            use_dse=self.use_dse, enable_ka=self.enable_ka,
            enable_uka=self.enable_uka, enable_dkt=self.enable_dkt)

    def fit(self, domains, y=None):
        """Train over the domain sequence in order."""
        config = self._config()
        seed_seq = np.random.SeedSequence(config.seed)
        init, sample = [np.random.default_rng(s) for s in seed_seq.spawn(2)]
        self.config_ = config
        self.model_ = DkuaModel(config.backbone_config(), init,
                                use_dse=config.use_dse)
        self.stats_ = DomainStats(config.embed_dim)
        self.optimizer_ = Adam()
        self._init_rng = init
        self._data_rng = sample
        self.step_ = 0
        for domain in domains:
            self._fit_one(domain)
        return self

    def partial_fit(self, domain: DomainData):
        if not hasattr(self, "model_"):
            return self.fit([domain])
        self._fit_one(domain)
        return self

    def _fit_one(self, domain: DomainData):
        config = self.config_
        self.model_.grow_domain(domain.class_count, self._init_rng)
        prune_optimizer(self.optimizer_, self.model_)
        if config.use_dse:
            self.stats_.open_domain(domain.class_count)
        self.step_ = train_domain(self.model_, self.stats_, domain, config,
                                  self.optimizer_, self._data_rng, None,
                                  self.step_)
        if config.use_dse:
            self.stats_.finalize_domain()
            self.stats_.unified_update()

    def transform(self, x: np.ndarray) -> np.ndarray:
        """Map images B x C x H x W to unified embedding vectors B x D."""
        if not hasattr(self, "model_"):
            raise NotFittedError("fit the estimator before calling transform")
        x = check_images(x, self.channels, self.height, self.width)
        return self.model_.forward(x).theta.data
