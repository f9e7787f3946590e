"""Distribution-based knowledge transfer: streaming per-domain covariance
statistics, the class-count-weighted running unification of covariances,
and the Gaussian-KL loss that keeps the current batch distribution near
the unified history."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .errors import ConfigError, InsufficientSamplesError, ProtocolError
from .numerics import Tensor


class DomainStats:
    """Per-domain covariance statistics with a single-pass accumulator.

    The current domain streams batches through ``accumulate``; the merge
    follows the pairwise-update form of Welford's algorithm extended to
    full covariance (count, running mean, centered outer-product sum), so
    ``finalize_domain`` yields the same unbiased covariance as stacking
    every row first.
    """

    def __init__(self, dim: int):
        self.dim = dim
        self.sigmas: list[np.ndarray] = []
        self.class_counts: list[int] = []
        self.sigma_cum: np.ndarray | None = None
        self._open = False
        self._current_classes = 0
        self._n = 0
        self._mean = np.zeros(dim)
        self._m2 = np.zeros((dim, dim))

    # ----------------------------------------------------------------- state

    @property
    def completed(self) -> int:
        return len(self.sigmas)

    @property
    def cum_classes(self) -> int:
        return sum(self.class_counts)

    @property
    def current_classes(self) -> int:
        return self._current_classes

    def open_domain(self, class_count: int):
        if self._open:
            raise ProtocolError("previous domain not finalized")
        if class_count < 1:
            raise ConfigError("class_count must be >= 1")
        self._open = True
        self._current_classes = class_count
        self._n = 0
        self._mean = np.zeros(self.dim)
        self._m2 = np.zeros((self.dim, self.dim))

    # ------------------------------------------------------------ accumulation

    def accumulate(self, rows: np.ndarray):
        rows = np.asarray(rows, dtype=np.float64)
        if not self._open:
            raise ProtocolError("accumulate outside an open domain")
        if rows.ndim != 2 or rows.shape[1] != self.dim:
            raise ConfigError(f"expected rows of width {self.dim}")
        bn = rows.shape[0]
        if bn == 0:
            return
        bmean = rows.mean(axis=0)
        bc = rows - bmean
        bm2 = bc.T @ bc
        if self._n == 0:
            self._n, self._mean, self._m2 = bn, bmean, bm2
            return
        tot = self._n + bn
        delta = bmean - self._mean
        self._m2 = self._m2 + bm2 + np.outer(delta, delta) * (self._n * bn / tot)
        self._mean = self._mean + delta * (bn / tot)
        self._n = tot

    def finalize_domain(self, class_count: int | None = None) -> np.ndarray:
        """Store the domain covariance and class count; close the domain."""
        if not self._open:
            raise ProtocolError("no open domain to finalize")
        if self._n < 2:
            raise InsufficientSamplesError(
                "need >= 2 accumulated instances to finalize")
        sigma = self._m2 / (self._n - 1)
        sigma = 0.5 * (sigma + sigma.T)
        self.sigmas.append(sigma)
        self.class_counts.append(int(class_count if class_count is not None
                                     else self._current_classes))
        self._open = False
        self._current_classes = 0
        return sigma

    def unified_update(self) -> np.ndarray:
        """Fold the latest domain covariance into the running unified one
        via the class-count-weighted recurrence."""
        if not self.sigmas:
            raise ConfigError("no finalized domains")
        if self.cum_classes <= 0:
            raise ConfigError("zero cumulative class count")
        if len(self.sigmas) == 1:
            self.sigma_cum = self.sigmas[0].copy()
        else:
            c_prev = sum(self.class_counts[:-1])
            c_tot = self.cum_classes
            self.sigma_cum = (self.sigma_cum * (c_prev / c_tot)
                              + self.sigmas[-1] * ((c_tot - c_prev) / c_tot))
        return self.sigma_cum

    # ----------------------------------------------------------------- losses

    def dkt_loss(self, sigma_batch: Tensor) -> Tensor:
        """Gaussian KL from the projected unified covariance to the current
        batch covariance.

        The projected unified covariance folds a gradient-detached copy of
        the batch covariance into the stored history, so gradients reach
        the loss only through the second KL argument. Zero on the first
        domain (no history).
        """
        if self.completed == 0:
            return Tensor(0.0)
        sigma_hat = self.projected_unified(sigma_batch.data)
        return nx.gaussian_kl(Tensor(sigma_hat), sigma_batch)

    def projected_unified(self, sigma_current: np.ndarray) -> np.ndarray:
        """Class-count-weighted fold of a (detached) current-domain
        covariance into the stored history."""
        if not self._open:
            raise ProtocolError("projection requires an open domain")
        c_prev = self.cum_classes
        c_tot = c_prev + self._current_classes
        return (self.sigma_cum * (c_prev / c_tot)
                + sigma_current * ((c_tot - c_prev) / c_tot))

    # ------------------------------------------------------------ persistence

    def state(self) -> dict:
        return {
            "dim": self.dim,
            "sigmas": [s for s in self.sigmas],
            "class_counts": list(self.class_counts),
            "sigma_cum": self.sigma_cum,
        }

    @classmethod
    def from_state(cls, state: dict) -> "DomainStats":
        stats = cls(int(state["dim"]))
        stats.sigmas = [np.asarray(s, dtype=np.float64) for s in state["sigmas"]]
        stats.class_counts = [int(c) for c in state["class_counts"]]
        cum = state["sigma_cum"]
        stats.sigma_cum = None if cum is None else np.asarray(cum, dtype=np.float64)
        return stats


def unified_closed_form(sigmas: list, class_counts: list) -> np.ndarray:
    """Closed-form class-count-weighted average; oracle for the recurrence."""
    total = sum(class_counts)
    out = np.zeros_like(sigmas[0])
    for sigma, count in zip(sigmas, class_counts):
        out = out + sigma * (count / total)
    return out
