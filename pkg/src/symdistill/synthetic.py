"""Gaussian-cluster stand-ins for teacher features."""

from __future__ import annotations

import numpy as np

from .featstore import FeatureSet


def cluster_features(
    n_train: int = 600,
    n_eval: int = 200,
    n_classes: int = 10,
    d_t: int = 64,
    n_views: int = 2,
    grid: tuple = (2, 2),
    spread: float = 0.3,
    view_noise: float = 0.05,
    patch_noise: float = 0.3,
    seed: int = 0,
) -> tuple[FeatureSet, FeatureSet]:
    """Balanced clusters around unit-variance random means.

    Global token of a view: sample point plus small view noise. Patch tokens:
    cluster mean plus independent patch noise.
    """
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((n_classes, d_t))
    gh, gw = grid
    n_patch = gh * gw

    def make(n):
        labels = np.arange(n) % n_classes
        rng.shuffle(labels)
        points = means[labels] + spread * rng.standard_normal((n, d_t))
        tokens = np.empty((n, n_views, 1 + n_patch, d_t))
        tokens[:, :, 0] = points[:, None] + view_noise * rng.standard_normal((n, n_views, d_t))
        tokens[:, :, 1:] = means[labels][:, None, None] + patch_noise * rng.standard_normal((n, n_views, n_patch, d_t))
        names = [f"cluster{c}" for c in range(n_classes)]
        return FeatureSet(tokens=tokens.astype(np.float32), grid_h=gh, grid_w=gw,
                          labels=labels, n_classes=n_classes, class_names=names)

    return make(n_train), make(n_eval)
