"""Transport cost, mode pairing and energy-distance metrics for 2-D edits."""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist

from .gmm import GaussianMixture, sample

_BLOCK = 2048


def transport_cost(src, edited) -> float:
    """Mean squared displacement between paired rows."""
    src = np.asarray(src, dtype=np.float64)
    edited = np.asarray(edited, dtype=np.float64)
    if src.shape != edited.shape:
        raise ValueError(f"shape mismatch: {src.shape} vs {edited.shape}")
    if src.shape[0] == 0:
        return 0.0
    return float(np.mean(np.sum((edited - src) ** 2, axis=1)))


def nearest_mode(points, modes) -> np.ndarray:
    d2 = np.sum((np.asarray(points)[:, None, :] - np.asarray(modes)[None, :, :]) ** 2, axis=-1)
    return np.argmin(d2, axis=1)


def expected_targets(src_modes, target_modes) -> np.ndarray:
    """For each source mode, the index of its nearest target mode."""
    return nearest_mode(src_modes, target_modes)


def pairing_accuracy(edited, src_labels, src_modes, target_modes) -> float:
    """Fraction of rows landing at the target mode nearest to their source mode."""
    edited = np.asarray(edited, dtype=np.float64)
    if edited.shape[0] == 0:
        raise ValueError("pairing accuracy of an empty batch is undefined")
    want = expected_targets(src_modes, target_modes)[np.asarray(src_labels)]
    return float(np.mean(nearest_mode(edited, target_modes) == want))


def _mean_pairwise(a, b, exclude_diagonal=False) -> float:
    total = 0.0
    for lo in range(0, a.shape[0], _BLOCK):
        total += float(cdist(a[lo:lo + _BLOCK], b).sum())
    n, m = a.shape[0], b.shape[0]
    return total / (n * (n - 1)) if exclude_diagonal else total / (n * m)


def energy_distance(a, b) -> float:
    """``2 E|x - y| - E|x - x'| - E|y - y'|`` with unbiased within-sample terms."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("energy distance needs at least two points per sample")
    if a.shape[1] != b.shape[1]:
        raise ValueError("samples have different dimensions")
    return (2.0 * _mean_pairwise(a, b)
            - _mean_pairwise(a, a, exclude_diagonal=True)
            - _mean_pairwise(b, b, exclude_diagonal=True))


def calibration_null(gmm: GaussianMixture, n: int, resamples: int = 200, seed: int = 0,
                     n_other: int | None = None) -> np.ndarray:
    """Energy distances between independent same-distribution sample pairs."""
    n_other = n if n_other is None else n_other
    return np.array([
        energy_distance(sample(gmm, n, seed, stream=f"calibration/{r}/a"),
                        sample(gmm, n_other, seed, stream=f"calibration/{r}/b"))
        for r in range(resamples)
    ])


def calibration_threshold(gmm, n, resamples=200, quantile=99.0, seed=0, n_other=None) -> float:
    return float(np.percentile(calibration_null(gmm, n, resamples, seed, n_other), quantile))
