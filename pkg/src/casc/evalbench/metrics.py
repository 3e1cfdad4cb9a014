"""Image-quality metrics: pixel distortion, learned-perceptual distance, and
the feature-space Gaussian distance between image sets."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import linalg

from casc.errors import ArgumentError, NumericError
from casc.features import PerceptualFeatureNet, default_pooled_net, perceptual_distance, pooled_features

PSNR_CAP_DB = 100.0


@dataclass(frozen=True)
class MetricsRecord:
    system: str
    cr: Fraction
    snr_db: float
    psnr_db: float
    lpips: float
    fid: float
    n_images: int
    seed: int
    ckpt_id: str = ""


def psnr(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB over the whole batch; inputs in
    [-1,1] are rescaled to unit range (MAX=1). Capped at 100 dB."""
    x = np.asarray(x)
    x_hat = np.asarray(x_hat)
    if x.shape != x_hat.shape:
        raise ArgumentError(f"image batches differ in shape: {x.shape} vs {x_hat.shape}")
    a = (x.astype(np.float64) + 1.0) / 2.0
    b = (x_hat.astype(np.float64) + 1.0) / 2.0
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def lpips(x: np.ndarray, x_hat: np.ndarray, feature_net: PerceptualFeatureNet | None = None,
          reduce: str = "mean"):
    """Learned-perceptual distance (lower is better); see
    casc.features.perceptual_distance for the aggregation."""
    out = perceptual_distance(x, x_hat, feature_net, reduce=reduce)
    return float(np.asarray(out)) if reduce == "mean" else np.asarray(out)


def fid(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature sets:
    ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2})."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ArgumentError(f"feature matrices must be (N,D),(M,D); got {a.shape}, {b.shape}")
    if min(a.shape[0], b.shape[0]) < 2:
        raise ArgumentError("need at least two feature rows per set")
    dim = a.shape[1]
    if min(a.shape[0], b.shape[0]) <= dim:
        warnings.warn(
            f"feature sets of size {a.shape[0]}/{b.shape[0]} do not exceed the feature "
            f"dimension {dim}; the covariance estimate is rank-deficient",
            stacklevel=2,
        )
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    sigma_a = np.cov(a, rowvar=False)
    sigma_b = np.cov(b, rowvar=False)
    covmean = linalg.sqrtm(sigma_a @ sigma_b)
    if np.iscomplexobj(covmean):
        residue = float(np.max(np.abs(covmean.imag)))
        scale = max(1.0, float(np.max(np.abs(covmean.real))))
        if residue > 1e-6 * scale:
            raise NumericError(
                f"matrix square root has imaginary residue {residue:.3e} beyond clamping headroom"
            )
        covmean = covmean.real
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * np.trace(covmean))
    if value < 0:
        if value < -1e-6:
            raise NumericError(f"distance collapsed to {value:.3e}; covariances are degenerate")
        value = 0.0
    return value


def fid_from_images(images_a: np.ndarray, images_b: np.ndarray, pooled_net=None) -> float:
    net = pooled_net if pooled_net is not None else default_pooled_net()
    return fid(pooled_features(images_a, net), pooled_features(images_b, net))
