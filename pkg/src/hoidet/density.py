"""Target-localization mathematics.

Given a person box, the head network predicts where that person's
interaction target should sit, expressed as a density over 4-d relative
offsets (tx, ty, tw, th). Two families are implemented:

* a fixed-width unnormalized Gaussian compatibility
  ``exp(-||d - mu||^2 / (2 sigma^2))`` used for ranking candidate
  objects (only relative order matters, so the normalizer is dropped);
* a diagonal-covariance Gaussian mixture with learned weights, means
  and widths, trained by negative log likelihood. Its densities are
  fully normalized because the likelihood objective requires it.

The mixture widths are parametrized as ``sigma_floor + softplus(raw)``
to keep them positive and bounded away from zero; the floor defaults to
0.3, as does the fixed sigma.

Also here: the smooth L1 regression loss for mean-only training, and a
seeded k-means over observed offsets that serves as the
non-instance-aware baseline (score = max over cluster centers of the
fixed-width compatibility).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

DEFAULT_SIGMA = 0.3
DEFAULT_SIGMA_FLOOR = 0.3
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class DensityParams:
    """Per-action mixture parameters.

    weights: (A, M), each row summing to 1; mus: (A, M, 4);
    sigmas: (A, M, 4) with every entry at or above the floor.
    """

    weights: np.ndarray
    mus: np.ndarray
    sigmas: np.ndarray
    sigma_floor: float = DEFAULT_SIGMA_FLOOR

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.mus = np.asarray(self.mus, dtype=np.float64)
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("weights must be (A, M)")
        a, m = self.weights.shape
        if self.mus.shape != (a, m, 4) or self.sigmas.shape != (a, m, 4):
            raise ValueError("mus and sigmas must be (A, M, 4)")
        sums = self.weights.sum(axis=1)
        if not np.allclose(sums, 1.0, atol=1e-6):
            raise ValueError("mixing weights must sum to 1 per action")
        if np.any(self.sigmas < self.sigma_floor - 1e-12):
            raise ValueError("sigma entries must not fall below the floor")

    @property
    def num_actions(self) -> int:
        return self.weights.shape[0]

    @property
    def num_components(self) -> int:
        return self.weights.shape[1]

    def for_action(self, a: int):
        return self.weights[a], self.mus[a], self.sigmas[a]


def _vec4(x) -> np.ndarray:
    arr = np.asarray(getattr(x, "as_tuple", lambda: x)(), dtype=np.float64).ravel()
    if arr.size != 4:
        raise ValueError(f"expected a 4-vector, got size {arr.size}")
    return arr


def gaussian_compat(b_rel, mu, sigma: float = DEFAULT_SIGMA) -> float:
    """Unnormalized isotropic compatibility in (0, 1].

    Equals 1 exactly when the offset sits at the predicted mean and
    decays with squared distance at scale sigma.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    d = _vec4(b_rel) - _vec4(mu)
    return float(np.exp(-float(d @ d) / (2.0 * sigma * sigma)))


def component_log_densities(b_rel, mus: np.ndarray, sigmas: np.ndarray) -> np.ndarray:
    """Log of the normalized diagonal Gaussian density of each component.

    mus, sigmas: (M, 4). Returns (M,).
    """
    b = _vec4(b_rel)
    mus = np.asarray(mus, dtype=np.float64).reshape(-1, 4)
    sigmas = np.asarray(sigmas, dtype=np.float64).reshape(-1, 4)
    z = (b[None, :] - mus) / sigmas
    return -2.0 * LOG_2PI - np.log(sigmas).sum(axis=1) - 0.5 * (z * z).sum(axis=1)


def mixture_compat(b_rel, weights, mus, sigmas) -> float:
    """Normalized mixture density sum_m w_m N(b_rel | mu_m, diag(sigma_m^2))."""
    w = np.asarray(weights, dtype=np.float64).ravel()
    logs = component_log_densities(b_rel, mus, sigmas)
    return float(np.sum(w * np.exp(logs)))


def mdn_nll(b_rel, weights, mus, sigmas) -> float:
    """Negative log mixture density, computed via log-sum-exp so that
    far-from-mode offsets do not underflow to -log(0)."""
    w = np.asarray(weights, dtype=np.float64).ravel()
    logs = component_log_densities(b_rel, mus, sigmas) + np.log(w)
    peak = logs.max()
    return float(-(peak + np.log(np.exp(logs - peak).sum())))


def mdn_nll_grad(b_rel, w_logits, mus, raw_sigmas,
                 sigma_floor: float = DEFAULT_SIGMA_FLOOR):
    """NLL of one offset under mixture parameters in head form, with
    gradients taken w.r.t. the head outputs themselves.

    Head form means: mixing weights are ``softmax(w_logits)`` and widths
    are ``sigma_floor + softplus(raw_sigmas)``.

    Returns (nll, d_logits (M,), d_mus (M, 4), d_raw_sigmas (M, 4)).
    """
    b = _vec4(b_rel)
    logits = np.asarray(w_logits, dtype=np.float64).ravel()
    mus = np.asarray(mus, dtype=np.float64).reshape(-1, 4)
    raw = np.asarray(raw_sigmas, dtype=np.float64).reshape(-1, 4)
    w = softmax(logits)
    sigmas = sigma_floor + softplus(raw)

    log_comp = component_log_densities(b, mus, sigmas)
    score = np.log(w) + log_comp
    peak = score.max()
    lse = peak + np.log(np.exp(score - peak).sum())
    nll = -lse
    resp = np.exp(score - lse)  # posterior responsibilities, sums to 1

    d_logits = w - resp
    diff = mus - b[None, :]
    d_mus = resp[:, None] * diff / (sigmas * sigmas)
    d_sigmas = resp[:, None] * (1.0 / sigmas - diff * diff / sigmas**3)
    d_raw = d_sigmas * _sigmoid(raw)
    return float(nll), d_logits, d_mus, d_raw


def smooth_l1(pred, target) -> float:
    """Sum over the 4 coordinates of the Huber-style loss:
    0.5 d^2 for |d| < 1, |d| - 0.5 otherwise."""
    d = _vec4(pred) - _vec4(target)
    a = np.abs(d)
    per = np.where(a < 1.0, 0.5 * d * d, a - 0.5)
    return float(per.sum())


def smooth_l1_grad(pred, target) -> np.ndarray:
    """Gradient of :func:`smooth_l1` w.r.t. ``pred``: d clipped to [-1, 1]."""
    d = _vec4(pred) - _vec4(target)
    return np.clip(d, -1.0, 1.0)


def softplus(x):
    """log(1 + e^x), overflow-safe for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return out if out.ndim else float(out)


def inv_softplus(y):
    """Inverse of softplus on y > 0: log(e^y - 1)."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("inv_softplus requires positive input")
    out = y + np.log(-np.expm1(-y))
    return out if out.ndim else float(out)


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


def softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def kmeans_offsets(offsets: np.ndarray, k: int, seed: int,
                   max_iter: int = 100) -> np.ndarray:
    """Lloyd's algorithm on 4-d offsets with k-means++ style seeding.

    Returns (k', 4) centers where k' = min(k, len(offsets)); a reduced
    k is reported with a warning. The clustering objective (sum of
    squared distances to assigned centers) is non-increasing across
    iterations by construction of the two Lloyd steps.
    """
    pts = np.asarray(offsets, dtype=np.float64).reshape(-1, 4)
    n = len(pts)
    if n == 0:
        raise ValueError("k-means needs at least one offset")
    if k < 1:
        raise ValueError("k must be positive")
    if n < k:
        warnings.warn(f"only {n} offsets for k={k}; reducing k to {n}")
        k = n
    rng = np.random.default_rng(seed)

    # k-means++ seeding: first center uniform, then proportional to
    # squared distance from the nearest chosen center.
    centers = np.empty((k, 4))
    centers[0] = pts[rng.integers(n)]
    d2 = ((pts - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j:] = centers[0]
            break
        probs = d2 / total
        centers[j] = pts[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((pts - centers[j]) ** 2).sum(axis=1))

    assign = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        dists = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = dists.argmin(axis=1)
        if np.array_equal(new_assign, assign) and _ > 0:
            break
        assign = new_assign
        for j in range(k):
            mask = assign == j
            if mask.any():
                centers[j] = pts[mask].mean(axis=0)
    return centers


def kmeans_compat(b_rel, centers: np.ndarray, sigma: float = DEFAULT_SIGMA) -> float:
    """Baseline compatibility: max over cluster centers of the
    fixed-width Gaussian score, i.e. distance to the nearest mode."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 4)
    return max(gaussian_compat(b_rel, c, sigma) for c in centers)
