"""The uncertain initial pose distribution and its Gaussian-mixture fit."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .skeleton import Camera, NormStats, ZHistogram, pixel_to_norm

log = logging.getLogger(__name__)

_LOG2PI = np.log(2.0 * np.pi)


@dataclass
class UncertainPoseDist:
    """Per-joint image-plane weights plus per-joint depth histogram.

    Pixels are lifted to millimetres with the nominal root depth, relative to
    the detected root position, then mapped into the normalized diffusion space.
    """

    heatmaps: np.ndarray  # (J, H, W), each joint sums to 1
    zhist: ZHistogram
    camera: Camera
    norm: NormStats
    root_uv: np.ndarray   # detected root position, normalized image units

    def __post_init__(self):
        j, h, w = self.heatmaps.shape
        flat = self.heatmaps.reshape(j, -1)
        self._cdf = np.cumsum(flat, axis=1)
        self._cdf /= self._cdf[:, -1:]
        self._zcdf = [np.cumsum(f) / np.sum(f) for f in self.zhist.freqs]

    @property
    def joint_count(self) -> int:
        return self.heatmaps.shape[0]

    @property
    def grid(self) -> tuple:
        return self.heatmaps.shape[1:]


def make_dist(sample, dataset, zhist: ZHistogram) -> UncertainPoseDist:
    hm = sample.get_heatmaps(dataset.config.grid)
    return UncertainPoseDist(hm, zhist, dataset.camera, dataset.norm_stats, np.array(sample.pose2d[0]))


def sample_hk(dist: UncertainPoseDist, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Draw poses (n, J, 3) from H_K in normalized coordinates, or one (J, 3) pose if n is None."""
    count = 1 if n is None else n
    j_count = dist.joint_count
    h, w = dist.grid
    px = np.empty((count, j_count, 2))
    z = np.empty((count, j_count))
    for j in range(j_count):
        idx = np.searchsorted(dist._cdf[j], rng.random(count), side="right")
        idx = np.minimum(idx, h * w - 1)
        rows, cols = np.divmod(idx, w)
        jitter = rng.random((count, 2)) - 0.5
        px[:, j, 0] = cols + jitter[:, 0]
        px[:, j, 1] = rows + jitter[:, 1]
        edges = dist.zhist.edges[j]
        b = np.minimum(np.searchsorted(dist._zcdf[j], rng.random(count), side="right"), len(edges) - 2)
        z[:, j] = edges[b] + (edges[b + 1] - edges[b]) * rng.random(count)
    uv = pixel_to_norm(px, (h, w)) - dist.root_uv
    xy = uv * dist.camera.root_depth / dist.camera.focal_norm
    pose = dist.norm.normalize(np.concatenate([xy, z[..., None]], axis=-1))
    return pose[0] if n is None else pose


# ------------------------------------------------------------------- GMM

@dataclass
class GmmParams:
    weights: np.ndarray  # (M,)
    means: np.ndarray    # (M, D)
    covs: np.ndarray     # (M, D, D)
    history: list = field(default_factory=list, repr=False)  # log-likelihood per EM iteration
    events: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covs = np.asarray(self.covs, dtype=np.float64)
        self._sqrt = None

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def cov_sqrt(self) -> np.ndarray:
        """Symmetric square roots of the component covariances."""
        if self._sqrt is None:
            vals, vecs = np.linalg.eigh(self.covs)
            vals = np.clip(vals, 0.0, None)
            self._sqrt = np.einsum("mij,mj,mkj->mik", vecs, np.sqrt(vals), vecs)
        return self._sqrt

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(), "covs": self.covs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GmmParams":
        return cls(np.array(d["weights"]), np.array(d["means"]), np.array(d["covs"]))


def _component_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    try:
        chol = linalg.cholesky(cov, lower=True, check_finite=False)
    except linalg.LinAlgError:
        raise ValueError("covariance matrix is not positive definite") from None
    inv = linalg.solve_triangular(chol, np.eye(len(mean)), lower=True, check_finite=False)
    z = (x - mean) @ inv.T
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return -0.5 * (x.shape[1] * _LOG2PI + logdet + np.einsum("ij,ij->i", z, z))


def _weighted_logpdf(gmm: GmmParams, x: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        logw = np.log(gmm.weights)
    return np.stack([logw[m] + _component_logpdf(x, gmm.means[m], gmm.covs[m]) for m in range(gmm.n_components)], axis=1)


def gmm_log_likelihood(gmm: GmmParams, samples) -> float:
    """Total log-likelihood of ``samples`` (N, D) under the mixture."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if x.shape[1] != gmm.dim:
        raise ValueError(f"sample dim {x.shape[1]} does not match GMM dim {gmm.dim}")
    return float(logsumexp(_weighted_logpdf(gmm, x), axis=1).sum())


def _kmeanspp(x: np.ndarray, m: int, rng: np.random.Generator, lloyd_iters: int = 20) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, m):
        total = d2.sum()
        idx = rng.integers(len(x)) if total <= 0 else rng.choice(len(x), p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    centers = np.array(centers)
    labels = None
    for _ in range(lloyd_iters):
        dist = ((x[:, None, :] - centers[None]) ** 2).sum(axis=2)
        new = dist.argmin(axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for k in range(m):
            if np.any(labels == k):
                centers[k] = x[labels == k].mean(axis=0)
    return labels


def _scatter(x, resp_k, mean, nk):
    xw = (x - mean) * np.sqrt(resp_k)[:, None]
    return xw.T @ xw / nk


def fit_gmm_em(samples, n_components: int = 5, tol: float = 1e-6, max_iter: int = 100,
               ridge_scale: float = 1e-6, diagonal: bool = False, rng=None, init=None) -> GmmParams:
    """Fit a full-covariance Gaussian mixture by EM.

    The ridge ``ridge_scale * trace(cov(samples)) / D`` is fixed for the whole
    run and added to every covariance in each M-step. Iteration stops when the
    mean per-sample log-likelihood improves by less than ``tol``.
    ``init`` may be a GmmParams to start from instead of k-means++.
    """
    if n_components < 1:
        raise ValueError(f"need at least one component, got {n_components}")
    x = np.asarray(samples, dtype=np.float64)
    x = x.reshape(len(x), -1)
    n, d = x.shape
    if n < n_components:
        raise ValueError(f"{n} samples cannot support {n_components} components")
    rng = rng if rng is not None else np.random.default_rng(0)
    data_cov = np.cov(x, rowvar=False, bias=True).reshape(d, d)
    ridge = ridge_scale * max(np.trace(data_cov), 1e-12) / d
    eye = np.eye(d)

    def finish(cov):
        if diagonal:
            cov = np.diag(np.diag(cov))
        return 0.5 * (cov + cov.T) + ridge * eye

    if init is not None:
        gmm = GmmParams(init.weights.copy(), init.means.copy(), init.covs.copy())
    else:
        labels = _kmeanspp(x, n_components, rng)
        weights, means, covs = [], [], []
        for k in range(n_components):
            members = x[labels == k]
            if len(members) < 2:
                members = x
            weights.append(len(x[labels == k]) / n)
            means.append(members.mean(axis=0))
            covs.append(finish(np.cov(members, rowvar=False, bias=True).reshape(d, d)))
        weights = np.maximum(np.array(weights), 1.0 / n)
        gmm = GmmParams(weights / weights.sum(), np.array(means), np.array(covs))

    prev = None
    for it in range(max_iter):
        logp = _weighted_logpdf(gmm, x)
        norm = logsumexp(logp, axis=1)
        ll = float(norm.sum())
        gmm.history.append(ll)
        if prev is not None and (ll - prev) / n < tol:
            break
        prev = ll
        resp = np.exp(logp - norm[:, None])
        nk = resp.sum(axis=0)
        weights = nk / n
        means = (resp.T @ x) / np.maximum(nk, 1e-300)[:, None]
        covs = np.empty((n_components, d, d))
        reinit = []
        for k in range(n_components):
            if weights[k] < 1e-4:
                reinit.append(k)
                continue
            covs[k] = finish(_scatter(x, resp[:, k], means[k], nk[k]))
            try:
                linalg.cholesky(covs[k], lower=True, check_finite=False)
            except linalg.LinAlgError:
                reinit.append(k)
        for k in reinit:
            means[k] = x[rng.integers(n)]
            covs[k] = finish(data_cov)
            weights[k] = 1.0 / n_components
            gmm.events.append({"iteration": it, "component": int(k), "event": "reinitialized"})
            log.info("EM iteration %d: component %d collapsed, re-initialized", it, k)
        if reinit:
            prev = None  # a re-seed is allowed to lower the likelihood once
        weights = weights / weights.sum()
        history, events = gmm.history, gmm.events
        gmm = GmmParams(weights, means, covs, history, events)
    return gmm


def sample_gmm(gmm: GmmParams, rng: np.random.Generator, n: int | None = None, component: int | None = None):
    """Draw from the mixture; returns (samples, component indices)."""
    count = 1 if n is None else n
    comps = (np.full(count, component) if component is not None
             else rng.choice(gmm.n_components, size=count, p=gmm.weights))
    eps = rng.standard_normal((count, gmm.dim))
    out = gmm.means[comps] + np.einsum("nij,nj->ni", gmm.cov_sqrt()[comps], eps)
    return (out[0], comps[0]) if n is None else (out, comps)
