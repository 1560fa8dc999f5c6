"""Noise schedules, forward diffusion (standard and GMM-anchored), and reverse samplers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .posedist import GmmParams


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray   # beta_1..beta_K
    alphas: np.ndarray  # alpha_k = prod_{i<=k} (1 - beta_i)

    @property
    def K(self) -> int:
        return len(self.betas)

    def alpha(self, k: int) -> float:
        """alpha_k with alpha_0 = 1."""
        return 1.0 if k == 0 else float(self.alphas[k - 1])


def make_schedule(K: int = 50, beta_start: float = 1e-4, beta_end: float = 2e-3) -> DiffusionSchedule:
    if K < 2:
        raise ValueError(f"need at least 2 steps, got K={K}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    k = np.arange(K, dtype=np.float64)
    betas = beta_start + k / (K - 1) * (beta_end - beta_start)
    betas[0], betas[-1] = beta_start, beta_end
    return DiffusionSchedule(betas, np.cumprod(1.0 - betas))


def _check_step(k, schedule):
    if not 1 <= k <= schedule.K:
        raise ValueError(f"diffusion step {k} outside 1..{schedule.K}")


def forward_standard(h0, k: int, schedule: DiffusionSchedule, rng: np.random.Generator) -> np.ndarray:
    _check_step(k, schedule)
    h0 = np.asarray(h0, dtype=np.float64)
    a = schedule.alpha(k)
    return np.sqrt(a) * h0 + np.sqrt(1.0 - a) * rng.standard_normal(h0.shape)


def gmm_noise(gmm: GmmParams, component: int, shape, rng: np.random.Generator) -> np.ndarray:
    """A draw of N(0, Sigma_component) reshaped to ``shape``."""
    eps = gmm.cov_sqrt()[component] @ rng.standard_normal(gmm.dim)
    return eps.reshape(shape)


def _forward_gmm_alpha(h0, a, gmm, component, rng):
    h0 = np.asarray(h0, dtype=np.float64)
    mu = gmm.means[component].reshape(h0.shape)
    # mu + sqrt(a)(h0 - mu), arranged so a=1 returns h0 and a=0 returns mu bit-exactly
    r = np.sqrt(a)
    return r * h0 + (1.0 - r) * mu + np.sqrt(1.0 - a) * gmm_noise(gmm, component, h0.shape, rng)


def forward_gmm(h0, k: int, schedule: DiffusionSchedule, gmm: GmmParams, component: int,
                rng: np.random.Generator) -> np.ndarray:
    """Diffuse ``h0`` toward mixture component ``component`` in one jump to step k."""
    _check_step(k, schedule)
    return _forward_gmm_alpha(h0, schedule.alpha(k), gmm, component, rng)


def forward_gmm_stepwise(h_prev, k: int, schedule: DiffusionSchedule, gmm: GmmParams, component: int,
                         rng: np.random.Generator) -> np.ndarray:
    """One step k-1 -> k of the same process, applied to the component-centred pose."""
    _check_step(k, schedule)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    mu = gmm.means[component].reshape(h_prev.shape)
    ratio = schedule.alpha(k) / schedule.alpha(k - 1)
    noise = gmm_noise(gmm, component, h_prev.shape, rng)
    r = np.sqrt(ratio)
    return r * h_prev + (1.0 - r) * mu + np.sqrt(max(1.0 - ratio, 0.0)) * noise


@dataclass
class Trajectory:
    index: int
    component: int
    poses: np.ndarray  # (K+1, J, 3); poses[0] is the ground truth


def trajectory_rng(seed, *keys) -> np.random.Generator:
    """Independent stream for one trajectory, derived from the master seed and its keys."""
    return np.random.default_rng([int(seed), *[int(k) for k in keys]])


def make_trajectories(h0, gmm: GmmParams, schedule: DiffusionSchedule, N: int = 5, rng=None,
                      seed: int | None = None) -> list:
    """N supervision chains; each picks one component, then every step is a direct jump from h0."""
    if N < 1:
        raise ValueError(f"need N >= 1, got {N}")
    h0 = np.asarray(h0, dtype=np.float64)
    if seed is None:
        seed = int((rng or np.random.default_rng()).integers(2**63))
    out = []
    for i in range(N):
        r = trajectory_rng(seed, i)
        m = int(r.choice(gmm.n_components, p=gmm.weights))
        poses = np.empty((schedule.K + 1,) + h0.shape)
        poses[0] = h0
        for k in range(1, schedule.K + 1):
            poses[k] = forward_gmm(h0, k, schedule, gmm, m, r)
        out.append(Trajectory(i, m, poses))
    return out


# --------------------------------------------------------------- reverse

def strided_steps(K: int, S: int) -> list:
    """Visited step indices K, K - K//S, ... (S entries)."""
    if not 1 <= S <= K:
        raise ValueError(f"stride count S={S} must be within 1..{K}")
    stride = K // S
    return [K - j * stride for j in range(S)]


def _run_chain(g, h, f_st, steps):
    h = np.asarray(h, dtype=np.float64)
    for k in steps:
        h = g(h, f_st, k)
        if not np.all(np.isfinite(h)):
            raise FloatingPointError(f"non-finite activation at reverse step k={k}")
    return h


def reverse_full(g, hK_samples, f_st, schedule: DiffusionSchedule) -> np.ndarray:
    """Apply ``g(h, f_st, k)`` for k = K..1. ``g`` must accept batched poses."""
    return _run_chain(g, hK_samples, f_st, range(schedule.K, 0, -1))


def reverse_strided(g, hK_samples, f_st, schedule: DiffusionSchedule, S: int = 5) -> np.ndarray:
    """Apply g only at the S visited steps, feeding each output to the next visited step."""
    return _run_chain(g, hK_samples, f_st, strided_steps(schedule.K, S))


def aggregate_mean(poses) -> np.ndarray:
    """Mean over the leading sample axis."""
    poses = np.asarray(poses, dtype=np.float64)
    if len(poses) < 1:
        raise ValueError("need at least one pose")
    return poses.mean(axis=0)
