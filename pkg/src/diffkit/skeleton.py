"""Joint graph, forward kinematics, pinhole projection, heatmap rendering and
the synthetic pose corpus."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

DATASET_VERSION = 1

H36M_NAMES = (
    "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
    "spine", "thorax", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
)
H36M_PARENTS = (0, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15)

# rest-pose bone vectors in mm (x right, y down, z away from camera); T-pose arms
_H36M_OFFSETS = (
    (0, 0, 0),
    (-130, 0, 0), (0, 440, 0), (0, 430, 0),
    (130, 0, 0), (0, 440, 0), (0, 430, 0),
    (0, -230, 0), (0, -250, 0), (0, -110, 0), (0, -115, 0),
    (150, 0, 0), (280, 0, 0), (250, 0, 0),
    (-150, 0, 0), (-280, 0, 0), (-250, 0, 0),
)

# per joint (x, y, z) Euler limits in radians; a joint's rotation moves its children
_H36M_LIMITS = (
    ((-0.3, 0.3), (-np.pi, np.pi), (-0.2, 0.2)),
    ((-1.2, 0.5), (-0.4, 0.4), (-0.2, 0.6)),
    ((0.0, 1.4), (0.0, 0.0), (0.0, 0.0)),
    ((0.0, 0.0), (0.0, 0.0), (0.0, 0.0)),
    ((-1.2, 0.5), (-0.4, 0.4), (-0.6, 0.2)),
    ((0.0, 1.4), (0.0, 0.0), (0.0, 0.0)),
    ((0.0, 0.0), (0.0, 0.0), (0.0, 0.0)),
    ((-0.2, 0.5), (-0.4, 0.4), (-0.3, 0.3)),
    ((-0.2, 0.2), (-0.2, 0.2), (-0.2, 0.2)),
    ((-0.3, 0.3), (-0.5, 0.5), (-0.3, 0.3)),
    ((0.0, 0.0), (0.0, 0.0), (0.0, 0.0)),
    ((-0.8, 0.8), (-0.8, 0.8), (-0.5, 1.3)),
    ((0.0, 0.0), (-1.8, 0.0), (0.0, 0.0)),
    ((0.0, 0.0), (0.0, 0.0), (0.0, 0.0)),
    ((-0.8, 0.8), (-0.8, 0.8), (-1.3, 0.5)),
    ((0.0, 0.0), (0.0, 1.8), (0.0, 0.0)),
    ((0.0, 0.0), (0.0, 0.0), (0.0, 0.0)),
)


@dataclass(frozen=True)
class SkeletonSpec:
    parents: tuple
    offsets: np.ndarray
    limits: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        parents = tuple(int(p) for p in self.parents)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "offsets", np.asarray(self.offsets, dtype=np.float64))
        object.__setattr__(self, "limits", np.asarray(self.limits, dtype=np.float64))
        if parents[0] != 0:
            raise ValueError("joint 0 must be the root (its own parent)")
        for j, p in enumerate(parents[1:], start=1):
            if not 0 <= p < j:
                raise ValueError(f"joint {j} has parent {p}; parents must precede children")
        if np.any(self.bone_lengths <= 0):
            raise ValueError("bone lengths must be positive")

    @property
    def joint_count(self) -> int:
        return len(self.parents)

    @property
    def edges(self) -> list:
        return [(p, j) for j, p in enumerate(self.parents) if j != p]

    @property
    def bone_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.offsets[1:], axis=1)

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "parents": list(self.parents),
            "offsets": self.offsets.tolist(),
            "limits": self.limits.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonSpec":
        return cls(tuple(d["parents"]), np.array(d["offsets"]), np.array(d["limits"]), tuple(d.get("names", ())))


def h36m_skeleton() -> SkeletonSpec:
    return SkeletonSpec(H36M_PARENTS, np.array(_H36M_OFFSETS, dtype=float), np.array(_H36M_LIMITS), H36M_NAMES)


def normalized_adjacency(num_joints: int, edges) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 for an undirected joint graph."""
    a = np.eye(num_joints)
    for i, j in edges:
        a[i, j] = a[j, i] = 1.0
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return a * d[:, None] * d[None, :]


def rest_angles(spec: SkeletonSpec) -> np.ndarray:
    return np.zeros((spec.joint_count, 3))


def random_angles(spec: SkeletonSpec, rng: np.random.Generator) -> np.ndarray:
    lo, hi = spec.limits[..., 0], spec.limits[..., 1]
    return lo + (hi - lo) * rng.random(lo.shape)


def forward_kinematics(angles, spec: SkeletonSpec, check_limits: bool = True) -> np.ndarray:
    """Root-relative joint positions (J, 3) for per-joint xyz Euler angles (J, 3)."""
    angles = np.asarray(angles, dtype=np.float64)
    if angles.shape != (spec.joint_count, 3):
        raise ValueError(f"expected angles of shape {(spec.joint_count, 3)}, got {angles.shape}")
    if check_limits:
        lo, hi = spec.limits[..., 0], spec.limits[..., 1]
        bad = np.argwhere((angles < lo - 1e-12) | (angles > hi + 1e-12))
        if len(bad):
            j, a = bad[0]
            raise ValueError(f"angle {angles[j, a]:.4f} of joint {j} axis {'xyz'[a]} outside [{lo[j, a]}, {hi[j, a]}]")
    local = Rotation.from_euler("xyz", angles).as_matrix()
    glob = np.empty_like(local)
    pos = np.zeros((spec.joint_count, 3))
    glob[0] = local[0]
    for j in range(1, spec.joint_count):
        p = spec.parents[j]
        pos[j] = pos[p] + glob[p] @ spec.offsets[j]
        glob[j] = glob[p] @ local[j]
    return pos


# ------------------------------------------------------------ camera / image

@dataclass(frozen=True)
class Camera:
    focal_px: float = 1150.0
    image_size: float = 640.0
    root_depth: float = 5000.0

    @property
    def focal_norm(self) -> float:
        """Focal length in normalized image units ([-1, 1] across the image)."""
        return self.focal_px / (0.5 * self.image_size)


def project(pose3d, camera: Camera) -> np.ndarray:
    pose3d = np.asarray(pose3d, dtype=np.float64)
    depth = pose3d[..., 2] + camera.root_depth
    if np.any(depth <= 0):
        raise ValueError(f"non-positive joint depth {depth.min():.3f} mm")
    return camera.focal_norm * pose3d[..., :2] / depth[..., None]


def unproject(pose2d, z, camera: Camera) -> np.ndarray:
    """Inverse of ``project`` given each joint's root-relative depth ``z``."""
    pose2d = np.asarray(pose2d, dtype=np.float64)
    depth = np.asarray(z, dtype=np.float64) + camera.root_depth
    xy = pose2d * depth[..., None] / camera.focal_norm
    return np.concatenate([xy, np.asarray(z, dtype=np.float64)[..., None]], axis=-1)


def norm_to_pixel(uv, grid=(64, 64)) -> np.ndarray:
    """Normalized (u, v) -> continuous (col, row); pixel i has its centre at i."""
    h, w = grid
    uv = np.asarray(uv, dtype=np.float64)
    return np.stack([(uv[..., 0] + 1.0) * 0.5 * w - 0.5, (uv[..., 1] + 1.0) * 0.5 * h - 0.5], axis=-1)


def pixel_to_norm(px, grid=(64, 64)) -> np.ndarray:
    h, w = grid
    px = np.asarray(px, dtype=np.float64)
    return np.stack([(px[..., 0] + 0.5) * 2.0 / w - 1.0, (px[..., 1] + 0.5) * 2.0 / h - 1.0], axis=-1)


def heatmap_centers(pose2d, grid=(64, 64), noise: float = 0.0, rng=None) -> np.ndarray:
    """Pixel centres of the detector bumps: jittered by ``noise`` px, clamped to the grid."""
    h, w = grid
    px = norm_to_pixel(pose2d, grid)
    if noise > 0:
        px = px + noise * rng.standard_normal(px.shape)
    return np.clip(px, [0.0, 0.0], [w - 1.0, h - 1.0])


def gaussian_heatmaps(centers, sigmas, grid=(64, 64)) -> np.ndarray:
    h, w = grid
    centers = np.asarray(centers, dtype=np.float64)
    sigmas = np.broadcast_to(np.asarray(sigmas, dtype=np.float64), centers.shape[:1])
    cols, rows = np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64)
    gx = np.exp(-((cols[None, :] - centers[:, :1]) ** 2) / (2.0 * sigmas[:, None] ** 2))
    gy = np.exp(-((rows[None, :] - centers[:, 1:]) ** 2) / (2.0 * sigmas[:, None] ** 2))
    maps = gy[:, :, None] * gx[:, None, :]
    return maps / maps.sum(axis=(1, 2), keepdims=True)


def render_heatmaps(pose2d, grid=(64, 64), sigma: float = 2.0, noise: float = 0.0, rng=None,
                    inflation: float = 0.0) -> np.ndarray:
    """Per-joint normalized Gaussian bumps of shape (J, H, W).

    ``noise`` jitters each bump centre (pixels); ``inflation`` widens each
    joint's sigma by a random factor in [1, 1 + inflation].
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if (noise > 0 or inflation > 0) and rng is None:
        rng = np.random.default_rng(0)
    centers = heatmap_centers(pose2d, grid, noise, rng)
    sigmas = np.full(len(centers), float(sigma))
    if inflation > 0:
        sigmas = sigmas * (1.0 + inflation * rng.random(len(centers)))
    return gaussian_heatmaps(centers, sigmas, grid)


def heatmap_centroid(heatmaps) -> np.ndarray:
    """Weighted (col, row) centroid per joint."""
    heatmaps = np.asarray(heatmaps)
    _, h, w = heatmaps.shape
    cols = (heatmaps.sum(axis=1) * np.arange(w)).sum(axis=1)
    rows = (heatmaps.sum(axis=2) * np.arange(h)).sum(axis=1)
    return np.stack([cols, rows], axis=-1)


def entropy(weights) -> float:
    p = np.asarray(weights, dtype=np.float64).ravel()
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


# --------------------------------------------------------------- dataset

@dataclass
class Sample:
    id: int
    split: str
    pose3d: np.ndarray        # (J, 3) mm, root-relative
    pose2d_seq: np.ndarray    # (2T+1, J, 2) normalized image units, detector-perturbed
    heat_centers: np.ndarray  # (J, 2) pixel centres of the centre-frame heatmaps
    heat_sigmas: np.ndarray   # (J,)
    heatmaps: np.ndarray | None = None

    def get_heatmaps(self, grid) -> np.ndarray:
        if self.heatmaps is None:
            self.heatmaps = gaussian_heatmaps(self.heat_centers, self.heat_sigmas, grid)
        return self.heatmaps

    @property
    def pose2d(self) -> np.ndarray:
        return self.pose2d_seq[len(self.pose2d_seq) // 2]


@dataclass
class NormStats:
    mean: np.ndarray  # (3,) per-axis
    std: np.ndarray

    def normalize(self, pose_mm):
        return (np.asarray(pose_mm) - self.mean) / self.std

    def denormalize(self, pose):
        return np.asarray(pose) * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"], dtype=float), np.array(d["std"], dtype=float))

    @classmethod
    def fit(cls, poses_mm):
        flat = np.asarray(poses_mm).reshape(-1, 3)
        return cls(flat.mean(axis=0), flat.std(axis=0))


@dataclass
class DatasetConfig:
    n_train: int = 2000
    n_test: int = 500
    half_length: int = 4
    seed: int = 0
    grid: tuple = (64, 64)
    sigma: float = 2.0
    noise_px: float = 1.5
    inflation: float = 0.0
    max_angle_step: float = 0.03
    focal_px: float = 1150.0
    image_size: float = 640.0
    root_depth: float = 5000.0

    @property
    def camera(self) -> Camera:
        return Camera(self.focal_px, self.image_size, self.root_depth)

    def to_dict(self):
        d = dict(self.__dict__)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["grid"] = tuple(d["grid"])
        return cls(**d)


@dataclass
class Dataset:
    skeleton: SkeletonSpec
    config: DatasetConfig
    norm_stats: NormStats
    samples: list = field(default_factory=list)

    def split(self, name: str) -> list:
        return [s for s in self.samples if s.split == name]

    @property
    def train(self) -> list:
        return self.split("train")

    @property
    def test(self) -> list:
        return self.split("test")

    @property
    def camera(self) -> Camera:
        return self.config.camera


_SPLIT_CODE = {"train": 0, "test": 1}


def _gen_sample(spec: SkeletonSpec, cfg: DatasetConfig, split: str, index: int) -> Sample:
    rng = np.random.default_rng([cfg.seed, _SPLIT_CODE[split], index])
    cam = cfg.camera
    lo, hi = spec.limits[..., 0], spec.limits[..., 1]
    center = random_angles(spec, rng)
    velocity = cfg.max_angle_step * (2.0 * rng.random(center.shape) - 1.0)
    frames = []
    for t in range(-cfg.half_length, cfg.half_length + 1):
        frames.append(forward_kinematics(np.clip(center + velocity * t, lo, hi), spec))
    frames = np.array(frames)
    pose3d = frames[cfg.half_length]
    seq2d = project(frames, cam)
    noise_norm = cfg.noise_px * 2.0 / np.array(cfg.grid[::-1], dtype=float)
    seq2d = seq2d + noise_norm * rng.standard_normal(seq2d.shape)
    centers = heatmap_centers(project(pose3d, cam), cfg.grid, cfg.noise_px, rng)
    sigmas = np.full(spec.joint_count, cfg.sigma)
    if cfg.inflation > 0:
        sigmas = sigmas * (1.0 + cfg.inflation * rng.random(spec.joint_count))
    # the centre frame's 2D detection is the heatmap peak
    seq2d[cfg.half_length] = pixel_to_norm(centers, cfg.grid)
    return Sample(index if split == "train" else cfg.n_train + index, split, pose3d, seq2d, centers, sigmas)


def gen_dataset(config: DatasetConfig | None = None, spec: SkeletonSpec | None = None, **overrides) -> Dataset:
    """Deterministic synthetic corpus; every sample has its own RNG stream."""
    cfg = config or DatasetConfig()
    if overrides:
        cfg = DatasetConfig(**{**cfg.__dict__, **overrides})
    if cfg.n_train <= 0 or cfg.n_test <= 0:
        raise ValueError("sample counts must be positive")
    spec = spec or h36m_skeleton()
    samples = [_gen_sample(spec, cfg, "train", i) for i in range(cfg.n_train)]
    samples += [_gen_sample(spec, cfg, "test", i) for i in range(cfg.n_test)]
    stats = NormStats.fit(np.array([s.pose3d for s in samples if s.split == "train"]))
    return Dataset(spec, cfg, stats, samples)


@dataclass
class ZHistogram:
    edges: list  # per joint, array of B+1 (or 2 for a degenerate joint) edges in mm
    freqs: list  # per joint, array of B normalized frequencies


def z_histogram_from_depths(z, bins: int = 64) -> ZHistogram:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    edges, freqs = [], []
    for j in range(z.shape[1]):
        lo, hi = z[:, j].min(), z[:, j].max()
        if hi - lo <= 1e-9 * max(1.0, abs(lo)):
            edges.append(np.array([lo, lo]))
            freqs.append(np.array([1.0]))
            continue
        counts, e = np.histogram(z[:, j], bins=bins, range=(lo, hi))
        edges.append(e)
        freqs.append(counts / counts.sum())
    return ZHistogram(edges, freqs)


def z_histogram(dataset: Dataset, bins: int = 64) -> ZHistogram:
    """Per-joint depth histogram over the training split."""
    train = dataset.train
    if not train:
        raise ValueError("dataset has no training split")
    return z_histogram_from_depths(np.array([s.pose3d[:, 2] for s in train]), bins)


# ------------------------------------------------------------------- I/O

def dumps(obj) -> str:
    """Canonical JSON: sorted keys, shortest round-trip float repr."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def dataset_to_dict(ds: Dataset, full_heatmaps: bool = False, meta: dict | None = None) -> dict:
    samples = []
    for s in ds.samples:
        d = {
            "id": s.id,
            "split": s.split,
            "pose3d": s.pose3d.tolist(),
            "pose2d_seq": s.pose2d_seq.tolist(),
            "heat_centers": s.heat_centers.tolist(),
            "heat_sigmas": s.heat_sigmas.tolist(),
        }
        if full_heatmaps:
            d["heatmaps"] = s.get_heatmaps(ds.config.grid).reshape(len(s.heat_sigmas), -1).tolist()
        samples.append(d)
    out = {
        "version": DATASET_VERSION,
        "skeleton": ds.skeleton.to_dict(),
        "config": ds.config.to_dict(),
        "norm_stats": ds.norm_stats.to_dict(),
        "samples": samples,
    }
    if meta:
        out["meta"] = meta
    return out


def dataset_from_dict(d: dict) -> Dataset:
    if d.get("version") != DATASET_VERSION:
        raise ValueError(f"dataset version {d.get('version')} is not supported (expected {DATASET_VERSION})")
    cfg = DatasetConfig.from_dict(d["config"])
    h, w = cfg.grid
    samples = []
    for s in d["samples"]:
        hm = s.get("heatmaps")
        samples.append(Sample(
            int(s["id"]), s["split"], np.array(s["pose3d"], dtype=float), np.array(s["pose2d_seq"], dtype=float),
            np.array(s["heat_centers"], dtype=float), np.array(s["heat_sigmas"], dtype=float),
            None if hm is None else np.array(hm, dtype=float).reshape(-1, h, w),
        ))
    return Dataset(SkeletonSpec.from_dict(d["skeleton"]), cfg, NormStats.from_dict(d["norm_stats"]), samples)


def save_dataset(ds: Dataset, path, full_heatmaps: bool = False, meta: dict | None = None) -> None:
    Path(path).write_text(dumps(dataset_to_dict(ds, full_heatmaps, meta)))


def load_dataset(path) -> Dataset:
    return dataset_from_dict(json.loads(Path(path).read_text()))
