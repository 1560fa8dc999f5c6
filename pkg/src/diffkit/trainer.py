"""Step-wise diffusion loss, training loop, inference and checkpoints."""

from __future__ import annotations

import json
import logging
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import tensorcore as tc
from .denoiser import (ContextConfig, ContextEncoder, Denoiser, DenoiserConfig, denoiser_graph,
                       init_denoiser, pretrain_context, step_code)
from .diffusion import (forward_gmm, forward_standard, make_schedule, make_trajectories, reverse_full,
                        reverse_strided, strided_steps, trajectory_rng, aggregate_mean)
from .optim import AdamState, adam_step
from .posedist import GmmParams, UncertainPoseDist, fit_gmm_em, sample_hk
from .skeleton import Dataset, NormStats, ZHistogram, dumps, normalized_adjacency, z_histogram

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MODES = ("diffpose", "stand_diff", "baseline_a", "baseline_b")

# stream tags mixed into per-item seeds so different uses never share a stream
_TAG_GMM, _TAG_TRAIN, _TAG_INFER, _TAG_INIT = 11, 12, 13, 14


@dataclass
class TrainConfig:
    mode: str = "diffpose"
    K: int = 50
    N: int = 5
    M: int = 5
    n_gmm: int = 1000
    batch_size: int = 256
    epochs: int = 20
    lr: float = 1e-4
    lr_decay: float = 0.9
    decay_every: int = 10
    seed: int = 0
    beta_start: float = 1e-4
    beta_end: float = 2e-3
    stack: int = 5             # baseline_b depth
    exact_loss: bool = False   # all K terms per trajectory instead of one sampled k
    latent: int = 128
    context: int = 128
    heads: int = 4
    blocks: int = 3
    ctx_epochs: int = 5
    ctx_lr: float = 1e-3
    z_source: str = "histogram"  # or "encoder"
    z_bins: int = 64
    gmm_tol: float = 1e-6
    gmm_max_iter: int = 100
    gmm_ridge: float = 1e-6
    gmm_diagonal: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode '{self.mode}' (expected one of {', '.join(MODES)})")
        if self.z_source not in ("histogram", "encoder"):
            raise ValueError(f"unknown z_source '{self.z_source}'")

    @property
    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(self.latent, self.context, self.heads, self.blocks)

    @property
    def schedule(self):
        return make_schedule(self.K, self.beta_start, self.beta_end)

    @classmethod
    def keys(cls) -> list:
        return [f.name for f in fields(cls)]

    def override(self, **kw) -> "TrainConfig":
        unknown = set(kw) - set(self.keys())
        if unknown:
            raise KeyError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return TrainConfig(**{**asdict(self), **kw})


# ------------------------------------------------------------------ loss

def diffusion_loss(g, trajectories, f_st, ks=None) -> float:
    """Mean squared error of ``g(h_k, f_st, k)`` against h_{k-1}.

    ``ks`` gives one sampled step per trajectory; ``None`` uses all K steps.
    The reduction is a mean over (trajectory, step) pairs and coordinates.
    """
    errs = []
    for i, traj in enumerate(trajectories):
        K = len(traj.poses) - 1
        steps = range(1, K + 1) if ks is None else [ks[i]]
        for k in steps:
            pred = g(traj.poses[k], f_st, k)
            errs.append(np.mean((pred - traj.poses[k - 1]) ** 2))
    return float(np.mean(errs))


def _mse(out, target) -> tc.Tensor:
    return tc.mul(tc.sum_squares(tc.add(out, tc.mul(target, -1.0))), 1.0 / np.asarray(target).size)


# -------------------------------------------------------- shared context

@dataclass
class PoseContext:
    """Per-dataset pieces shared by training and inference."""

    dataset: Dataset
    adjacency: np.ndarray
    zhist: ZHistogram
    encoder: ContextEncoder
    gmm_cache: dict = field(default_factory=dict)
    _fst: dict = field(default_factory=dict)

    def f_st(self, samples) -> np.ndarray:
        missing = [s for s in samples if s.id not in self._fst]
        for lo in range(0, len(missing), 512):
            chunk = missing[lo:lo + 512]
            feats = self.encoder.encode(np.array([s.pose2d_seq for s in chunk]))
            for s, f in zip(chunk, feats):
                self._fst[s.id] = f
        return np.array([self._fst[s.id] for s in samples])

    def zhist_for(self, sample, z_source: str) -> ZHistogram:
        if z_source == "histogram":
            return self.zhist
        probs = self.encoder.zbin_probs(sample.pose2d_seq)
        freqs = []
        for j, f in enumerate(self.zhist.freqs):
            freqs.append(f if len(f) == 1 else probs[j, :len(f)] / probs[j, :len(f)].sum())
        return ZHistogram(self.zhist.edges, freqs)

    def dist(self, sample, z_source: str = "histogram") -> UncertainPoseDist:
        ds = self.dataset
        return UncertainPoseDist(sample.get_heatmaps(ds.config.grid), self.zhist_for(sample, z_source),
                                 ds.camera, ds.norm_stats, np.array(sample.pose2d[0]))

    def gmm(self, sample, cfg: TrainConfig) -> GmmParams:
        key = (sample.id, cfg.M, cfg.n_gmm, cfg.seed, cfg.z_source, cfg.gmm_tol, cfg.gmm_max_iter,
               cfg.gmm_ridge, cfg.gmm_diagonal)
        if key not in self.gmm_cache:
            rng = trajectory_rng(cfg.seed, _TAG_GMM, sample.id)
            x = sample_hk(self.dist(sample, cfg.z_source), rng, cfg.n_gmm)
            self.gmm_cache[key] = fit_gmm_em(x.reshape(cfg.n_gmm, -1), cfg.M, tol=cfg.gmm_tol,
                                             max_iter=cfg.gmm_max_iter, ridge_scale=cfg.gmm_ridge,
                                             diagonal=cfg.gmm_diagonal, rng=rng)
        return self.gmm_cache[key]


def _zbin_targets(dataset: Dataset, zhist: ZHistogram) -> np.ndarray:
    z = np.array([s.pose3d[:, 2] for s in dataset.train])
    out = np.full(z.shape, -1, dtype=int)
    for j, edges in enumerate(zhist.edges):
        if len(edges) > 2:
            out[:, j] = np.clip(np.searchsorted(edges, z[:, j], side="right") - 1, 0, len(edges) - 2)
    return out


def build_context(dataset: Dataset, cfg: TrainConfig, encoder: ContextEncoder | None = None) -> PoseContext:
    """Adjacency, depth histogram and a pre-trained, frozen context encoder."""
    adj = normalized_adjacency(dataset.skeleton.joint_count, dataset.skeleton.edges)
    zhist = z_histogram(dataset, cfg.z_bins)
    if encoder is None:
        ccfg = ContextConfig(hidden=cfg.context, out=cfg.context,
                             z_bins=cfg.z_bins if cfg.z_source == "encoder" else 0)
        encoder = ContextEncoder(ccfg, adj, seed=int(trajectory_rng(cfg.seed, _TAG_INIT, 1).integers(2**31)))
        train = dataset.train
        pretrain_context(encoder, np.array([s.pose2d_seq for s in train]),
                         dataset.norm_stats.normalize(np.array([s.pose3d for s in train])),
                         epochs=cfg.ctx_epochs, lr=cfg.ctx_lr, seed=cfg.seed,
                         zbin_targets=_zbin_targets(dataset, zhist) if ccfg.z_bins else None)
    return PoseContext(dataset, adj, zhist, encoder)


# ----------------------------------------------------------------- model

class StackedDenoiser:
    """``depth`` independent denoisers applied in sequence (depth-matched regression baseline)."""

    def __init__(self, cfg: DenoiserConfig, adjacency, depth: int, K: int, params=None, seed: int = 0):
        self.cfg, self.depth, self.K = cfg, depth, K
        self.adjacency = np.asarray(adjacency, dtype=float)
        if params is None:
            rng = np.random.default_rng(seed)
            params = {}
            for s in range(depth):
                params.update(init_denoiser(cfg, rng, prefix=f"stack{s}."))
            params = tc.param_set(params)
        self.params = params

    @property
    def steps(self) -> list:
        return strided_steps(self.K, self.depth)

    def graph(self, p, adj, h, f_st) -> tc.Tensor:
        for s, k in enumerate(self.steps):
            batch = np.asarray(h.data if isinstance(h, tc.Tensor) else h).shape[:-2]
            h = denoiser_graph(p, adj, h, f_st, step_code(k, self.cfg, batch), self.cfg, prefix=f"stack{s}.")
        return h

    def __call__(self, h, f_st, k=None) -> np.ndarray:
        p = {n: tc.Tensor(v) for n, v in self.params.items()}
        return self.graph(p, tc.Tensor(self.adjacency), np.asarray(h, dtype=float), f_st).data


def build_model(cfg: TrainConfig, adjacency):
    seed = int(trajectory_rng(cfg.seed, _TAG_INIT, 0).integers(2**31))
    if cfg.mode == "baseline_b":
        return StackedDenoiser(cfg.denoiser_config, adjacency, cfg.stack, cfg.K, seed=seed)
    return Denoiser(cfg.denoiser_config, adjacency, seed=seed)


# ------------------------------------------------------------ checkpoint

@dataclass
class Checkpoint:
    config: TrainConfig
    denoiser: dict
    encoder: dict
    encoder_config: dict
    optimizer: AdamState
    norm_stats: NormStats
    rng_state: dict
    log: list = field(default_factory=list)
    status: str = "ok"
    version: int = CHECKPOINT_VERSION

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "tool_version": __version__,
            "config": asdict(self.config),
            "mode": self.config.mode,
            "seed": self.config.seed,
            "status": self.status,
            "denoiser": {k: self.denoiser[k].tolist() for k in sorted(self.denoiser)},
            "encoder": {k: self.encoder[k].tolist() for k in sorted(self.encoder)},
            "encoder_config": self.encoder_config,
            "optimizer": self.optimizer.to_dict(),
            "norm_stats": self.norm_stats.to_dict(),
            "rng_state": self.rng_state,
            "log": self.log,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint version {d.get('version')} does not match supported version {CHECKPOINT_VERSION}")
        return cls(
            TrainConfig(**d["config"]),
            {k: np.array(v, dtype=float) for k, v in d["denoiser"].items()},
            {k: np.array(v, dtype=float) for k, v in d["encoder"].items()},
            d["encoder_config"],
            AdamState.from_dict(d["optimizer"]),
            NormStats.from_dict(d["norm_stats"]),
            d["rng_state"],
            d.get("log", []),
            d.get("status", "ok"),
            d["version"],
        )

    def model(self, adjacency):
        cfg = self.config
        if cfg.mode == "baseline_b":
            return StackedDenoiser(cfg.denoiser_config, adjacency, cfg.stack, cfg.K, params=self.denoiser)
        return Denoiser(cfg.denoiser_config, adjacency, params=self.denoiser)

    def context_encoder(self, adjacency) -> ContextEncoder:
        enc = ContextEncoder(ContextConfig(**self.encoder_config), adjacency, params=self.encoder)
        enc.freeze()
        return enc


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically: a crash never leaves a half-written checkpoint behind."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(dumps(ckpt.to_dict()))
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_checkpoint(path) -> Checkpoint:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"checkpoint {path} is corrupt or truncated: {exc}") from None
    return Checkpoint.from_dict(d)


# -------------------------------------------------------------- training

def _training_items(cfg: TrainConfig, ctx: PoseContext, sample, h0, epoch, schedule):
    """(inputs, targets, steps) for one sample's N trajectories in this epoch."""
    xs, ys, ks = [], [], []
    for i in range(cfg.N):
        r = trajectory_rng(cfg.seed, _TAG_TRAIN, epoch, sample.id, i)
        if cfg.mode in ("baseline_a", "baseline_b"):
            xs.append(sample_hk(ctx.dist(sample, cfg.z_source), r))
            ys.append(h0)
            ks.append(cfg.K)
            continue
        if cfg.mode == "diffpose":
            gmm = ctx.gmm(sample, cfg)
            m = int(r.choice(gmm.n_components, p=gmm.weights))
            fwd = lambda k: h0 if k == 0 else forward_gmm(h0, k, schedule, gmm, m, r)
        else:
            fwd = lambda k: h0 if k == 0 else forward_standard(h0, k, schedule, r)
        steps = range(1, cfg.K + 1) if cfg.exact_loss else [int(r.integers(1, cfg.K + 1))]
        for k in steps:
            xs.append(fwd(k))
            ys.append(fwd(k - 1))
            ks.append(k)
    return xs, ys, ks


def train(config: TrainConfig, dataset: Dataset, ctx: PoseContext | None = None, on_epoch=None) -> Checkpoint:
    """Train the denoiser for ``config.epochs``; deterministic given (config, dataset)."""
    cfg = config
    ctx = ctx or build_context(dataset, cfg)
    schedule = cfg.schedule
    train_set = dataset.train
    h0_all = dataset.norm_stats.normalize(np.array([s.pose3d for s in train_set]))
    fst_all = ctx.f_st(train_set)
    model = build_model(cfg, ctx.adjacency)
    dcfg = cfg.denoiser_config
    adj = tc.Tensor(ctx.adjacency)
    state = AdamState()
    rng = np.random.default_rng(cfg.seed)
    history: list = []
    status = "ok"

    if cfg.mode == "diffpose":
        t0 = time.perf_counter()
        for s in train_set:
            ctx.gmm(s, cfg)
        log.info("fitted %d GMMs in %.1fs", len(train_set), time.perf_counter() - t0)

    def program(p, inputs):
        x, f, y, k = inputs
        if isinstance(model, StackedDenoiser):
            out = model.graph(p, adj, x, f)
        else:
            out = denoiser_graph(p, adj, x, f, step_code(k, dcfg), dcfg)
        return _mse(out, y)

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr * cfg.lr_decay ** (epoch // cfg.decay_every)
        xs, ys, ks, owners = [], [], [], []
        for idx in rng.permutation(len(train_set)):
            x, y, k = _training_items(cfg, ctx, train_set[idx], h0_all[idx], epoch, schedule)
            xs += x
            ys += y
            ks += k
            owners += [idx] * len(x)
        xs, ys, ks, owners = np.array(xs), np.array(ys), np.array(ks), np.array(owners)
        total, count = 0.0, 0
        for lo in range(0, len(xs), cfg.batch_size):
            sl = slice(lo, lo + cfg.batch_size)
            try:
                value, grads = tc.evaluate_with_gradients(program, model.params,
                                                          (xs[sl], fst_all[owners[sl]], ys[sl], ks[sl]))
            except FloatingPointError as exc:
                log.error("training diverged in epoch %d: %s", epoch + 1, exc)
                status = "diverged"
                break
            model.params, _ = adam_step(model.params, grads, state, lr)
            total += value * len(xs[sl])
            count += len(xs[sl])
        if status != "ok":
            break
        entry = {"epoch": epoch + 1, "loss": total / count, "lr": lr}
        history.append(entry)
        log.info("epoch %d loss %.6f lr %.3g", epoch + 1, entry["loss"], lr)
        if on_epoch is not None:
            on_epoch({**entry, "wall_ms": int(round(1000 * (time.perf_counter() - t0)))})

    return Checkpoint(cfg, model.params, ctx.encoder.params, asdict(ctx.encoder.cfg), state,
                      dataset.norm_stats, rng.bit_generator.state, history, status)


# ------------------------------------------------------------- inference

def predict(ckpt: Checkpoint, dataset: Dataset, split: str = "test", sampler: str = "strided", S: int = 5,
            N: int | None = None, seed: int | None = None, ctx: PoseContext | None = None,
            chunk: int = 1024, return_samples: bool = False):
    """Mean-aggregated 3D predictions in millimetres, one per sample of ``split``.

    ``sampler`` is "strided" (S steps) or "full" (all K steps); the regression
    baselines ignore it.
    """
    cfg = ckpt.config
    N = cfg.N if N is None else N
    seed = cfg.seed if seed is None else seed
    if ctx is None:
        adj = normalized_adjacency(dataset.skeleton.joint_count, dataset.skeleton.edges)
        ctx = PoseContext(dataset, adj, z_histogram(dataset, cfg.z_bins), ckpt.context_encoder(adj))
    samples = dataset.split(split)
    model = ckpt.model(ctx.adjacency)
    schedule = cfg.schedule
    hk = np.array([sample_hk(ctx.dist(s, cfg.z_source), trajectory_rng(seed, _TAG_INFER, s.id), N) for s in samples])
    fst = ctx.f_st(samples)
    flat_h = hk.reshape((-1,) + hk.shape[2:])
    flat_f = np.repeat(fst, N, axis=0)
    outs = []
    for lo in range(0, len(flat_h), chunk):
        h, f = flat_h[lo:lo + chunk], flat_f[lo:lo + chunk]
        if cfg.mode == "baseline_a":
            outs.append(model(h, f, cfg.K))
        elif cfg.mode == "baseline_b":
            outs.append(model(h, f))
        elif sampler == "full":
            outs.append(reverse_full(model, h, f, schedule))
        elif sampler == "strided":
            outs.append(reverse_strided(model, h, f, schedule, S))
        else:
            raise ValueError(f"unknown sampler '{sampler}'")
    per_sample = np.concatenate(outs).reshape(hk.shape)
    preds = np.array([aggregate_mean(x) for x in per_sample])
    preds_mm = dataset.norm_stats.denormalize(preds)
    if return_samples:
        return preds_mm, dataset.norm_stats.denormalize(per_sample), dataset.norm_stats.denormalize(hk)
    return preds_mm
