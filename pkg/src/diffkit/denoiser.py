"""GCN-attention denoiser, sinusoidal step embedding and the 2D-sequence context encoder."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .optim import AdamState, adam_step
from .tensorcore import Tensor

log = logging.getLogger(__name__)


def step_embedding(k, dim: int = 256) -> np.ndarray:
    """Sinusoidal code of step k: sin at even slots, cos at odd slots.

    ``k`` may be an int or an array of ints; the result has shape (..., dim).
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    k = np.asarray(k, dtype=np.float64)
    if np.any(k < 0):
        raise ValueError("diffusion step must be non-negative")
    freq = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    angle = k[..., None] * freq
    out = np.empty(k.shape + (dim,))
    out[..., 0::2] = np.sin(angle)
    out[..., 1::2] = np.cos(angle)
    return out


# --------------------------------------------------------------- layers

def gcn_layer(x, adj, W, b, activation: bool = True) -> Tensor:
    """GELU(A_hat @ X @ W + b); the output layer passes ``activation=False``."""
    x = tc.as_tensor(x)
    W = tc.as_tensor(W)
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"gcn_layer: input width {x.shape[-1]} does not match weight {W.shape}")
    if x.shape[-2] != tc.as_tensor(adj).shape[0]:
        raise ValueError(f"gcn_layer: {x.shape[-2]} joints but adjacency is {tc.as_tensor(adj).shape}")
    y = tc.add(tc.matmul(adj, tc.matmul(x, W)), b)
    return tc.gelu(y) if activation else y


def attention_weights(q, k) -> Tensor:
    scale = 1.0 / np.sqrt(q.shape[-1])
    return tc.softmax(tc.mul(tc.matmul(q, k, transpose_b=True), scale))


def self_attention(x, p: dict, prefix: str, heads: int) -> Tensor:
    """Multi-head attention over joints, then residual + layer norm."""
    x = tc.as_tensor(x)
    d = x.shape[-1]
    if d % heads:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    q = tc.add(tc.matmul(x, p[prefix + "q.W"]), p[prefix + "q.b"])
    k = tc.matmul(x, p[prefix + "k.W"])
    v = tc.add(tc.matmul(x, p[prefix + "v.W"]), p[prefix + "v.b"])
    outs = []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        w = attention_weights(tc.slice_(q, lo, hi), tc.slice_(k, lo, hi))
        outs.append(tc.matmul(w, tc.slice_(v, lo, hi)))
    o = tc.add(tc.matmul(tc.concat(outs, axis=-1), p[prefix + "o.W"]), p[prefix + "o.b"])
    return tc.layer_norm(tc.add(x, o), p[prefix + "ln.gamma"], p[prefix + "ln.beta"])


# ---------------------------------------------------------------- model

@dataclass
class DenoiserConfig:
    latent: int = 128    # start-layer width, E in J x latent
    context: int = 128   # f_ST width
    heads: int = 4
    blocks: int = 3

    @property
    def width(self) -> int:
        return self.latent + self.context


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _linear(p, rng, name, d_in, d_out):
    p[name + ".W"] = _uniform(rng, d_in, (d_in, d_out))
    p[name + ".b"] = _uniform(rng, d_in, (d_out,))


def init_denoiser(cfg: DenoiserConfig, rng: np.random.Generator, prefix: str = "") -> dict:
    p: dict = {}
    w = cfg.width
    _linear(p, rng, prefix + "start", 3, cfg.latent)
    for b in range(cfg.blocks):
        base = f"{prefix}block{b}."
        _linear(p, rng, base + "gcn1", w, w)
        _linear(p, rng, base + "gcn2", w, w)
        for name in ("q", "k", "v", "o"):
            _linear(p, rng, base + "attn." + name, w, w)
        # a key bias shifts every score in a row equally, which softmax ignores
        del p[base + "attn.k.b"]
        p[base + "attn.ln.gamma"] = np.ones(w)
        p[base + "attn.ln.beta"] = np.zeros(w)
    _linear(p, rng, prefix + "final", w, 3)
    return tc.param_set(p)


def denoiser_graph(p: dict, adj, h, f_st, f_d, cfg: DenoiserConfig, prefix: str = "") -> Tensor:
    """start GCN -> concat context -> add step code -> residual blocks -> output GCN."""
    e = gcn_layer(h, adj, p[prefix + "start.W"], p[prefix + "start.b"])
    f_st = tc.as_tensor(f_st)
    if f_st.shape[-2:] != e.shape[-2:-1] + (cfg.context,):
        raise ValueError(f"context feature shape {f_st.shape} incompatible with {e.shape[-2]} x {cfg.context}")
    if f_st.data.ndim < e.data.ndim:
        f_st = Tensor(np.broadcast_to(f_st.data, e.shape[:-1] + (cfg.context,)))
    x = tc.add(tc.concat([e, f_st], axis=-1), f_d)
    for b in range(cfg.blocks):
        base = f"{prefix}block{b}."
        y = gcn_layer(x, adj, p[base + "gcn1.W"], p[base + "gcn1.b"])
        y = gcn_layer(y, adj, p[base + "gcn2.W"], p[base + "gcn2.b"])
        y = self_attention(y, p, base + "attn.", cfg.heads)
        x = tc.add(x, y)
    return gcn_layer(x, adj, p[prefix + "final.W"], p[prefix + "final.b"], activation=False)


def step_code(k, cfg: DenoiserConfig, batch_shape=()) -> np.ndarray:
    """Step embedding shaped to broadcast over joints: (..., 1, width)."""
    code = step_embedding(k, cfg.width)
    if np.ndim(k) == 0 and batch_shape:
        code = np.broadcast_to(code, tuple(batch_shape) + (cfg.width,))
    return code[..., None, :]


class Denoiser:
    """Parameters plus the callable ``g(h, f_st, k)`` used by the samplers."""

    def __init__(self, cfg: DenoiserConfig, adjacency: np.ndarray, params: dict | None = None, seed: int = 0):
        self.cfg = cfg
        self.adjacency = np.asarray(adjacency, dtype=np.float64)
        self.params = params if params is not None else init_denoiser(cfg, np.random.default_rng(seed))

    @property
    def joints(self) -> int:
        return self.adjacency.shape[0]

    def forward(self, h, f_st, k) -> np.ndarray:
        h = np.asarray(h, dtype=np.float64)
        p = {name: Tensor(v) for name, v in self.params.items()}
        out = denoiser_graph(p, Tensor(self.adjacency), h, f_st, step_code(k, self.cfg, h.shape[:-2]), self.cfg)
        if not np.all(np.isfinite(out.data)):
            raise FloatingPointError("denoiser produced non-finite output")
        return out.data

    __call__ = forward


def denoise_step(params: dict, h_k, f_st, f_d, adjacency, cfg: DenoiserConfig | None = None) -> np.ndarray:
    """One application of g with an explicit step embedding ``f_d`` (width,) or (J, width)."""
    cfg = cfg or DenoiserConfig()
    p = {name: Tensor(v) for name, v in params.items()}
    out = denoiser_graph(p, Tensor(np.asarray(adjacency, dtype=float)), np.asarray(h_k, dtype=float),
                         f_st, np.asarray(f_d, dtype=float), cfg)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("denoiser produced non-finite output")
    return out.data


# ------------------------------------------------------- context encoder

@dataclass
class ContextConfig:
    hidden: int = 128
    out: int = 128
    z_bins: int = 0  # >0 enables the per-joint depth-bin head


def init_context(cfg: ContextConfig, rng: np.random.Generator) -> dict:
    p: dict = {}
    _linear(p, rng, "enc.gcn1", 2, cfg.hidden)
    _linear(p, rng, "enc.gcn2", cfg.hidden, cfg.out)
    _linear(p, rng, "head.reg", cfg.out, 3)
    if cfg.z_bins:
        _linear(p, rng, "head.zbin", cfg.out, cfg.z_bins)
    return tc.param_set(p)


def context_graph(p: dict, adj, seq) -> Tensor:
    """Per-frame two-layer GCN over (..., T, J, 2), mean-pooled over T."""
    seq = tc.as_tensor(seq)
    if seq.data.ndim < 3 or seq.shape[-3] == 0:
        raise ValueError("context encoder needs a non-empty (T, J, 2) sequence")
    x = gcn_layer(seq, adj, p["enc.gcn1.W"], p["enc.gcn1.b"])
    x = gcn_layer(x, adj, p["enc.gcn2.W"], p["enc.gcn2.b"])
    return tc.mean(x, axis=-3)


class ContextEncoder:
    def __init__(self, cfg: ContextConfig, adjacency, params: dict | None = None, seed: int = 0):
        self.cfg = cfg
        self.adjacency = np.asarray(adjacency, dtype=np.float64)
        self.params = params if params is not None else init_context(cfg, np.random.default_rng(seed))
        self.frozen = False
        self.history: list = []

    def encode(self, seq) -> np.ndarray:
        seq = np.asarray(seq, dtype=np.float64)
        if seq.ndim < 3 or seq.shape[-3] == 0:
            raise ValueError("context encoder needs a non-empty (T, J, 2) sequence")
        p = {k: Tensor(v) for k, v in self.params.items()}
        return context_graph(p, Tensor(self.adjacency), seq).data

    def zbin_probs(self, seq) -> np.ndarray:
        if not self.cfg.z_bins:
            raise ValueError("encoder was built without a depth-bin head")
        p = {k: Tensor(v) for k, v in self.params.items()}
        f = context_graph(p, Tensor(self.adjacency), np.asarray(seq, dtype=float))
        return tc.softmax(gcn_layer(f, self.adjacency, p["head.zbin.W"], p["head.zbin.b"], activation=False)).data

    def apply_gradients(self, grads: dict, state: AdamState, lr: float) -> None:
        if self.frozen:
            raise RuntimeError("context encoder is frozen; gradient updates are not allowed")
        self.params, _ = adam_step(self.params, grads, state, lr)

    def freeze(self) -> None:
        self.frozen = True


def encode_context(encoder: ContextEncoder, seq) -> np.ndarray:
    return encoder.encode(seq)


def pretrain_context(encoder: ContextEncoder, seqs, targets, epochs: int = 5, lr: float = 1e-3,
                     batch_size: int = 256, seed: int = 0, zbin_targets=None) -> ContextEncoder:
    """Fit encoder + regression head to normalized 3D poses, then freeze the encoder.

    ``seqs`` is (n, T, J, 2), ``targets`` (n, J, 3). With a depth-bin head,
    ``zbin_targets`` (n, J) holds the bin index per joint (-1 to skip a joint).
    """
    seqs = np.asarray(seqs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    adj = Tensor(encoder.adjacency)
    state = AdamState()
    rng = np.random.default_rng(seed)
    n = len(seqs)

    def program(p, inputs):
        x, y, zb = inputs
        f = context_graph(p, adj, x)
        pred = gcn_layer(f, adj, p["head.reg.W"], p["head.reg.b"], activation=False)
        loss = tc.mul(tc.sum_squares(tc.add(pred, tc.mul(y, -1.0))), 1.0 / y.size)
        if zb is not None:
            probs = tc.softmax(gcn_layer(f, adj, p["head.zbin.W"], p["head.zbin.b"], activation=False))
            mask = (zb >= 0)[..., None]
            onehot = np.zeros(probs.shape)
            np.put_along_axis(onehot, np.maximum(zb, 0)[..., None], 1.0, axis=-1)
            diff = tc.mul(tc.add(probs, -onehot), mask.astype(float))
            loss = tc.add(loss, tc.mul(tc.sum_squares(diff), 1.0 / max(mask.sum(), 1)))
        return loss

    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            zb = None if zbin_targets is None else np.asarray(zbin_targets)[idx]
            value, grads = tc.evaluate_with_gradients(program, encoder.params, (seqs[idx], targets[idx], zb))
            encoder.apply_gradients(grads, state, lr)
            total += value * len(idx)
        encoder.history.append(total / n)
        log.info("context pretrain epoch %d loss %.6f", epoch + 1, total / n)
    encoder.params = {k: v for k, v in encoder.params.items() if not k.startswith("head.reg.")}
    encoder.freeze()
    return encoder
