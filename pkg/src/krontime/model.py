"""Patch-based transformer classifier with Kronecker-decomposed attention.

Each channel of a ``(batch, channels, length)`` input is cut into patches,
embedded, and run through a shared encoder stack. Token sequences are padded
up to the plan length; pad keys are masked inside attention and pad tokens
are left out of the mean pooling, so padding never reaches the logits. The
pooled per-channel features are concatenated and fed to a linear head.

Forward and backward are written out by hand; :meth:`KronTimeModel.forward`
returns a cache that :meth:`KronTimeModel.backward` consumes.
"""

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from krontime.attention import (
    AttentionConfig,
    DecompositionPlan,
    kron_attention_backward,
    kron_attention_forward,
)
from krontime.layers import (
    gelu,
    gelu_backward,
    layer_norm,
    layer_norm_backward,
    linear,
    linear_backward,
)

CHECKPOINT_VERSION = 1


def token_count(length, patch_len, stride):
    if length < patch_len:
        raise ValueError(f"series length {length} is shorter than patch_len {patch_len}")
    return (length - patch_len) // stride + 1


def patchify(series, patch_len, stride):
    """Cut ``(..., L)`` series into ``(..., T, patch_len)`` tokens."""
    series = np.asarray(series)
    T = token_count(series.shape[-1], patch_len, stride)
    windows = np.lib.stride_tricks.sliding_window_view(series, patch_len, axis=-1)
    return np.ascontiguousarray(windows[..., : (T - 1) * stride + 1 : stride, :])


def pad_tokens(tokens, n_tokens):
    """Zero-pad the token axis up to ``n_tokens``; returns (padded, effective)."""
    T = tokens.shape[-2]
    if T > n_tokens:
        raise ValueError(f"{T} tokens do not fit a plan of length {n_tokens}")
    if T == n_tokens:
        return tokens, T
    pad = [(0, 0)] * tokens.ndim
    pad[-2] = (0, n_tokens - T)
    return np.pad(tokens, pad), T


@dataclass
class ModelConfig:
    n_channels: int
    n_classes: int
    series_len: int
    plan: DecompositionPlan
    patch_len: int = 8
    stride: int = 0
    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 1
    d_ff: int = 64
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.plan, dict):
            self.plan = DecompositionPlan(
                tuple(self.plan["factors"]),
                tuple(self.plan["update_order"]),
                self.plan["factor_mode"],
            )
        if not self.stride:
            self.stride = self.patch_len
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        for name in ("n_channels", "n_classes", "patch_len", "stride", "d_model", "n_layers", "d_ff"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_tokens > self.plan.seq_len:
            raise ValueError(
                f"{self.n_tokens} tokens exceed plan {self.plan.label()} "
                f"(length {self.plan.seq_len})"
            )

    @property
    def n_tokens(self):
        return token_count(self.series_len, self.patch_len, self.stride)

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    def to_dict(self):
        out = asdict(self)
        out["plan"] = {
            "factors": list(self.plan.factors),
            "update_order": list(self.plan.update_order),
            "factor_mode": self.plan.factor_mode,
        }
        return out


def param_shapes(cfg):
    """Ordered ``name -> shape`` map of every learned tensor."""
    D, F = cfg.d_model, cfg.d_ff
    shapes = {
        "embed.W": (cfg.patch_len, D),
        "embed.b": (D,),
        "embed.pos": (cfg.plan.seq_len, D),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "ln1.g": (D,), p + "ln1.b": (D,),
            p + "Wq": (D, D), p + "bq": (D,),
            p + "Wk": (D, D), p + "bk": (D,),
            p + "Wv": (D, D), p + "bv": (D,),
            p + "Wo": (D, D), p + "bo": (D,),
            p + "ln2.g": (D,), p + "ln2.b": (D,),
            p + "W1": (D, F), p + "b1": (F,),
            p + "W2": (F, D), p + "b2": (D,),
        })
    shapes["norm.g"] = (D,)
    shapes["norm.b"] = (D,)
    shapes["head.W"] = (cfg.n_channels * D, cfg.n_classes)
    shapes["head.b"] = (cfg.n_classes,)
    return shapes


def init_params(cfg, seed=0):
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit norm gains,
    N(0, 0.02) positional table. Deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(cfg.dtype)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "pos":
            value = rng.normal(0.0, 0.02, size=shape)
        elif leaf == "g":
            value = np.ones(shape)
        elif len(shape) == 2:
            bound = 1.0 / math.sqrt(shape[0])
            value = rng.uniform(-bound, bound, size=shape)
        else:
            value = np.zeros(shape)
        params[name] = value.astype(dtype)
    return params


def head_forward(pooled, W, b):
    return linear(pooled, W, b)


class KronTimeModel:
    def __init__(self, cfg, params=None, seed=0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        expected = param_shapes(cfg)
        if set(self.params) != set(expected):
            raise ValueError("parameter names do not match the model config")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: expected {shape}, got {self.params[name].shape}")

    @property
    def n_params(self):
        return sum(p.size for p in self.params.values())

    def tokens(self, x):
        """``(B, C, L)`` series -> padded ``(B*C, N, P)`` tokens and valid mask."""
        cfg = self.cfg
        x = np.asarray(x, dtype=cfg.dtype)
        if x.ndim != 3:
            raise ValueError(f"expected (batch, channels, length) input, got {x.shape}")
        if x.shape[1] != cfg.n_channels:
            raise ValueError(f"model has {cfg.n_channels} channels, input has {x.shape[1]}")
        tok = patchify(x, cfg.patch_len, cfg.stride)
        tok, T = pad_tokens(tok, cfg.plan.seq_len)
        valid = np.arange(cfg.plan.seq_len) < T
        return tok.reshape(-1, *tok.shape[-2:]), valid

    def forward(self, x, return_cache=False):
        tok, valid = self.tokens(x)
        logits, cache = self.forward_tokens(tok, valid, batch=x.shape[0])
        return (logits, cache) if return_cache else logits

    __call__ = forward

    def forward_tokens(self, tok, valid, batch):
        cfg, P = self.cfg, self.params
        S, N, _ = tok.shape
        H, dh = cfg.n_heads, cfg.head_dim
        att_cfg = AttentionConfig(key_valid=valid) if not valid.all() else AttentionConfig()

        h = linear(tok, P["embed.W"], P["embed.b"]) + P["embed.pos"]
        layer_caches = []
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            c = {"h_in": h}
            u, c["ln1"] = layer_norm(h, P[p + "ln1.g"], P[p + "ln1.b"])
            c["u"] = u
            heads = []
            for w in "qkv":
                z = linear(u, P[p + "W" + w], P[p + "b" + w])
                heads.append(z.reshape(S, N, H, dh).transpose(0, 2, 1, 3))
            o, c["attn"] = kron_attention_forward(*heads, cfg.plan, att_cfg, return_cache=True)
            o = o.transpose(0, 2, 1, 3).reshape(S, N, cfg.d_model)
            c["o"] = o
            h = h + linear(o, P[p + "Wo"], P[p + "bo"])
            c["h_mid"] = h
            u2, c["ln2"] = layer_norm(h, P[p + "ln2.g"], P[p + "ln2.b"])
            c["u2"] = u2
            z = linear(u2, P[p + "W1"], P[p + "b1"])
            c["z"] = z
            gz = gelu(z)
            c["gz"] = gz
            h = h + linear(gz, P[p + "W2"], P[p + "b2"])
            layer_caches.append(c)

        hn, ln_cache = layer_norm(h, P["norm.g"], P["norm.b"])
        w = (valid / valid.sum()).astype(hn.dtype)
        pooled = np.einsum("snd,n->sd", hn, w)
        feats = pooled.reshape(batch, cfg.n_channels * cfg.d_model)
        logits = head_forward(feats, P["head.W"], P["head.b"])
        cache = {
            "tok": tok, "w": w, "layers": layer_caches, "h_final": h,
            "ln_final": ln_cache, "feats": feats, "shape": (S, N),
        }
        return logits, cache

    def backward(self, dlogits, cache):
        """Gradients of a scalar loss for every parameter, given dL/dlogits."""
        cfg, P = self.cfg, self.params
        S, N = cache["shape"]
        H, dh, D = cfg.n_heads, cfg.head_dim, cfg.d_model
        grads = {}

        dfeats, grads["head.W"], grads["head.b"] = linear_backward(
            dlogits, cache["feats"], P["head.W"]
        )
        dpooled = dfeats.reshape(S, D)
        dhn = dpooled[:, None, :] * cache["w"][None, :, None]
        dh_, grads["norm.g"], grads["norm.b"] = layer_norm_backward(
            dhn, cache["ln_final"], P["norm.g"]
        )

        for i in reversed(range(cfg.n_layers)):
            p = f"layers.{i}."
            c = cache["layers"][i]
            dgz, grads[p + "W2"], grads[p + "b2"] = linear_backward(dh_, c["gz"], P[p + "W2"])
            dz = gelu_backward(dgz, c["z"])
            du2, grads[p + "W1"], grads[p + "b1"] = linear_backward(dz, c["u2"], P[p + "W1"])
            dx, grads[p + "ln2.g"], grads[p + "ln2.b"] = layer_norm_backward(
                du2, c["ln2"], P[p + "ln2.g"]
            )
            dh_ = dh_ + dx

            do, grads[p + "Wo"], grads[p + "bo"] = linear_backward(dh_, c["o"], P[p + "Wo"])
            do = do.reshape(S, N, H, dh).transpose(0, 2, 1, 3)
            dheads = kron_attention_backward(do, c["attn"])
            du = np.zeros_like(c["u"])
            for w, dzh in zip("qkv", dheads):
                dzh = dzh.transpose(0, 2, 1, 3).reshape(S, N, D)
                dui, grads[p + "W" + w], grads[p + "b" + w] = linear_backward(
                    dzh, c["u"], P[p + "W" + w]
                )
                du += dui
            dx, grads[p + "ln1.g"], grads[p + "ln1.b"] = layer_norm_backward(
                du, c["ln1"], P[p + "ln1.g"]
            )
            dh_ = dh_ + dx

        grads["embed.pos"] = dh_.sum(axis=0)
        _, grads["embed.W"], grads["embed.b"] = linear_backward(
            dh_, cache["tok"], P["embed.W"]
        )
        return {k: np.asarray(v, dtype=P[k].dtype) for k, v in grads.items()}

    def predict(self, x, batch_size=64):
        out = [self.forward(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)


def save_checkpoint(path, model, extra=None):
    """Write config and parameters to a single ``.npz`` container."""
    meta = {
        "format": "krontime-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("format") != "krontime-checkpoint":
            raise ValueError(f"{path} is not a krontime checkpoint")
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        params = {k[len("param/"):]: data[k].copy() for k in data.files if k.startswith("param/")}
    cfg = ModelConfig(**meta["config"])
    return KronTimeModel(cfg, params), meta.get("extra", {})
