"""Miniature post-LN Transformer encoder with an MLM head.

Parameters are stored as float32; all math runs in float64 so analytic
gradients can be checked against finite differences directly. Ordering per
layer is post-LN: sublayer -> residual add -> LayerNorm, for both the
attention and feed-forward sublayers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from ..checkpoint import Checkpoint, TensorRecord
from ..errors import NumericError
from ..schema import ModelSchema, mini_templates

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int
    hidden_dim: int
    num_heads: int
    ff_dim: int
    vocab_size: int
    max_seq_len: int
    ln_eps: float = 1e-12
    type_vocab_size: int = 2

    def __post_init__(self):
        if min(self.num_layers, self.hidden_dim, self.num_heads, self.ff_dim,
               self.vocab_size, self.max_seq_len) <= 0:
            raise ValueError("all encoder dimensions must be positive")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError("num_heads must divide hidden_dim")
        if self.ln_eps <= 0:
            raise ValueError("ln_eps must be positive")

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @classmethod
    def from_json(cls, payload: str) -> "EncoderConfig":
        return cls(**json.loads(payload))


def parameter_names(config: EncoderConfig) -> list[str]:
    names = [
        "embeddings.token", "embeddings.position", "embeddings.token_type",
        "embeddings.ln.gamma", "embeddings.ln.beta",
        "mlm.weight", "mlm.bias",
    ]
    for i in range(config.num_layers):
        p = f"layer.{i}."
        names += [
            p + "attn.q.weight", p + "attn.q.bias",
            p + "attn.k.weight", p + "attn.k.bias",
            p + "attn.v.weight", p + "attn.v.bias",
            p + "attn.out.weight", p + "attn.out.bias",
            p + "attn.ln.gamma", p + "attn.ln.beta",
            p + "ff.in.weight", p + "ff.in.bias",
            p + "ff.out.weight", p + "ff.out.bias",
            p + "ln.gamma", p + "ln.beta",
        ]
    return names


def _shape_for(name: str, c: EncoderConfig) -> tuple[int, ...]:
    m, ff, V = c.hidden_dim, c.ff_dim, c.vocab_size
    table = {
        "embeddings.token": (V, m),
        "embeddings.position": (c.max_seq_len, m),
        "embeddings.token_type": (c.type_vocab_size, m),
        "embeddings.ln.gamma": (m,),
        "embeddings.ln.beta": (m,),
        "mlm.weight": (m, V),
        "mlm.bias": (V,),
    }
    if name in table:
        return table[name]
    leaf = name.split(".", 2)[2]
    per_layer = {
        "attn.q.weight": (m, m), "attn.q.bias": (m,),
        "attn.k.weight": (m, m), "attn.k.bias": (m,),
        "attn.v.weight": (m, m), "attn.v.bias": (m,),
        "attn.out.weight": (m, m), "attn.out.bias": (m,),
        "attn.ln.gamma": (m,), "attn.ln.beta": (m,),
        "ff.in.weight": (m, ff), "ff.in.bias": (ff,),
        "ff.out.weight": (ff, m), "ff.out.bias": (m,),
        "ln.gamma": (m,), "ln.beta": (m,),
    }
    return per_layer[leaf]


@dataclass
class EncoderParams:
    """Named parameter tensors; weights apply as x @ W + b."""

    config: EncoderConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def to_checkpoint(self) -> Checkpoint:
        tensors = {
            name: TensorRecord.from_array(name, arr, dtype="F32")
            for name, arr in self.tensors.items()
        }
        return Checkpoint(tensors=tensors, metadata={"encoder_config": self.config.to_json()})

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, config: EncoderConfig | None = None) -> "EncoderParams":
        if config is None:
            payload = checkpoint.metadata.get("encoder_config")
            if payload is None:
                raise ValueError("checkpoint lacks encoder_config metadata; pass config explicitly")
            config = EncoderConfig.from_json(payload)
        tensors = {}
        for name in parameter_names(config):
            if name not in checkpoint:
                raise ValueError(f"checkpoint missing parameter {name!r}")
            tensors[name] = checkpoint[name].as_array()
        return cls(config, tensors)


def mini_schema(config: EncoderConfig) -> ModelSchema:
    return ModelSchema(
        hidden_dim=config.hidden_dim,
        num_layers=config.num_layers,
        ln_position="post_ln",
        ln_eps=config.ln_eps,
        component_templates=mini_templates(),
        dense_out_axis=1,
        ff_dim=config.ff_dim,
    )


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape) * std
    bad = np.abs(x) > 2.0 * std
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(x) > 2.0 * std
    return x.astype(np.float32)


def init_params(config: EncoderConfig, seed: int = 0, init_std: float = 0.02) -> EncoderParams:
    """Truncated-normal matrices, gamma=1 / beta=0 LayerNorms, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name in parameter_names(config):
        shape = _shape_for(name, config)
        if name.endswith((".gamma",)):
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith((".beta", ".bias")):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            tensors[name] = _trunc_normal(rng, shape, init_std)
    return EncoderParams(config, tensors)


# ---------------------------------------------------------------------------
# LayerNorm


def layer_norm_forward(x, gamma, beta, eps: float):
    """Normalize over the last axis, then apply the learned scale-shift."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("layer_norm_forward: non-finite input")
    if eps <= 0:
        raise ValueError("eps must be positive")
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    return gamma * xhat + beta


def _ln_forward_cached(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, gamma)


def _ln_backward(dy, cache):
    xhat, inv_std, gamma = cache
    dxhat = dy * gamma
    dgamma = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    dbeta = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# Activation


def _gelu_cdf(x):
    return 0.5 * (1.0 + erf(x / _SQRT2))


def _gelu(x, cdf=None):
    return x * (_gelu_cdf(x) if cdf is None else cdf)


def _gelu_grad(x, cdf=None):
    if cdf is None:
        cdf = _gelu_cdf(x)
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Forward


def _p64(params: EncoderParams) -> dict[str, np.ndarray]:
    return {k: v.astype(np.float64) for k, v in params.tensors.items()}


def _forward(p: dict, config: EncoderConfig, token_ids, attention_mask=None, token_type_ids=None,
             want_cache: bool = False):
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    B, T = ids.shape
    if T > config.max_seq_len:
        raise ValueError(f"sequence length {T} exceeds max_seq_len {config.max_seq_len}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ValueError("token id out of vocabulary range")
    if attention_mask is None:
        attention_mask = np.ones((B, T), dtype=np.float64)
    else:
        attention_mask = np.asarray(attention_mask, dtype=np.float64)
    if token_type_ids is None:
        token_type_ids = np.zeros((B, T), dtype=np.int64)

    h = config.num_heads
    dh = config.hidden_dim // h
    scale = 1.0 / np.sqrt(dh)
    # Large negative bias removes padded keys from the softmax.
    mask_bias = (attention_mask[:, None, None, :] - 1.0) * 1e9

    emb = (p["embeddings.token"][ids]
           + p["embeddings.position"][np.arange(T)][None, :, :]
           + p["embeddings.token_type"][token_type_ids])
    x, ln_emb_cache = _ln_forward_cached(emb, p["embeddings.ln.gamma"], p["embeddings.ln.beta"],
                                         config.ln_eps)

    hidden_states = [x]
    layer_caches = []
    for i in range(config.num_layers):
        pre = f"layer.{i}."
        q = x @ p[pre + "attn.q.weight"] + p[pre + "attn.q.bias"]
        k = x @ p[pre + "attn.k.weight"] + p[pre + "attn.k.bias"]
        v = x @ p[pre + "attn.v.weight"] + p[pre + "attn.v.bias"]
        qh = q.reshape(B, T, h, dh).transpose(0, 2, 1, 3)
        kh = k.reshape(B, T, h, dh).transpose(0, 2, 1, 3)
        vh = v.reshape(B, T, h, dh).transpose(0, 2, 1, 3)
        scores = qh @ kh.transpose(0, 1, 3, 2) * scale + mask_bias
        probs = _softmax(scores)
        ctx = (probs @ vh).transpose(0, 2, 1, 3).reshape(B, T, config.hidden_dim)
        attn_out = ctx @ p[pre + "attn.out.weight"] + p[pre + "attn.out.bias"]
        h1, ln1_cache = _ln_forward_cached(x + attn_out, p[pre + "attn.ln.gamma"],
                                           p[pre + "attn.ln.beta"], config.ln_eps)
        a1 = h1 @ p[pre + "ff.in.weight"] + p[pre + "ff.in.bias"]
        cdf1 = _gelu_cdf(a1)
        g1 = _gelu(a1, cdf1)
        ff_out = g1 @ p[pre + "ff.out.weight"] + p[pre + "ff.out.bias"]
        h2, ln2_cache = _ln_forward_cached(h1 + ff_out, p[pre + "ln.gamma"],
                                           p[pre + "ln.beta"], config.ln_eps)
        hidden_states.append(h2)
        if want_cache:
            layer_caches.append({
                "x": x, "qh": qh, "kh": kh, "vh": vh, "probs": probs, "ctx": ctx,
                "ln1": ln1_cache, "h1": h1, "a1": a1, "cdf1": cdf1, "g1": g1, "ln2": ln2_cache,
            })
        x = h2

    cache = None
    if want_cache:
        cache = {"ids": ids, "token_type_ids": token_type_ids, "ln_emb": ln_emb_cache,
                 "layers": layer_caches, "B": B, "T": T, "scale": scale}
    return hidden_states, cache


def encoder_forward(params: EncoderParams, token_ids, attention_mask=None, token_type_ids=None
                    ) -> list[np.ndarray]:
    """Per-layer hidden states: L+1 matrices including the embedding output."""
    hidden_states, _ = _forward(_p64(params), params.config, token_ids,
                                attention_mask, token_type_ids)
    return hidden_states


# ---------------------------------------------------------------------------
# Loss and gradients


def _mlm_head(p, hidden, labels):
    """Mean cross-entropy (natural log) over labeled positions.

    labels: int array shaped like token_ids with -1 at unlabeled positions.
    """
    labeled = labels >= 0
    n = int(labeled.sum())
    if n == 0:
        raise ValueError("mlm_loss: batch contains no masked positions")
    h = hidden[labeled]  # [n, m]
    logits = h @ p["mlm.weight"] + p["mlm.bias"]
    logits = logits - logits.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(logits).sum(axis=-1))
    target = labels[labeled]
    loss = float(np.mean(logsumexp - logits[np.arange(n), target]))
    return loss, labeled, logits, target, n


def mlm_loss(params: EncoderParams, token_ids, labels, attention_mask=None) -> float:
    """Cross-entropy of the true tokens at labeled (masked) positions."""
    p = _p64(params)
    hidden_states, _ = _forward(p, params.config, token_ids, attention_mask)
    labels = np.atleast_2d(np.asarray(labels, dtype=np.int64))
    loss, *_ = _mlm_head(p, hidden_states[-1], labels)
    return loss


def mlm_loss_and_grads(params: EncoderParams, token_ids, labels, attention_mask=None
                       ) -> tuple[float, dict[str, np.ndarray]]:
    """Loss plus analytic gradients for every parameter tensor."""
    config = params.config
    p = _p64(params)
    hidden_states, cache = _forward(p, config, token_ids, attention_mask, want_cache=True)
    labels = np.atleast_2d(np.asarray(labels, dtype=np.int64))
    loss, labeled, logits, target, n = _mlm_head(p, hidden_states[-1], labels)

    grads = {name: np.zeros_like(arr) for name, arr in p.items()}
    B, T = cache["B"], cache["T"]
    m = config.hidden_dim
    h_heads = config.num_heads
    dh = m // h_heads
    scale = cache["scale"]

    probs_out = _softmax(logits)
    dlogits = probs_out
    dlogits[np.arange(n), target] -= 1.0
    dlogits /= n

    h_last = hidden_states[-1][labeled]
    grads["mlm.weight"] = h_last.T @ dlogits
    grads["mlm.bias"] = dlogits.sum(axis=0)
    dx = np.zeros((B, T, m), dtype=np.float64)
    dx[labeled] = dlogits @ p["mlm.weight"].T

    for i in reversed(range(config.num_layers)):
        pre = f"layer.{i}."
        c = cache["layers"][i]
        # output LayerNorm
        d_res2, dgamma2, dbeta2 = _ln_backward(dx, c["ln2"])
        grads[pre + "ln.gamma"] = dgamma2
        grads[pre + "ln.beta"] = dbeta2
        # feed-forward branch
        d_ff_out = d_res2
        grads[pre + "ff.out.weight"] = c["g1"].reshape(-1, config.ff_dim).T @ d_ff_out.reshape(-1, m)
        grads[pre + "ff.out.bias"] = d_ff_out.sum(axis=(0, 1))
        dg1 = d_ff_out @ p[pre + "ff.out.weight"].T
        da1 = dg1 * _gelu_grad(c["a1"], c["cdf1"])
        grads[pre + "ff.in.weight"] = c["h1"].reshape(-1, m).T @ da1.reshape(-1, config.ff_dim)
        grads[pre + "ff.in.bias"] = da1.sum(axis=(0, 1))
        dh1 = d_res2 + da1 @ p[pre + "ff.in.weight"].T
        # attention LayerNorm
        d_res1, dgamma1, dbeta1 = _ln_backward(dh1, c["ln1"])
        grads[pre + "attn.ln.gamma"] = dgamma1
        grads[pre + "attn.ln.beta"] = dbeta1
        # attention output projection
        d_attn_out = d_res1
        grads[pre + "attn.out.weight"] = c["ctx"].reshape(-1, m).T @ d_attn_out.reshape(-1, m)
        grads[pre + "attn.out.bias"] = d_attn_out.sum(axis=(0, 1))
        dctx = (d_attn_out @ p[pre + "attn.out.weight"].T).reshape(B, T, h_heads, dh).transpose(0, 2, 1, 3)
        # attention core
        dprobs = dctx @ c["vh"].transpose(0, 1, 3, 2)
        dvh = c["probs"].transpose(0, 1, 3, 2) @ dctx
        dscores = c["probs"] * (dprobs - np.sum(dprobs * c["probs"], axis=-1, keepdims=True))
        dqh = dscores @ c["kh"] * scale
        dkh = dscores.transpose(0, 1, 3, 2) @ c["qh"] * scale
        dq = dqh.transpose(0, 2, 1, 3).reshape(B, T, m)
        dk = dkh.transpose(0, 2, 1, 3).reshape(B, T, m)
        dv = dvh.transpose(0, 2, 1, 3).reshape(B, T, m)
        x_flat = c["x"].reshape(-1, m)
        grads[pre + "attn.q.weight"] = x_flat.T @ dq.reshape(-1, m)
        grads[pre + "attn.q.bias"] = dq.sum(axis=(0, 1))
        grads[pre + "attn.k.weight"] = x_flat.T @ dk.reshape(-1, m)
        grads[pre + "attn.k.bias"] = dk.sum(axis=(0, 1))
        grads[pre + "attn.v.weight"] = x_flat.T @ dv.reshape(-1, m)
        grads[pre + "attn.v.bias"] = dv.sum(axis=(0, 1))
        dx = (d_res1
              + dq @ p[pre + "attn.q.weight"].T
              + dk @ p[pre + "attn.k.weight"].T
              + dv @ p[pre + "attn.v.weight"].T)

    # embedding LayerNorm and tables
    demb, dgamma_e, dbeta_e = _ln_backward(dx, cache["ln_emb"])
    grads["embeddings.ln.gamma"] = dgamma_e
    grads["embeddings.ln.beta"] = dbeta_e
    ids = cache["ids"]
    np.add.at(grads["embeddings.token"], ids.reshape(-1), demb.reshape(-1, m))
    grads["embeddings.position"][:T] = demb.sum(axis=0)
    np.add.at(grads["embeddings.token_type"], cache["token_type_ids"].reshape(-1), demb.reshape(-1, m))
    return loss, grads
