"""Decoder-only causal transformer with hand-written reverse-mode gradients.

Pre-norm residual blocks, learned absolute positions plus an additive
segment (modality) embedding, untied output projection, zero dropout.
Everything runs in the dtype of the parameter tensors: float32 for
training, float64 for gradient checking. Attention probabilities are
recomputed during the backward pass instead of cached, which caps memory
at long sequence lengths.

The layout of a forward pass, per layer:

    a  = layernorm(x) ; q,k,v = a Wq, a Wk, a Wv
    y  = softmax(q k^T / sqrt(hd) + causal) v Wo ; x = x + y
    h  = layernorm(x) ; x = x + gelu(h W1) W2

then a final layernorm and the vocabulary projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, DataError, LengthError
from .vocab import N_SEGMENTS, VocabLayout

LN_EPS = 1e-5
_GELU_A = 1.702  # sigmoid-approximation slope
# Cache attention probabilities for backward when the [B,H,S,S] tensor stays
# under this many elements per layer; recompute otherwise to bound memory.
_PROB_CACHE_ELEMS = 32_000_000


@dataclass(frozen=True)
class ModelConfig:
    vocab: VocabLayout
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 2048

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if min(self.d_model, self.n_layers, self.n_heads,
               self.d_ff, self.max_seq_len) < 1:
            raise ConfigError("model dims must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {"d_model": self.d_model, "n_layers": self.n_layers,
                "n_heads": self.n_heads, "d_ff": self.d_ff,
                "max_seq_len": self.max_seq_len,
                "vocab": self.vocab.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        vocab = VocabLayout.from_dict(d.pop("vocab"))
        return cls(vocab=vocab, **d)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Declared tensor order; checkpoints serialize in exactly this order."""
    d, dff, v = cfg.d_model, cfg.d_ff, cfg.vocab.total
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (v, d),
        "pos_emb": (cfg.max_seq_len, d),
        "seg_emb": (N_SEGMENTS, d),
    }
    for i in range(cfg.n_layers):
        p = f"l{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        shapes[p + "wq"] = (d, d)
        shapes[p + "wk"] = (d, d)
        shapes[p + "wv"] = (d, d)
        shapes[p + "wo"] = (d, d)
        shapes[p + "bq"] = (d,)
        shapes[p + "bk"] = (d,)
        shapes[p + "bv"] = (d,)
        shapes[p + "bo"] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "w1"] = (d, dff)
        shapes[p + "b1"] = (dff,)
        shapes[p + "w2"] = (dff, d)
        shapes[p + "b2"] = (d,)
    shapes["lnf.g"] = (d,)
    shapes["lnf.b"] = (d,)
    shapes["wout"] = (d, v)
    shapes["bout"] = (v,)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def init_params(cfg: ModelConfig, seed: int,
                dtype=np.float32) -> dict[str, np.ndarray]:
    """Scaled-normal init: std 0.02, residual-out projections divided by
    sqrt(2 * n_layers), biases zero, layernorm identity. Draws always happen
    in float64 so float32 and float64 modes share one stream."""
    rng = np.random.Generator(np.random.Philox(key=seed & ((1 << 64) - 1)))
    resid = {f"l{i}.{n}" for i in range(cfg.n_layers) for n in ("wo", "w2")}
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.split(".")[-1]
        if leaf == "g":
            t = np.ones(shape)
        elif leaf.startswith("b"):
            t = np.zeros(shape)
        else:
            std = 0.02 / math.sqrt(2 * cfg.n_layers) if name in resid else 0.02
            t = rng.standard_normal(shape) * std
        params[name] = t.astype(dtype)
    return params


def zeros_like_params(params) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


_MASK_CACHE: dict[str, np.ndarray] = {}


def _causal_mask(s: int, dtype) -> np.ndarray:
    # One grow-only mask per dtype; smaller lengths slice it as a view.
    key = np.dtype(dtype).name
    m = _MASK_CACHE.get(key)
    if m is None or m.shape[0] < s:
        m = np.triu(np.full((s, s), -np.inf, dtype=dtype), k=1)
        _MASK_CACHE[key] = m
    return m[:s, :s]


def _layernorm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layernorm_bwd(dy, cache, g):
    xhat, inv = cache
    dxhat = dy * g
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    n = xhat.shape[-1]
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    del n
    return dx, dg, db


def _sigmoid(z):
    # exp overflow for very negative inputs resolves to exactly 0.
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def _gelu(x):
    """Sigmoid-form GELU: x * sigmoid(1.702 x). Smooth, one exp per element."""
    return x * _sigmoid(_GELU_A * x)


def _gelu_grad(x):
    s = _sigmoid(_GELU_A * x)
    return s * (1.0 + _GELU_A * x * (1.0 - s))


def _split_heads(x, n_heads):
    b, s, d = x.shape
    return x.reshape(b, s, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, s, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * hd)


def _attention_probs(q, k, dtype):
    """softmax(q k^T / sqrt(hd) + causal mask), recomputable.

    q is scaled before the big matmul (cheaper than scaling the S x S
    scores) and the softmax runs in place on the score tensor.
    """
    s = q.shape[2]
    att = np.matmul(q * (1.0 / math.sqrt(q.shape[-1])), k.swapaxes(-1, -2))
    att += _causal_mask(s, dtype)
    att -= att.max(axis=-1, keepdims=True)
    np.exp(att, out=att)
    att /= att.sum(axis=-1, keepdims=True)
    return att


def _check_ids(ids, cfg: ModelConfig):
    if ids.shape[-1] > cfg.max_seq_len:
        raise LengthError(
            f"sequence length {ids.shape[-1]} exceeds {cfg.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab.total):
        raise DataError("token id outside vocabulary")


def forward_batch(params, cfg: ModelConfig, ids: np.ndarray,
                  segs: np.ndarray, want_cache: bool = False):
    """Logits [B, S, V] for right-padded id/segment batches.

    Padding is safe without an explicit pad mask: the causal mask keeps real
    positions from attending to later pads, and pad logits carry no loss.
    """
    ids = np.asarray(ids, dtype=np.int64)
    segs = np.asarray(segs, dtype=np.int64)
    _check_ids(ids, cfg)
    dtype = params["tok_emb"].dtype
    b, s = ids.shape
    x = (params["tok_emb"][ids]
         + params["pos_emb"][:s][None, :, :]
         + params["seg_emb"][segs])
    layer_caches = []
    for i in range(cfg.n_layers):
        p = f"l{i}."
        a, ln1c = _layernorm_fwd(x, params[p + "ln1.g"], params[p + "ln1.b"])
        a2 = a.reshape(b * s, -1)
        q = _split_heads((a2 @ params[p + "wq"] + params[p + "bq"])
                         .reshape(b, s, -1), cfg.n_heads)
        k = _split_heads((a2 @ params[p + "wk"] + params[p + "bk"])
                         .reshape(b, s, -1), cfg.n_heads)
        v = _split_heads((a2 @ params[p + "wv"] + params[p + "bv"])
                         .reshape(b, s, -1), cfg.n_heads)
        probs = _attention_probs(q, k, dtype)
        o = _merge_heads(np.matmul(probs, v))
        keep_probs = want_cache and probs.size <= _PROB_CACHE_ELEMS
        if not keep_probs:
            probs = None
        y = (o.reshape(b * s, -1) @ params[p + "wo"]
             + params[p + "bo"]).reshape(b, s, -1)
        x1 = x + y
        h_in, ln2c = _layernorm_fwd(x1, params[p + "ln2.g"],
                                    params[p + "ln2.b"])
        u = (h_in.reshape(b * s, -1) @ params[p + "w1"]
             + params[p + "b1"]).reshape(b, s, -1)
        hg = _gelu(u)
        m = (hg.reshape(b * s, -1) @ params[p + "w2"]
             + params[p + "b2"]).reshape(b, s, -1)
        x2 = x1 + m
        if want_cache:
            layer_caches.append(
                {"x": x, "a": a, "ln1": ln1c, "q": q, "k": k, "v": v,
                 "probs": probs, "o": o, "x1": x1, "h_in": h_in,
                 "ln2": ln2c, "u": u, "hg": hg})
        x = x2
    xf, lnfc = _layernorm_fwd(x, params["lnf.g"], params["lnf.b"])
    logits = (xf.reshape(b * s, -1) @ params["wout"]
              + params["bout"]).reshape(b, s, -1)
    if not want_cache:
        return logits, None
    cache = {"ids": ids, "segs": segs, "layers": layer_caches,
             "xf": xf, "lnf": lnfc, "shape": (b, s)}
    return logits, cache


def backward_batch(params, cfg: ModelConfig, cache,
                   dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of sum(dlogits * logits) for every parameter tensor."""
    b, s = cache["shape"]
    dtype = params["tok_emb"].dtype
    grads = {}
    dl2 = dlogits.reshape(b * s, -1)
    xf2 = cache["xf"].reshape(b * s, -1)
    grads["wout"] = xf2.T @ dl2
    grads["bout"] = dl2.sum(axis=0)
    dxf = (dl2 @ params["wout"].T).reshape(b, s, -1)
    dx, grads["lnf.g"], grads["lnf.b"] = _layernorm_bwd(
        dxf, cache["lnf"], params["lnf.g"])
    for i in reversed(range(cfg.n_layers)):
        p = f"l{i}."
        c = cache["layers"][i]
        # MLP branch.
        dm2 = dx.reshape(b * s, -1)
        hg2 = c["hg"].reshape(b * s, -1)
        grads[p + "w2"] = hg2.T @ dm2
        grads[p + "b2"] = dm2.sum(axis=0)
        dhg = (dm2 @ params[p + "w2"].T).reshape(b, s, -1)
        du = dhg * _gelu_grad(c["u"])
        du2 = du.reshape(b * s, -1)
        hin2 = c["h_in"].reshape(b * s, -1)
        grads[p + "w1"] = hin2.T @ du2
        grads[p + "b1"] = du2.sum(axis=0)
        dh_in = (du2 @ params[p + "w1"].T).reshape(b, s, -1)
        dln2, grads[p + "ln2.g"], grads[p + "ln2.b"] = _layernorm_bwd(
            dh_in, c["ln2"], params[p + "ln2.g"])
        dx1 = dx + dln2
        # Attention branch; probabilities recomputed from q, k.
        dy2 = dx1.reshape(b * s, -1)
        o2 = c["o"].reshape(b * s, -1)
        grads[p + "wo"] = o2.T @ dy2
        grads[p + "bo"] = dy2.sum(axis=0)
        do = _split_heads((dy2 @ params[p + "wo"].T).reshape(b, s, -1),
                          cfg.n_heads)
        probs = c["probs"]
        if probs is None:
            probs = _attention_probs(c["q"], c["k"], dtype)
        dv = np.matmul(probs.swapaxes(-1, -2), do)
        dprobs = np.matmul(do, c["v"].swapaxes(-1, -2))
        # Softmax backward, in place on dprobs: P * (dP - rowsum(dP * P)).
        rowdot = np.einsum("bhij,bhij->bhi", dprobs, probs)[..., None]
        dprobs -= rowdot
        dprobs *= probs
        datt = dprobs
        del probs, dprobs
        scale = 1.0 / math.sqrt(cfg.head_dim)
        dq = np.matmul(datt, c["k"]) * scale
        dk = np.matmul(datt.swapaxes(-1, -2), c["q"]) * scale
        del datt
        dq2 = _merge_heads(dq).reshape(b * s, -1)
        dk2 = _merge_heads(dk).reshape(b * s, -1)
        dv2 = _merge_heads(dv).reshape(b * s, -1)
        a2 = c["a"].reshape(b * s, -1)
        grads[p + "wq"] = a2.T @ dq2
        grads[p + "wk"] = a2.T @ dk2
        grads[p + "wv"] = a2.T @ dv2
        grads[p + "bq"] = dq2.sum(axis=0)
        grads[p + "bk"] = dk2.sum(axis=0)
        grads[p + "bv"] = dv2.sum(axis=0)
        da = (dq2 @ params[p + "wq"].T + dk2 @ params[p + "wk"].T
              + dv2 @ params[p + "wv"].T).reshape(b, s, -1)
        dln1, grads[p + "ln1.g"], grads[p + "ln1.b"] = _layernorm_bwd(
            da, c["ln1"], params[p + "ln1.g"])
        dx = dx1 + dln1
    # Embeddings.
    ids, segs = cache["ids"], cache["segs"]
    grads["tok_emb"] = np.zeros_like(params["tok_emb"])
    np.add.at(grads["tok_emb"], ids.reshape(-1), dx.reshape(b * s, -1))
    grads["pos_emb"] = np.zeros_like(params["pos_emb"])
    grads["pos_emb"][:s] = dx.sum(axis=0)
    grads["seg_emb"] = np.zeros_like(params["seg_emb"])
    np.add.at(grads["seg_emb"], segs.reshape(-1), dx.reshape(b * s, -1))
    return grads


def forward(params, cfg: ModelConfig, tokens, segments=None) -> np.ndarray:
    """Single-sequence logits [S, V]; segments inferred when omitted."""
    from .vocab import infer_segments
    tokens = np.asarray(tokens, dtype=np.int64)
    if segments is None:
        segments = infer_segments(tokens, cfg.vocab)
    segs = np.asarray(segments, dtype=np.int64)
    logits, _ = forward_batch(params, cfg, tokens[None, :], segs[None, :])
    return logits[0]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def masked_ce(logits: np.ndarray, targets, mask) -> float:
    """Mean of -log softmax(logits)[target] over mask==1 positions.

    An all-zero mask is defined as loss 0.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask)
    sel = mask != 0
    n = int(sel.sum())
    if n == 0:
        return 0.0
    lp = log_softmax(np.asarray(logits[sel], dtype=np.float64))
    return float(-lp[np.arange(n), targets[sel]].mean())


def ce_weights_grad(logits: np.ndarray, targets: np.ndarray,
                    weights: np.ndarray):
    """(loss, dlogits) for loss = sum_i weights[i] * CE_i, batched.

    Per-position CE comes from the log-sum-exp directly (never log(0), so
    zero-weight positions with arbitrary targets stay finite) and the loss
    scalar accumulates in float64. Zero-weight positions contribute exactly
    zero gradient.
    """
    b, s, _ = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    ib = np.arange(b)[:, None]
    js = np.arange(s)[None, :]
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    np.exp(z, out=z)
    denom = z.sum(axis=-1, keepdims=True)
    lse = (m + np.log(denom))[..., 0].astype(np.float64)
    ce = lse - logits[ib, js, targets].astype(np.float64)
    loss = float((np.asarray(weights, dtype=np.float64) * ce).sum())
    probs = z
    probs /= denom
    dlogits = probs * weights[..., None]
    dlogits[ib, js, targets] -= weights
    return loss, dlogits.astype(logits.dtype, copy=False)


def grad(params, cfg: ModelConfig, tokens, targets, mask,
         segments=None) -> dict[str, np.ndarray]:
    """Exact gradients of masked_ce(forward(tokens), targets, mask)."""
    from .vocab import infer_segments
    tokens = np.asarray(tokens, dtype=np.int64)
    if segments is None:
        segments = infer_segments(tokens, cfg.vocab)
    segs = np.asarray(segments, dtype=np.int64)[None, :]
    ids = tokens[None, :]
    logits, cache = forward_batch(params, cfg, ids, segs, want_cache=True)
    mask = np.asarray(mask, dtype=np.float64)
    n = mask.sum()
    if n == 0:
        return zeros_like_params(params)
    weights = (mask / n)[None, :].astype(params["tok_emb"].dtype)
    targets_b = np.asarray(targets, dtype=np.int64)[None, :]
    # Out-of-range targets at masked-out positions are tolerated.
    safe_targets = np.where(np.asarray(mask)[None, :] != 0, targets_b, 0)
    _, dlogits = ce_weights_grad(logits, safe_targets, weights)
    return backward_batch(params, cfg, cache, dlogits)
