"""Incremental decoding with per-layer key/value caches.

Appending a chunk runs the usual pre-norm stack over just the new positions,
attending to cached keys/values plus the chunk itself under the causal rule.
Output logits match a full forward over the concatenated sequence (same
math, same weights; only GEMM tiling differs).
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import LengthError
from .model import ModelConfig, _gelu, _layernorm_fwd
from .vocab import infer_segments


class DecodeSession:
    """Single-sequence autoregressive context over fixed parameters."""

    def __init__(self, params, cfg: ModelConfig):
        self.params = params
        self.cfg = cfg
        self.dtype = params["tok_emb"].dtype
        hd, nh = cfg.head_dim, cfg.n_heads
        self._k = [np.empty((nh, cfg.max_seq_len, hd), dtype=self.dtype)
                   for _ in range(cfg.n_layers)]
        self._v = [np.empty((nh, cfg.max_seq_len, hd), dtype=self.dtype)
                   for _ in range(cfg.n_layers)]
        self.length = 0
        self.ids: list[int] = []

    def append(self, ids, segments=None) -> np.ndarray:
        """Extend the context; returns logits [len(ids), vocab.total]."""
        p, cfg = self.params, self.cfg
        ids = [int(t) for t in ids]
        n = len(ids)
        if n == 0:
            return np.zeros((0, cfg.vocab.total), dtype=self.dtype)
        t0 = self.length
        if t0 + n > cfg.max_seq_len:
            raise LengthError(
                f"decode length {t0 + n} exceeds {cfg.max_seq_len}")
        if segments is None:
            segments = infer_segments(self.ids + ids, cfg.vocab)[t0:]
        segs = np.asarray(segments, dtype=np.int64)
        idv = np.asarray(ids, dtype=np.int64)
        x = (p["tok_emb"][idv] + p["pos_emb"][t0:t0 + n] + p["seg_emb"][segs])
        scale = 1.0 / math.sqrt(cfg.head_dim)
        nh, hd = cfg.n_heads, cfg.head_dim
        for i in range(cfg.n_layers):
            pre = f"l{i}."
            a, _ = _layernorm_fwd(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q = (a @ p[pre + "wq"] + p[pre + "bq"]).reshape(n, nh, hd)
            k = (a @ p[pre + "wk"] + p[pre + "bk"]).reshape(n, nh, hd)
            v = (a @ p[pre + "wv"] + p[pre + "bv"]).reshape(n, nh, hd)
            self._k[i][:, t0:t0 + n] = k.transpose(1, 0, 2)
            self._v[i][:, t0:t0 + n] = v.transpose(1, 0, 2)
            kk = self._k[i][:, :t0 + n]                   # [nh, T, hd]
            vv = self._v[i][:, :t0 + n]
            qh = q.transpose(1, 0, 2)                     # [nh, n, hd]
            att = np.matmul(qh, kk.swapaxes(-1, -2)) * scale
            # Causal within the chunk: new position t0+r sees <= t0+r.
            cols = np.arange(t0 + n)[None, :]
            rows = (t0 + np.arange(n))[:, None]
            att[:, cols > rows] = -np.inf
            att -= att.max(axis=-1, keepdims=True)
            np.exp(att, out=att)
            att /= att.sum(axis=-1, keepdims=True)
            o = np.matmul(att, vv).transpose(1, 0, 2).reshape(n, -1)
            x = x + (o @ p[pre + "wo"] + p[pre + "bo"])
            h, _ = _layernorm_fwd(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            x = x + (_gelu(h @ p[pre + "w1"] + p[pre + "b1"])
                     @ p[pre + "w2"] + p[pre + "b2"])
        xf, _ = _layernorm_fwd(x, p["lnf.g"], p["lnf.b"])
        logits = xf @ p["wout"] + p["bout"]
        self.length = t0 + n
        self.ids.extend(ids)
        return logits
