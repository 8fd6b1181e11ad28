"""Neural layer primitives composed from the autodiff core.

Recurrent cells follow the standard gate conventions: the LSTM uses gate
order (input, forget, cell, output) with forget-gate bias initialised to
1.0; the GRU uses h' = (1 - z) * n + z * h. Masked unrolls keep the state
frozen on padded steps so variable-length sequences batch cleanly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ACTIVATIONS = {
    "identity": lambda t: t,
    "tanh": ad.tanh,
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
}


@dataclass
class DenseParams:
    W: Tensor  # [in, out]
    b: Tensor  # [out]


@dataclass
class LstmParams:
    W_ih: Tensor  # [in, 4h]
    W_hh: Tensor  # [h, 4h]
    b: Tensor  # [4h]

    @property
    def hidden(self) -> int:
        return self.W_hh.shape[0]


@dataclass
class GruParams:
    W_ih: Tensor  # [in, 3h]
    W_hh: Tensor  # [h, 3h]
    b: Tensor  # [3h]

    @property
    def hidden(self) -> int:
        return self.W_hh.shape[0]


@dataclass
class AttentionParams:
    W_query: Tensor  # [q_dim, a_dim]
    W_key: Tensor  # [k_dim, a_dim]
    v: Tensor  # [a_dim, 1]


# -- initialisation --------------------------------------------------------


def _orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))  # fix QR sign ambiguity for determinism
    return q if rows >= cols else q.T


def _fan_in_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def init_dense(store: dict[str, Tensor], prefix: str, in_dim: int, out_dim: int,
               rng: np.random.Generator) -> DenseParams:
    W = ad.parameter(_fan_in_uniform(rng, in_dim, (in_dim, out_dim)), op=f"{prefix}/W")
    b = ad.parameter(np.zeros(out_dim), op=f"{prefix}/b")
    store[f"{prefix}/W"] = W
    store[f"{prefix}/b"] = b
    return DenseParams(W, b)


def _init_recurrent(store, prefix, in_dim, hidden, gates, rng, forget_slice=None):
    W_ih = ad.parameter(_fan_in_uniform(rng, in_dim, (in_dim, gates * hidden)), op=f"{prefix}/W_ih")
    blocks = [_orthogonal(rng, hidden, hidden) for _ in range(gates)]
    W_hh = ad.parameter(np.concatenate(blocks, axis=1), op=f"{prefix}/W_hh")
    b = np.zeros(gates * hidden)
    if forget_slice is not None:
        b[forget_slice] = 1.0
    b = ad.parameter(b, op=f"{prefix}/b")
    store[f"{prefix}/W_ih"] = W_ih
    store[f"{prefix}/W_hh"] = W_hh
    store[f"{prefix}/b"] = b
    return W_ih, W_hh, b


def init_lstm(store: dict[str, Tensor], prefix: str, in_dim: int, hidden: int,
              rng: np.random.Generator) -> LstmParams:
    W_ih, W_hh, b = _init_recurrent(store, prefix, in_dim, hidden, 4, rng,
                                    forget_slice=slice(hidden, 2 * hidden))
    return LstmParams(W_ih, W_hh, b)


def init_gru(store: dict[str, Tensor], prefix: str, in_dim: int, hidden: int,
             rng: np.random.Generator) -> GruParams:
    W_ih, W_hh, b = _init_recurrent(store, prefix, in_dim, hidden, 3, rng)
    return GruParams(W_ih, W_hh, b)


def init_attention(store: dict[str, Tensor], prefix: str, query_dim: int, key_dim: int,
                   attn_dim: int, rng: np.random.Generator) -> AttentionParams:
    Wq = ad.parameter(_fan_in_uniform(rng, query_dim, (query_dim, attn_dim)), op=f"{prefix}/W_query")
    Wk = ad.parameter(_fan_in_uniform(rng, key_dim, (key_dim, attn_dim)), op=f"{prefix}/W_key")
    v = ad.parameter(_fan_in_uniform(rng, attn_dim, (attn_dim, 1)), op=f"{prefix}/v")
    store[f"{prefix}/W_query"] = Wq
    store[f"{prefix}/W_key"] = Wk
    store[f"{prefix}/v"] = v
    return AttentionParams(Wq, Wk, v)


def init_conv(store: dict[str, Tensor], prefix: str, in_ch: int, out_ch: int, kernel: int,
              rng: np.random.Generator) -> DenseParams:
    fan_in = kernel * kernel * in_ch
    W = ad.parameter(_fan_in_uniform(rng, fan_in, (kernel, kernel, in_ch, out_ch)), op=f"{prefix}/W")
    b = ad.parameter(np.zeros(out_ch), op=f"{prefix}/b")
    store[f"{prefix}/W"] = W
    store[f"{prefix}/b"] = b
    return DenseParams(W, b)


# -- forward primitives ------------------------------------------------------


def dense(x: Tensor, params: DenseParams, activation: str = "identity") -> Tensor:
    """activation(x @ W + b) for a [B, in] batch."""
    x = ad.as_tensor(x)
    if x.shape[-1] != params.W.shape[0]:
        raise ValueError(f"dense shape mismatch: input {x.shape} vs W {params.W.shape}")
    return ACTIVATIONS[activation](ad.add(ad.matmul(x, params.W), params.b))


def lstm_step(x: Tensor, h: Tensor, c: Tensor, params: LstmParams) -> tuple[Tensor, Tensor]:
    """One 4-gate LSTM step over a [B, in] batch; returns (h', c')."""
    n = params.hidden
    z = ad.add(ad.add(ad.matmul(ad.as_tensor(x), params.W_ih),
                      ad.matmul(ad.as_tensor(h), params.W_hh)), params.b)
    i = ad.sigmoid(z[:, 0:n])
    f = ad.sigmoid(z[:, n : 2 * n])
    g = ad.tanh(z[:, 2 * n : 3 * n])
    o = ad.sigmoid(z[:, 3 * n : 4 * n])
    c_new = ad.add(ad.mul(f, ad.as_tensor(c)), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


def gru_step(x: Tensor, h: Tensor, params: GruParams) -> Tensor:
    """One 3-gate GRU step over a [B, in] batch; returns h'."""
    n = params.hidden
    h = ad.as_tensor(h)
    zi = ad.matmul(ad.as_tensor(x), params.W_ih)
    zh = ad.matmul(h, params.W_hh)
    r = ad.sigmoid(ad.add(ad.add(zi[:, 0:n], zh[:, 0:n]), params.b[0:n]))
    u = ad.sigmoid(ad.add(ad.add(zi[:, n : 2 * n], zh[:, n : 2 * n]), params.b[n : 2 * n]))
    cand = ad.tanh(ad.add(ad.add(zi[:, 2 * n : 3 * n], ad.mul(r, zh[:, 2 * n : 3 * n])),
                          params.b[2 * n : 3 * n]))
    one_minus_u = ad.sub(1.0, u)
    return ad.add(ad.mul(one_minus_u, cand), ad.mul(u, h))


def lstm_encode(seq: Tensor, params: LstmParams, mask: np.ndarray | None = None,
                reverse: bool = False) -> Tensor:
    """Final hidden state of an LSTM unrolled over [B, L, D].

    ``mask`` is a [B, L] 0/1 array; masked steps leave the state untouched.
    """
    seq = ad.as_tensor(seq)
    if seq.ndim != 3:
        raise ValueError(f"lstm_encode expects [B, L, D], got {seq.shape}")
    bsz, length, _ = seq.shape
    if length == 0:
        raise ValueError("cannot encode an empty sequence")
    n = params.hidden
    h = Tensor(np.zeros((bsz, n)))
    c = Tensor(np.zeros((bsz, n)))
    steps = range(length - 1, -1, -1) if reverse else range(length)
    for t in steps:
        h_new, c_new = lstm_step(seq[:, t, :], h, c, params)
        if mask is not None:
            m = Tensor(mask[:, t : t + 1])
            keep = Tensor(1.0 - mask[:, t : t + 1])
            h = ad.add(ad.mul(m, h_new), ad.mul(keep, h))
            c = ad.add(ad.mul(m, c_new), ad.mul(keep, c))
        else:
            h, c = h_new, c_new
    return h


def bidirectional_encode(seq: Tensor, fwd: LstmParams, bwd: LstmParams,
                         mask: np.ndarray | None = None) -> Tensor:
    """Concatenated final hidden states of forward and backward passes."""
    return ad.concat([lstm_encode(seq, fwd, mask=mask),
                      lstm_encode(seq, bwd, mask=mask, reverse=True)], axis=-1)


def conv2d(x: Tensor, params: DenseParams, stride: int, activation: str = "relu") -> Tensor:
    return ACTIVATIONS[activation](ad.conv2d_raw(x, params.W, params.b, stride))


def additive_attention(query: Tensor, keys: Tensor, params: AttentionParams,
                       mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Score keys against a query and blend them.

    query: [B, Dq]; keys: [B, K, Dk]; optional mask [B, K] marks usable keys.
    Returns (context [B, Dk], weights [B, K]). Rows with an all-zero mask get
    a zero context vector.
    """
    query, keys = ad.as_tensor(query), ad.as_tensor(keys)
    if keys.ndim != 3:
        raise ValueError(f"keys must be [B, K, D], got {keys.shape}")
    bsz, n_keys, key_dim = keys.shape
    if n_keys == 0:
        raise ValueError("additive_attention requires at least one key")
    attn_dim = params.v.shape[0]
    q_proj = ad.matmul(query, params.W_query)  # [B, A]
    k_proj = ad.reshape(ad.matmul(ad.reshape(keys, (bsz * n_keys, key_dim)), params.W_key),
                        (bsz, n_keys, attn_dim))
    scores_in = ad.tanh(ad.add(k_proj, ad.reshape(q_proj, (bsz, 1, attn_dim))))
    scores = ad.reshape(ad.matmul(ad.reshape(scores_in, (bsz * n_keys, attn_dim)), params.v),
                        (bsz, n_keys))
    if mask is not None:
        scores = ad.add(scores, Tensor((mask - 1.0) * 1e9))
    weights = ad.softmax(scores, axis=1)
    context = ad.tsum(ad.mul(ad.reshape(weights, (bsz, n_keys, 1)), keys), axis=1)
    if mask is not None:
        any_key = Tensor((mask.max(axis=1) > 0).astype(float).reshape(bsz, 1))
        context = ad.mul(context, any_key)
    return context, weights
