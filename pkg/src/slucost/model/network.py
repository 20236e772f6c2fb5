"""Forward and backward passes of the pyramidal LSTM encoder and attention decoder.

All functions work on padded batches: ``X`` is ``B x T x F`` with zeros past
each utterance's length. Parameters are a ``name -> ndarray`` dict (see
:meth:`ModelConfig.tensor_shapes`); any float dtype works, training uses
float64.

Encoder layer ``k``: concatenate frame pairs (zero-padding an odd tail),
run a unidirectional LSTM (gate order i, f, g, o), zero the outputs past the
new length ``ceil(len / 2)``.

Decoder, per encoder frame ``t``::

    s_t  = tanh(h_t W_in + b_in)                        decoder state
    c_t  = attn(s_t Wq, H Wk, H Wv)                     over all valid frames
    c2_t = attn(s_t Wq', S[:t+1] Wk', S[:t+1] Wv')      causal, over states
    z_t  = tanh([s_t, c_t, c2_t] W_comb + b_comb)
    y_t  = z_t W_out + b_out

with scaled dot-product attention. Output is frame-synchronous so the
decoder trains with CTC.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..ctc import ctc_loss_and_grad
from .params import ModelConfig

MODES = ("asr_head", "slu_head", "decoder")
_MASKED = -1e30


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def pad_batch(features: list[np.ndarray], dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    lens = np.array([f.shape[0] for f in features], dtype=np.int64)
    if np.any(lens == 0):
        raise ValueError("empty utterance")
    X = np.zeros((len(features), int(lens.max()), features[0].shape[1]), dtype=dtype)
    for b, f in enumerate(features):
        X[b, : len(f)] = f
    return X, lens


def encoded_lengths(lens: np.ndarray, layers: int) -> np.ndarray:
    out = np.asarray(lens, dtype=np.int64)
    for _ in range(layers):
        out = (out + 1) // 2
    return out


def _length_mask(lens: np.ndarray, T: int, dtype) -> np.ndarray:
    return (np.arange(T)[None, :] < lens[:, None]).astype(dtype)


# ---------------------------------------------------------------------------
# Encoder


@dataclass
class _LayerCache:
    P: np.ndarray
    T_in: int
    gates: np.ndarray
    cells: np.ndarray
    tanh_c: np.ndarray
    hs: np.ndarray
    mask: np.ndarray


def _lstm_forward(P: np.ndarray, W: np.ndarray, U: np.ndarray, b: np.ndarray):
    B, T, _ = P.shape
    H = U.shape[0]
    pre = P @ W + b
    gates = np.empty((B, T, 4 * H), dtype=pre.dtype)
    cells = np.empty((B, T, H), dtype=pre.dtype)
    hs = np.empty((B, T, H), dtype=pre.dtype)
    h = np.zeros((B, H), dtype=pre.dtype)
    c = np.zeros((B, H), dtype=pre.dtype)
    for t in range(T):
        a = pre[:, t] + h @ U
        g = gates[:, t]
        g[:, : 2 * H] = _sigmoid(a[:, : 2 * H])
        g[:, 2 * H: 3 * H] = np.tanh(a[:, 2 * H: 3 * H])
        g[:, 3 * H:] = _sigmoid(a[:, 3 * H:])
        c = g[:, H: 2 * H] * c + g[:, :H] * g[:, 2 * H: 3 * H]
        cells[:, t] = c
        h = g[:, 3 * H:] * np.tanh(c)
        hs[:, t] = h
    return gates, cells, np.tanh(cells), hs


def _lstm_backward(dhs, P, W, U, gates, cells, tanh_c, hs):
    B, T, H = dhs.shape
    dA = np.empty_like(gates)
    dh_next = np.zeros((B, H), dtype=dhs.dtype)
    dc_next = np.zeros((B, H), dtype=dhs.dtype)
    zeros = np.zeros((B, H), dtype=dhs.dtype)
    for t in range(T - 1, -1, -1):
        g = gates[:, t]
        i, f, gg, o = g[:, :H], g[:, H: 2 * H], g[:, 2 * H: 3 * H], g[:, 3 * H:]
        tc = tanh_c[:, t]
        c_prev = cells[:, t - 1] if t > 0 else zeros
        dh = dhs[:, t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        da = dA[:, t]
        da[:, :H] = dc * gg * i * (1.0 - i)
        da[:, H: 2 * H] = dc * c_prev * f * (1.0 - f)
        da[:, 2 * H: 3 * H] = dc * i * (1.0 - gg * gg)
        da[:, 3 * H:] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = da @ U.T
    h_prev = np.concatenate([np.zeros((B, 1, H), dtype=hs.dtype), hs[:, :-1]], axis=1)
    flatA = dA.reshape(-1, 4 * H)
    dW = P.reshape(-1, P.shape[2]).T @ flatA
    dU = h_prev.reshape(-1, H).T @ flatA
    db = flatA.sum(axis=0)
    dP = dA @ W.T
    return dP, dW, dU, db


def encoder_forward(params: dict, config: ModelConfig, X: np.ndarray, lens: np.ndarray):
    """Returns (H, out_lens, caches); H is zero past each ``out_lens``."""
    caches = []
    out = X
    cur_lens = np.asarray(lens)
    for k in range(config.encoder_layers):
        B, T, D = out.shape
        if T % 2:
            out = np.concatenate([out, np.zeros((B, 1, D), dtype=out.dtype)], axis=1)
        P = out.reshape(B, (T + 1) // 2, 2 * D)
        gates, cells, tanh_c, hs = _lstm_forward(P, params[f"enc.{k}.W"], params[f"enc.{k}.U"], params[f"enc.{k}.b"])
        cur_lens = (cur_lens + 1) // 2
        mask = _length_mask(cur_lens, P.shape[1], hs.dtype)[:, :, None]
        caches.append(_LayerCache(P, T, gates, cells, tanh_c, hs, mask))
        out = hs * mask
    return out, cur_lens, caches


def encoder_backward(params: dict, config: ModelConfig, dH: np.ndarray, caches: list[_LayerCache], grads: dict) -> None:
    d = dH
    for k in range(config.encoder_layers - 1, -1, -1):
        c = caches[k]
        dhs = d * c.mask
        dP, dW, dU, db = _lstm_backward(dhs, c.P, params[f"enc.{k}.W"], params[f"enc.{k}.U"],
                                        c.gates, c.cells, c.tanh_c, c.hs)
        _accumulate(grads, f"enc.{k}.W", dW)
        _accumulate(grads, f"enc.{k}.U", dU)
        _accumulate(grads, f"enc.{k}.b", db)
        B = dP.shape[0]
        d = dP.reshape(B, -1, dP.shape[2] // 2)[:, : c.T_in]


def _accumulate(grads: dict, name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] += value
    else:
        grads[name] = value


# ---------------------------------------------------------------------------
# Decoder


def _masked_softmax(scores: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    scores = np.where(allowed, scores, _MASKED)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores) * allowed
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_backward(A: np.ndarray, dA: np.ndarray) -> np.ndarray:
    return A * (dA - (dA * A).sum(axis=-1, keepdims=True))


@dataclass
class DecoderCache:
    H: np.ndarray
    S: np.ndarray
    K: np.ndarray
    V: np.ndarray
    Q: np.ndarray
    A: np.ndarray
    Q2: np.ndarray
    K2: np.ndarray
    V2: np.ndarray
    A2: np.ndarray
    cat: np.ndarray
    Z: np.ndarray
    states_given: bool


def decoder_states(params: dict, H: np.ndarray) -> np.ndarray:
    return np.tanh(H @ params["dec.in.W"] + params["dec.in.b"])


def decoder_forward(params: dict, H: np.ndarray, lens: np.ndarray, states: np.ndarray | None = None):
    """Logits (B x T x vocab_slu) and cache. ``states`` overrides the decoder states."""
    B, T, _ = H.shape
    given = states is not None
    S = states if given else decoder_states(params, H)
    D = S.shape[2]
    scale = 1.0 / np.sqrt(D)
    valid = (np.arange(T)[None, :] < lens[:, None])[:, None, :]
    causal = np.tril(np.ones((T, T), dtype=bool))[None]

    Q = S @ params["dec.att.Wq"]
    K = H @ params["dec.att.Wk"]
    V = H @ params["dec.att.Wv"]
    A = _masked_softmax(Q @ K.transpose(0, 2, 1) * scale, valid)
    C = A @ V

    Q2 = S @ params["dec.self.Wq"]
    K2 = S @ params["dec.self.Wk"]
    V2 = S @ params["dec.self.Wv"]
    A2 = _masked_softmax(Q2 @ K2.transpose(0, 2, 1) * scale, valid & causal)
    C2 = A2 @ V2

    cat = np.concatenate([S, C, C2], axis=2)
    Z = np.tanh(cat @ params["dec.comb.W"] + params["dec.comb.b"])
    logits = Z @ params["dec.out.W"] + params["dec.out.b"]
    return logits, DecoderCache(H, S, K, V, Q, A, Q2, K2, V2, A2, cat, Z, given)


def decoder_backward(params: dict, dlogits: np.ndarray, cache: DecoderCache, grads: dict) -> np.ndarray:
    """Accumulates decoder gradients into ``grads``; returns dL/dH."""
    c = cache
    D = c.S.shape[2]
    scale = 1.0 / np.sqrt(D)
    _accumulate(grads, "dec.out.W", _flat_outer(c.Z, dlogits))
    _accumulate(grads, "dec.out.b", dlogits.sum(axis=(0, 1)))
    dZpre = (dlogits @ params["dec.out.W"].T) * (1.0 - c.Z * c.Z)
    _accumulate(grads, "dec.comb.W", _flat_outer(c.cat, dZpre))
    _accumulate(grads, "dec.comb.b", dZpre.sum(axis=(0, 1)))
    dcat = dZpre @ params["dec.comb.W"].T
    dS = dcat[:, :, :D].copy()
    dC = dcat[:, :, D: 2 * D]
    dC2 = dcat[:, :, 2 * D:]

    # causal self-attention over decoder states
    dA2 = dC2 @ c.V2.transpose(0, 2, 1)
    dV2 = c.A2.transpose(0, 2, 1) @ dC2
    dsc2 = _softmax_backward(c.A2, dA2) * scale
    dQ2 = dsc2 @ c.K2
    dK2 = dsc2.transpose(0, 2, 1) @ c.Q2
    _accumulate(grads, "dec.self.Wq", _flat_outer(c.S, dQ2))
    _accumulate(grads, "dec.self.Wk", _flat_outer(c.S, dK2))
    _accumulate(grads, "dec.self.Wv", _flat_outer(c.S, dV2))
    dS += dQ2 @ params["dec.self.Wq"].T + dK2 @ params["dec.self.Wk"].T + dV2 @ params["dec.self.Wv"].T

    # attention over encoder states
    dA = dC @ c.V.transpose(0, 2, 1)
    dV = c.A.transpose(0, 2, 1) @ dC
    dsc = _softmax_backward(c.A, dA) * scale
    dQ = dsc @ c.K
    dK = dsc.transpose(0, 2, 1) @ c.Q
    _accumulate(grads, "dec.att.Wq", _flat_outer(c.S, dQ))
    _accumulate(grads, "dec.att.Wk", _flat_outer(c.H, dK))
    _accumulate(grads, "dec.att.Wv", _flat_outer(c.H, dV))
    dS += dQ @ params["dec.att.Wq"].T
    dH = dK @ params["dec.att.Wk"].T + dV @ params["dec.att.Wv"].T

    if not c.states_given:
        dSpre = dS * (1.0 - c.S * c.S)
        _accumulate(grads, "dec.in.W", _flat_outer(c.H, dSpre))
        _accumulate(grads, "dec.in.b", dSpre.sum(axis=(0, 1)))
        dH += dSpre @ params["dec.in.W"].T
    return dH


def _flat_outer(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


# ---------------------------------------------------------------------------
# Whole model


def head_for(objective_mode: str) -> str:
    if objective_mode not in MODES:
        raise ValueError(f"unknown output mode {objective_mode!r}; expected one of {MODES}")
    return objective_mode


def forward(params: dict, config: ModelConfig, X: np.ndarray, lens: np.ndarray, mode: str,
            dropout_mask: np.ndarray | None = None):
    """Logits for ``mode`` plus everything needed by :func:`backward`."""
    head_for(mode)
    H, out_lens, enc_cache = encoder_forward(params, config, X, lens)
    Hd = H * dropout_mask if dropout_mask is not None else H
    if mode == "decoder":
        logits, dec_cache = decoder_forward(params, Hd, out_lens)
    else:
        logits = Hd @ params[f"{mode}.W"] + params[f"{mode}.b"]
        dec_cache = Hd
    return logits, out_lens, (enc_cache, dec_cache, dropout_mask)


def backward(params: dict, config: ModelConfig, mode: str, dlogits: np.ndarray, cache) -> dict:
    enc_cache, dec_cache, dropout_mask = cache
    grads: dict = {}
    if mode == "decoder":
        dHd = decoder_backward(params, dlogits, dec_cache, grads)
    else:
        grads[f"{mode}.W"] = _flat_outer(dec_cache, dlogits)
        grads[f"{mode}.b"] = dlogits.sum(axis=(0, 1))
        dHd = dlogits @ params[f"{mode}.W"].T
    dH = dHd * dropout_mask if dropout_mask is not None else dHd
    encoder_backward(params, config, dH, enc_cache, grads)
    return grads


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def loss_and_grads(params: dict, config: ModelConfig, features: list[np.ndarray], targets: list[list[int]],
                   mode: str, dropout: float = 0.0, rng: np.random.Generator | None = None):
    """Mean per-utterance CTC loss over the batch and its parameter gradients."""
    dtype = next(iter(params.values())).dtype
    X, lens = pad_batch(features, dtype=dtype)
    mask = None
    if dropout > 0.0:
        if rng is None:
            raise ValueError("dropout needs an rng")
        B, T = X.shape[0], int(encoded_lengths(lens, config.encoder_layers).max())
        keep = rng.random((B, T, config.hidden_dim)) >= dropout
        mask = keep.astype(dtype) / (1.0 - dropout)
    logits, out_lens, cache = forward(params, config, X, lens, mode, mask)
    B = len(features)
    dlogits = np.zeros_like(logits)
    total = 0.0
    for b in range(B):
        n = int(out_lens[b])
        lp = log_softmax(logits[b, :n].astype(np.float64))
        loss, g = ctc_loss_and_grad(lp, targets[b])
        total += loss
        dlogits[b, :n] = g / B
    return total / B, backward(params, config, mode, dlogits, cache)


def batch_logits(params: dict, config: ModelConfig, features: list[np.ndarray], mode: str) -> list[np.ndarray]:
    """Per-utterance log-probabilities (unpadded) for inference."""
    dtype = next(iter(params.values())).dtype
    X, lens = pad_batch(features, dtype=dtype)
    logits, out_lens, _ = forward(params, config, X, lens, mode)
    return [log_softmax(logits[b, : int(n)].astype(np.float64)) for b, n in enumerate(out_lens)]


# ---------------------------------------------------------------------------
# Checkpoint-level helpers


def _params64(ckpt) -> dict:
    return {k: v.astype(np.float64) for k, v in ckpt.tensors.items()}


def _check_features(ckpt, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("empty utterance")
    if features.shape[1] != ckpt.config.feature_dim:
        raise ValueError(f"feature dim {features.shape[1]} != model feature_dim {ckpt.config.feature_dim}")
    return features


def encode(ckpt, features: np.ndarray) -> np.ndarray:
    """Encoder states (ceil(T / 2**layers) x hidden_dim) of one utterance."""
    features = _check_features(ckpt, features)
    X, lens = pad_batch([features])
    H, out_lens, _ = encoder_forward(_params64(ckpt), ckpt.config, X, lens)
    return H[0, : int(out_lens[0])]


def decode(ckpt, H: np.ndarray, return_attention: bool = False):
    """Decoder logits (T' x vocab_slu) for encoder states ``H``.

    With ``return_attention`` also returns the encoder-attention and
    self-attention weight matrices (each T' x T').
    """
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[1] != ckpt.config.hidden_dim:
        raise ValueError(f"encoder states must be T x {ckpt.config.hidden_dim}, got {H.shape}")
    logits, cache = decoder_forward(_params64(ckpt), H[None], np.array([H.shape[0]]))
    if return_attention:
        return logits[0], cache.A[0], cache.A2[0]
    return logits[0]


def head_logits(ckpt, H: np.ndarray, head: str) -> np.ndarray:
    """Logits of a linear CTC head (``asr_head`` or ``slu_head``) on encoder states."""
    return np.asarray(H) @ ckpt.tensors[f"{head}.W"].astype(np.float64) + ckpt.tensors[f"{head}.b"]
