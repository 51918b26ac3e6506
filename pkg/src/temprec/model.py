"""Attention fusion of short/long-term user vectors and the MLP / dot-product scorers.

Every function works on batches: vectors are rows of 2-D arrays. Single
examples may be passed as 1-D arrays and are promoted to a batch of one.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

DEFAULT_HIDDEN = (128,)
DEFAULT_DROPOUT = 0.2
# keeps both weights strictly inside (0, 1) when the logit gap overflows exp()
ALPHA_EPS = 1e-15


class ModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttentionWeights:
    alpha_short: np.ndarray
    alpha_long: np.ndarray


@dataclass
class ModelParams:
    """Trainable tensors, in declared order.

    ``W_a`` exists only for fusion models. The MLP has hidden layers
    ``W1/b1 .. Wk/bk`` and the output layer ``W{k+1}/b{k+1}``; with one
    hidden layer that is ``W1, b1, W2, b2``. The dot scorer has only ``W_a``.
    """

    tensors: dict[str, np.ndarray]
    scorer: str = "mlp"
    dropout_rate: float = DEFAULT_DROPOUT
    version: int = 0

    def __post_init__(self) -> None:
        if self.scorer not in ("mlp", "dot"):
            raise ValueError(f"unknown scorer {self.scorer!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.scorer == "dot" and "W_a" not in self.tensors:
            raise ValueError("dot scorer needs attention weights")

    @property
    def fusion(self) -> bool:
        return "W_a" in self.tensors

    @property
    def W_a(self) -> np.ndarray | None:
        return self.tensors.get("W_a")

    @property
    def n_layers(self) -> int:
        return sum(1 for k in self.tensors if k.startswith("W") and k != "W_a")

    def layer(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        return self.tensors[f"W{k}"], self.tensors[f"b{k}"]

    @property
    def input_dim(self) -> int:
        if self.scorer == "dot":
            return 2 * self.tensors["W_a"].shape[0]
        return self.tensors["W1"].shape[0]

    @property
    def dim(self) -> int:
        return self.input_dim // 2

    @property
    def hidden(self) -> tuple[int, ...]:
        return tuple(self.tensors[f"b{k}"].shape[0] for k in range(1, self.n_layers))

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()}, self.scorer, self.dropout_rate, self.version)

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}


def init_params(
    dim: int,
    hidden: tuple[int, ...] = DEFAULT_HIDDEN,
    *,
    fusion: bool = True,
    scorer: str = "mlp",
    dropout_rate: float = DEFAULT_DROPOUT,
    rng: np.random.Generator | None = None,
) -> ModelParams:
    """Glorot-uniform matrices, zero biases, zero attention vector."""
    rng = rng if rng is not None else np.random.default_rng(0)
    tensors: dict[str, np.ndarray] = {}
    if fusion or scorer == "dot":
        tensors["W_a"] = np.zeros(dim)
    if scorer == "mlp":
        sizes = [2 * dim, *hidden, 1]
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            tensors[f"W{k}"] = w[:, 0].copy() if fan_out == 1 else w
            tensors[f"b{k}"] = np.zeros(fan_out)
    return ModelParams(tensors, scorer, dropout_rate)


@dataclass
class ForwardTape:
    r_short: np.ndarray
    r_long: np.ndarray | None
    e_item: np.ndarray
    logit_short: np.ndarray | None
    logit_long: np.ndarray | None
    alphas: AttentionWeights | None
    alpha_clipped: np.ndarray | None
    e_user: np.ndarray
    layer_inputs: list[np.ndarray] = field(default_factory=list)
    pre_activations: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray | None] = field(default_factory=list)
    logit: np.ndarray | None = None
    prob: np.ndarray | None = None
    mode: str = "eval"
    version: int = 0


def _rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax_pair(logit_short: np.ndarray, logit_long: np.ndarray) -> tuple[AttentionWeights, np.ndarray]:
    """Two-way softmax with max subtraction; also returns which rows hit the clip."""
    s = np.asarray(logit_short, dtype=np.float64)
    l = np.asarray(logit_long, dtype=np.float64)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(l))):
        raise ModelError("non-finite attention logits")
    m = np.maximum(s, l)
    es, el = np.exp(s - m), np.exp(l - m)
    raw = es / (es + el)
    a_s = np.clip(raw, ALPHA_EPS, 1.0 - ALPHA_EPS)
    return AttentionWeights(a_s, 1.0 - a_s), a_s != raw


def attention_weights(r_short: np.ndarray, r_long: np.ndarray, W_a: np.ndarray) -> AttentionWeights:
    r_short, r_long = _rows(r_short), _rows(r_long)
    if r_short.shape != r_long.shape or r_short.shape[1] != W_a.shape[0]:
        raise ValueError("attention inputs must share dimension d")
    return softmax_pair(r_short @ W_a, r_long @ W_a)[0]


def fuse(r_short: np.ndarray, r_long: np.ndarray, alphas: AttentionWeights) -> np.ndarray:
    r_short, r_long = _rows(r_short), _rows(r_long)
    a_s = np.asarray(alphas.alpha_short, dtype=np.float64).reshape(-1, 1)
    a_l = np.asarray(alphas.alpha_long, dtype=np.float64).reshape(-1, 1)
    return a_s * r_short + a_l * r_long


def _check_finite(prob: np.ndarray) -> None:
    if not np.all(np.isfinite(prob)):
        raise ModelError("non-finite model output")


def mlp_forward(
    e_user: np.ndarray,
    e_item: np.ndarray,
    params: ModelParams,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    tape: ForwardTape | None = None,
) -> tuple[np.ndarray, ForwardTape]:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    e_user, e_item = _rows(e_user), _rows(e_item)
    x = np.concatenate([e_user, e_item], axis=1)
    if x.shape[1] != params.input_dim:
        raise ValueError(f"input width {x.shape[1]} != model input {params.input_dim}")
    if tape is None:
        tape = ForwardTape(e_user, None, e_item, None, None, None, None, e_user)
    tape.mode, tape.version = mode, params.version
    drop = params.dropout_rate if mode == "train" else 0.0
    if drop > 0 and rng is None:
        raise ValueError("train-mode dropout needs an rng")
    n = params.n_layers
    h = x
    for k in range(1, n):
        W, b = params.layer(k)
        tape.layer_inputs.append(h)
        z = h @ W + b
        tape.pre_activations.append(z)
        h = np.maximum(z, 0.0)
        mask = None
        if drop > 0:
            mask = (rng.random(h.shape) >= drop) / (1.0 - drop)
            h = h * mask
        tape.masks.append(mask)
    W_out, b_out = params.layer(n)
    tape.layer_inputs.append(h)
    tape.logit = h @ W_out + b_out[0]
    tape.prob = sigmoid(tape.logit)
    _check_finite(tape.prob)
    return tape.prob, tape


def dot_score(e_user: np.ndarray, e_item: np.ndarray) -> np.ndarray:
    e_user, e_item = _rows(e_user), _rows(e_item)
    if e_user.shape != e_item.shape:
        raise ValueError("dot scorer needs equal dimensions")
    return sigmoid(np.sum(e_user * e_item, axis=1))


def forward(
    r_short: np.ndarray,
    r_long: np.ndarray | None,
    e_item: np.ndarray,
    params: ModelParams,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardTape]:
    """Score user/item pairs; ``r_long`` is ignored (may be None) for single-profile models."""
    r_short, e_item = _rows(r_short), _rows(e_item)
    if params.fusion:
        if r_long is None:
            raise ValueError("fusion model needs both short and long representations")
        r_long = _rows(r_long)
        W_a = params.W_a
        ls, ll = r_short @ W_a, r_long @ W_a
        alphas, clipped = softmax_pair(ls, ll)
        e_user = fuse(r_short, r_long, alphas)
        tape = ForwardTape(r_short, r_long, e_item, ls, ll, alphas, clipped, e_user)
    else:
        e_user = r_short
        tape = ForwardTape(r_short, None, e_item, None, None, None, None, e_user)
    if params.scorer == "dot":
        tape.logit = np.sum(e_user * e_item, axis=1)
        tape.prob = sigmoid(tape.logit)
        tape.mode, tape.version = mode, params.version
        _check_finite(tape.prob)
        return tape.prob, tape
    return mlp_forward(e_user, e_item, params, mode, rng, tape)


def backward(tape: ForwardTape, params: ModelParams, labels: np.ndarray) -> dict[str, np.ndarray]:
    """Gradient of the batch-mean binary cross-entropy w.r.t. every tensor in ``params``."""
    if tape.version != params.version or tape.prob is None:
        raise ModelError("stale tape: parameters changed since the forward pass")
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if y.shape != tape.prob.shape:
        raise ValueError("labels do not match the batch")
    grads = params.zeros_like()
    dlogit = (tape.prob - y) / y.shape[0]

    if params.scorer == "dot":
        de_user = dlogit[:, None] * tape.e_item
    else:
        n = params.n_layers
        h_last = tape.layer_inputs[-1]
        grads[f"W{n}"] = h_last.T @ dlogit
        grads[f"b{n}"] = np.array([dlogit.sum()])
        dh = dlogit[:, None] * params.layer(n)[0][None, :]
        for k in range(n - 1, 0, -1):
            mask = tape.masks[k - 1]
            if mask is not None:
                dh = dh * mask
            dz = dh * (tape.pre_activations[k - 1] > 0)
            W, _ = params.layer(k)
            grads[f"W{k}"] = tape.layer_inputs[k - 1].T @ dz
            grads[f"b{k}"] = dz.sum(axis=0)
            dh = dz @ W.T
        de_user = dh[:, : params.dim]

    if params.fusion:
        diff = tape.r_short - tape.r_long
        d_alpha = np.sum(de_user * diff, axis=1)
        a_s = tape.alphas.alpha_short
        d_gap = d_alpha * a_s * (1.0 - a_s) * (~tape.alpha_clipped)
        grads["W_a"] = diff.T @ d_gap
    return grads


def bce_from_probs(prob: np.ndarray, labels: np.ndarray, clamp: float = 1e-7) -> float:
    p = np.clip(np.asarray(prob, dtype=np.float64), clamp, 1.0 - clamp)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def score_matrix(
    params: ModelParams,
    r_short: np.ndarray,
    r_long: np.ndarray | None,
    items: np.ndarray,
    chunk: int = 64,
) -> np.ndarray:
    """Eval-mode probabilities for every (user row, item row) pair, shape (U, I).

    The first MLP layer is split into user and item halves so each half is
    computed once, then broadcast.
    """
    r_short = _rows(r_short)
    items = _rows(items)
    if params.fusion:
        alphas = attention_weights(r_short, r_long, params.W_a)
        e_user = fuse(r_short, r_long, alphas)
    else:
        e_user = r_short
    if params.scorer == "dot":
        return sigmoid(e_user @ items.T)
    d = params.dim
    n = params.n_layers
    W1, b1 = params.layer(1)
    zu = e_user @ W1[:d] + b1
    zi = items @ W1[d:]
    out = np.empty((e_user.shape[0], items.shape[0]))
    for start in range(0, e_user.shape[0], chunk):
        h = np.maximum(zu[start : start + chunk, None, :] + zi[None, :, :], 0.0)
        for k in range(2, n):
            W, b = params.layer(k)
            h = np.maximum(h @ W + b, 0.0)
        W_out, b_out = params.layer(n)
        out[start : start + chunk] = sigmoid(h @ W_out + b_out[0])
    _check_finite(out)
    return out


@dataclass
class IndexedTape:
    """Intermediates of :func:`forward_indexed`; user-level arrays are per unique user."""

    user_rows: np.ndarray
    user_inverse: np.ndarray
    item_rows: np.ndarray
    item_inverse: np.ndarray
    r_short: np.ndarray
    r_long: np.ndarray | None
    items: np.ndarray
    alphas: AttentionWeights | None
    alpha_clipped: np.ndarray | None
    e_user: np.ndarray
    layer_inputs: list[np.ndarray] = field(default_factory=list)
    pre_activations: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray | None] = field(default_factory=list)
    prob: np.ndarray | None = None
    version: int = 0


def _segment_sum(inverse: np.ndarray, n_groups: int, values: np.ndarray) -> np.ndarray:
    from scipy.sparse import csr_matrix

    b = inverse.shape[0]
    S = csr_matrix((np.ones(b), (inverse, np.arange(b))), shape=(n_groups, b))
    return np.asarray(S @ values)


def forward_indexed(
    short: np.ndarray,
    long: np.ndarray | None,
    items: np.ndarray,
    user_idx: np.ndarray,
    item_idx: np.ndarray,
    params: ModelParams,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, IndexedTape]:
    """Same scores as :func:`forward` on ``short[user_idx]`` etc.

    Attention and the first-layer halves run once per distinct user and item
    in the batch instead of once per pair.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    uu, uinv = np.unique(user_idx, return_inverse=True)
    ii, iinv = np.unique(item_idx, return_inverse=True)
    rs = np.asarray(short[uu], dtype=np.float64)
    it = np.asarray(items[ii], dtype=np.float64)
    if params.fusion:
        if long is None:
            raise ValueError("fusion model needs both short and long representations")
        rl = np.asarray(long[uu], dtype=np.float64)
        alphas, clipped = softmax_pair(rs @ params.W_a, rl @ params.W_a)
        e_user = fuse(rs, rl, alphas)
    else:
        rl, alphas, clipped, e_user = None, None, None, rs
    tape = IndexedTape(uu, uinv, ii, iinv, rs, rl, it, alphas, clipped, e_user, version=params.version)
    if params.scorer == "dot":
        tape.prob = sigmoid(np.sum(e_user[uinv] * it[iinv], axis=1))
        _check_finite(tape.prob)
        return tape.prob, tape
    drop = params.dropout_rate if mode == "train" else 0.0
    if drop > 0 and rng is None:
        raise ValueError("train-mode dropout needs an rng")
    d, n = params.dim, params.n_layers
    W1, b1 = params.layer(1)
    z = (e_user @ W1[:d])[uinv] + (it @ W1[d:])[iinv] + b1
    for k in range(1, n):
        if k > 1:
            tape.layer_inputs.append(h)
            W, b = params.layer(k)
            z = h @ W + b
        tape.pre_activations.append(z)
        h = np.maximum(z, 0.0)
        mask = None
        if drop > 0:
            mask = (rng.random(h.shape) >= drop) / (1.0 - drop)
            h = h * mask
        tape.masks.append(mask)
    W_out, b_out = params.layer(n)
    tape.layer_inputs.append(h)
    tape.prob = sigmoid(h @ W_out + b_out[0])
    _check_finite(tape.prob)
    return tape.prob, tape


def backward_indexed(tape: IndexedTape, params: ModelParams, labels: np.ndarray) -> dict[str, np.ndarray]:
    """Batch-mean BCE gradients matching :func:`backward`."""
    if tape.version != params.version or tape.prob is None:
        raise ModelError("stale tape: parameters changed since the forward pass")
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if y.shape != tape.prob.shape:
        raise ValueError("labels do not match the batch")
    grads = params.zeros_like()
    dlogit = (tape.prob - y) / y.shape[0]
    n_users = tape.user_rows.shape[0]

    if params.scorer == "dot":
        de_user = _segment_sum(tape.user_inverse, n_users, dlogit[:, None] * tape.items[tape.item_inverse])
    else:
        n, d = params.n_layers, params.dim
        grads[f"W{n}"] = tape.layer_inputs[-1].T @ dlogit
        grads[f"b{n}"] = np.array([dlogit.sum()])
        dh = dlogit[:, None] * params.layer(n)[0][None, :]
        for k in range(n - 1, 0, -1):
            mask = tape.masks[k - 1]
            if mask is not None:
                dh = dh * mask
            dz = dh * (tape.pre_activations[k - 1] > 0)
            W, _ = params.layer(k)
            grads[f"b{k}"] = dz.sum(axis=0)
            if k > 1:
                grads[f"W{k}"] = tape.layer_inputs[k - 2].T @ dz
                dh = dz @ W.T
        dz_user = _segment_sum(tape.user_inverse, n_users, dz)
        dz_item = _segment_sum(tape.item_inverse, tape.item_rows.shape[0], dz)
        W1 = params.layer(1)[0]
        grads["W1"] = np.concatenate([tape.e_user.T @ dz_user, tape.items.T @ dz_item], axis=0)
        de_user = dz_user @ W1[:d].T

    if params.fusion:
        diff = tape.r_short - tape.r_long
        a_s = tape.alphas.alpha_short
        d_gap = np.sum(de_user * diff, axis=1) * a_s * (1.0 - a_s) * (~tape.alpha_clipped)
        grads["W_a"] = diff.T @ d_gap
    return grads


_CKPT_MAGIC = b"TRECCKPT"


def write_container(path: str | Path, header: Mapping[str, Any], tensors: Mapping[str, np.ndarray]) -> None:
    """JSON header followed by little-endian float32 blocks in declared order."""
    head = dict(header)
    head["tensors"] = [{"name": k, "shape": list(np.shape(v))} for k, v in tensors.items()]
    hb = json.dumps(head, sort_keys=True).encode("utf-8")
    blocks = [np.asarray(v, dtype="<f4").tobytes() for v in tensors.values()]
    Path(path).write_bytes(_CKPT_MAGIC + struct.pack("<I", len(hb)) + hb + b"".join(blocks))


def read_container(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:8] != _CKPT_MAGIC:
        raise ModelError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", blob, 8)
    header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    off = 12 + hlen
    tensors: dict[str, np.ndarray] = {}
    for spec in header["tensors"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).astype(np.float64)
        tensors[spec["name"]] = arr.reshape(spec["shape"])
        off += 4 * count
    return header, tensors


def save_checkpoint(path: str | Path, params: ModelParams, encoder_fingerprint: str, **extra: Any) -> None:
    header = {
        "format": "temprec-checkpoint",
        "kind": params.scorer,
        "dim": params.dim,
        "hidden": list(params.hidden),
        "fusion": params.fusion,
        "dropout": params.dropout_rate,
        "encoder_fingerprint": encoder_fingerprint,
        **extra,
    }
    write_container(path, header, params.tensors)


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict[str, Any]]:
    header, tensors = read_container(path)
    if header.get("kind") not in ("mlp", "dot"):
        raise ModelError(f"{path} holds a {header.get('kind')!r} model, not a fusion/MLP model")
    return ModelParams(tensors, header["kind"], header["dropout"]), header
