from __future__ import annotations

import numpy as np

from temprec import model as M


def random_instance(seed: int, d: int = 8, h: int = 4, batch: int = 6, scorer: str = "mlp", fusion: bool = True):
    rng = np.random.default_rng(seed)
    params = M.init_params(d, (h,) if scorer == "mlp" else (), fusion=fusion, scorer=scorer, dropout_rate=0.0, rng=rng)
    for name, t in params.tensors.items():
        t[...] = rng.normal(scale=0.5, size=t.shape)
    rs = rng.normal(size=(batch, d))
    rl = rng.normal(size=(batch, d)) if fusion else None
    items = rng.normal(size=(batch, d))
    labels = (rng.random(batch) < 0.5).astype(float)
    return params, rs, rl, items, labels


def batch_loss(params: M.ModelParams, rs, rl, items, labels) -> float:
    prob, _ = M.forward(rs, rl, items, params, "train", np.random.default_rng(0))
    return float(-np.mean(labels * np.log(prob) + (1 - labels) * np.log(1 - prob)))


def worst_relative_error(params: M.ModelParams, rs, rl, items, labels, eps: float = 1e-5, floor: float = 1e-6) -> float:
    """Largest |analytic - central difference| / max(|analytic|, |numeric|, floor) over every coordinate."""
    _, tape = M.forward(rs, rl, items, params, "train", np.random.default_rng(0))
    grads = M.backward(tape, params, labels)
    worst = 0.0
    for name, t in params.tensors.items():
        flat = t.reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + eps
            up = batch_loss(params, rs, rl, items, labels)
            flat[j] = keep - eps
            down = batch_loss(params, rs, rl, items, labels)
            flat[j] = keep
            numeric = (up - down) / (2 * eps)
            analytic = grads[name].reshape(-1)[j]
            worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor))
    return worst
