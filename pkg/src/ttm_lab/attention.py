"""Scaled dot-product attention and its temperature-modulated variants.

Two modulation forms exist side by side: a key-axis broadcast (each logit
column j is scaled by T[h, j]) and an outer-product form (logit [i, j] scaled
by T[h, i] * T[h, j]). Modulation multiplies pre-softmax logits, as defined;
with negative logits this can raise a weight when the temperature drops, which
is documented behavior rather than something we correct.
"""

from dataclasses import dataclass

import numpy as np

from .numerics import DimensionError, NumericError, Tensor, concat, softmax_rows

BROADCAST_KEY = "key"
BROADCAST_QUERY = "query"


class AttentionConfigError(ValueError):
    pass


@dataclass
class AttentionParams:
    """Per-head projections plus the output projection back to d_model.

    W_q, W_k, W_v are lists of (d_model, d_k) tensors, one per head; W_o maps
    the concatenated head outputs (h * d_k wide) back to d_model.
    """

    W_q: list
    W_k: list
    W_v: list
    W_o: Tensor

    def __post_init__(self):
        if not (len(self.W_q) == len(self.W_k) == len(self.W_v)):
            raise AttentionConfigError("per-head projection lists must align")
        if not self.W_q:
            raise AttentionConfigError("need at least one head")
        d_model, d_k = self.W_q[0].shape
        if d_k == 0:
            raise AttentionConfigError("d_k must be positive")
        if len(self.W_q) * d_k > d_model:
            raise AttentionConfigError(
                f"h * d_k = {len(self.W_q) * d_k} exceeds d_model = {d_model}")

    @property
    def head_count(self):
        return len(self.W_q)

    @property
    def d_k(self):
        return self.W_q[0].shape[1]


@dataclass
class AttentionOutput:
    values: Tensor          # (n, d_model)
    weights: Tensor         # (h, n, n), rows sum to 1
    pre_softmax: Tensor     # (h, n, n) modulated logits


def _head_logits(x, params):
    """Stacked (h, n, n) scaled dot-product logits."""
    scale = 1.0 / np.sqrt(params.d_k)
    logits = []
    for Wq, Wk in zip(params.W_q, params.W_k):
        q = x @ Wq
        k = x @ Wk
        logits.append((q @ k.T * scale).reshape(1, x.shape[0], x.shape[0]))
    return concat(logits, axis=0)


def _finish(x, params, pre, mask=None):
    if mask is not None:
        pre = pre + Tensor(mask, check=False)
    weights = softmax_rows(pre)
    heads = [weights[h] @ values_h for h, values_h in enumerate(_per_head_values(x, params))]
    out = concat(heads, axis=1) @ params.W_o
    return AttentionOutput(values=out, weights=weights, pre_softmax=pre)


def _per_head_values(x, params):
    return [x @ Wv for Wv in params.W_v]


def _causal_mask(n):
    """Additive lower-triangular mask (large negative above the diagonal)."""
    m = np.triu(np.full((n, n), -1e30), k=1)
    return m[None, :, :]


def attention_baseline(x, params, causal=False):
    """softmax(Q K^T / sqrt(d_k)) V per head, heads concatenated and projected."""
    x = Tensor._coerce(x)
    pre = _head_logits(x, params)
    mask = _causal_mask(x.shape[0]) if causal else None
    return _finish(x, params, pre, mask)


def _check_field(x, field, params):
    if field.head_count != params.head_count or field.seq_len != x.shape[0]:
        raise DimensionError(
            f"field shape ({field.head_count}, {field.seq_len}) does not match "
            f"h={params.head_count}, n={x.shape[0]}")


def attention_temp_broadcast(x, params, field, axis=BROADCAST_KEY, causal=False):
    """Temperature-modulated attention, single-axis broadcast.

    With the default key axis, logit [h, i, j] is multiplied by T[h, j]:
    temperature rates each token as an information source. `axis="query"`
    multiplies rows instead.
    """
    x = Tensor._coerce(x)
    _check_field(x, field, params)
    pre = _head_logits(x, params)
    t = field.values
    if axis == BROADCAST_KEY:
        mod = t.reshape(field.head_count, 1, field.seq_len)
    elif axis == BROADCAST_QUERY:
        mod = t.reshape(field.head_count, field.seq_len, 1)
    else:
        raise AttentionConfigError(f"unknown broadcast axis {axis!r}")
    mask = _causal_mask(x.shape[0]) if causal else None
    return _finish(x, params, pre * mod, mask)


def attention_temp_outer(x, params, field, causal=False):
    """Temperature-modulated attention, outer-product form.

    Logit [h, i, j] is multiplied by T[h, i] * T[h, j].
    """
    x = Tensor._coerce(x)
    _check_field(x, field, params)
    pre = _head_logits(x, params)
    t = field.values
    outer = t.reshape(field.head_count, field.seq_len, 1) \
        * t.reshape(field.head_count, 1, field.seq_len)
    mask = _causal_mask(x.shape[0]) if causal else None
    return _finish(x, params, pre * outer, mask)


def residual_blend(base_weights, modulated_weights, alpha):
    """Convex blend of two post-softmax weight tensors, rows renormalized."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0, 1]")
    base_weights = Tensor._coerce(base_weights)
    modulated_weights = Tensor._coerce(modulated_weights)
    mix = base_weights * alpha + modulated_weights * (1.0 - alpha)
    return mix / mix.sum(axis=-1, keepdims=True)


def interference_ratio(weights, field):
    """||T ⊙ A||_F / ||A||_F with the field applied along the key axis."""
    w = weights.values if isinstance(weights, Tensor) else np.asarray(weights)
    t = field.array()[:, None, :]
    denom = np.linalg.norm(w)
    if denom == 0.0:
        raise NumericError("interference_ratio: zero-norm attention weights")
    return float(np.linalg.norm(w * t) / denom)
