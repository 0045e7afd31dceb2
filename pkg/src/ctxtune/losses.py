"""Task and context losses: CTC, greedy CTC decoding, cross-entropy,
and the L2 context-distillation loss with its weighted combination."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

NEG_INF = -np.inf


class InfeasibleTargetError(ValueError):
    """Target cannot be emitted in the given number of frames."""


@dataclass
class LossConfig:
    alpha: float = 1.0
    blank_id: int = 0
    squared_context_loss: bool = False

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


def _logsumexp2(a, b):
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    m = max(a, b)
    return m + np.log(np.exp(a - m) + np.exp(b - m))


def ctc_required_length(target):
    repeats = sum(1 for i in range(1, len(target)) if target[i] == target[i - 1])
    return len(target) + repeats


def _ctc_forward_backward(logp, target, blank):
    """Log-space alpha/beta over the blank-interleaved target.

    Returns (loss, grad wrt logp). Beta includes the emission at its own
    frame, so the occupancy at (t, s) is alpha + beta - logp(t, label_s).
    """
    t_len, _ = logp.shape
    ext = [blank]
    for c in target:
        ext.extend((c, blank))
    s_len = len(ext)

    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = logp[0, ext[0]]
    if s_len > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, t_len):
        for s in range(s_len):
            acc = alpha[t - 1, s]
            if s >= 1:
                acc = _logsumexp2(acc, alpha[t - 1, s - 1])
            if s >= 2 and ext[s] != blank and ext[s] != ext[s - 2]:
                acc = _logsumexp2(acc, alpha[t - 1, s - 2])
            if acc != NEG_INF:
                alpha[t, s] = acc + logp[t, ext[s]]

    ll = alpha[t_len - 1, s_len - 1]
    if s_len > 1:
        ll = _logsumexp2(ll, alpha[t_len - 1, s_len - 2])

    beta = np.full((t_len, s_len), NEG_INF)
    beta[t_len - 1, s_len - 1] = logp[t_len - 1, ext[s_len - 1]]
    if s_len > 1:
        beta[t_len - 1, s_len - 2] = logp[t_len - 1, ext[s_len - 2]]
    for t in range(t_len - 2, -1, -1):
        for s in range(s_len):
            acc = beta[t + 1, s]
            if s + 1 < s_len:
                acc = _logsumexp2(acc, beta[t + 1, s + 1])
            if s + 2 < s_len and ext[s + 2] != blank and ext[s + 2] != ext[s]:
                acc = _logsumexp2(acc, beta[t + 1, s + 2])
            if acc != NEG_INF:
                beta[t, s] = acc + logp[t, ext[s]]

    grad = np.zeros_like(logp)
    for t in range(t_len):
        for s in range(s_len):
            occ = alpha[t, s] + beta[t, s] - logp[t, ext[s]]
            if occ != NEG_INF:
                grad[t, ext[s]] -= np.exp(occ - ll)
    return -ll, grad


def ctc_loss(log_probs, target, blank=0):
    """Negative log probability of all alignments collapsing to target.

    log_probs is a T x V Tensor of per-frame log-distributions. Raises
    InfeasibleTargetError when T is too short to emit the target.
    """
    log_probs = T.as_tensor(log_probs)
    target = list(target)
    if blank in target:
        raise ValueError(f"target contains the blank id {blank}")
    t_len, vocab = log_probs.shape
    if any(c < 0 or c >= vocab for c in target):
        raise ValueError("target id out of vocabulary range")
    need = ctc_required_length(target)
    if t_len < need:
        raise InfeasibleTargetError(
            f"target needs at least {need} frames, got {t_len}")

    loss, grad = _ctc_forward_backward(log_probs.data, target, blank)
    return Tensor._from_op(loss, (log_probs,),
                           lambda g: log_probs._accumulate(float(g) * grad))


def ctc_greedy_decode(log_probs, blank=0):
    """Best-path decoding: framewise argmax, collapse repeats, drop blanks."""
    path = np.asarray(log_probs).argmax(axis=-1)
    out = []
    prev = None
    for p in path:
        if p != prev and p != blank:
            out.append(int(p))
        prev = p
    return out


def cross_entropy(logits, label):
    """-log softmax(logits)[label] for a 1 x C (or length-C) logits Tensor."""
    logits = T.as_tensor(logits)
    flat = logits.data.reshape(-1)
    if not (0 <= label < flat.size):
        raise IndexError(f"label {label} out of range for {flat.size} classes")
    onehot = np.zeros_like(logits.data)
    onehot.reshape(-1)[label] = -1.0
    return T.sum_all(T.mul(T.log_softmax(logits, axis=-1), Tensor(onehot)))


def context_l2(e_teacher, e_hat, squared=False):
    """Distance between teacher and student context embeddings.

    The teacher is treated as a constant target (no gradient into it).
    """
    e_teacher = T.as_tensor(e_teacher)
    e_hat = T.as_tensor(e_hat)
    if e_teacher.shape != e_hat.shape:
        raise T.ShapeMismatchError("context_l2", e_teacher.shape, e_hat.shape)
    diff = T.add(e_hat, Tensor(-e_teacher.data))
    if squared:
        return T.sum_all(T.mul(diff, diff))
    return T.l2_norm(diff)


def combined_loss(task_loss, context_loss, cfg: LossConfig):
    if cfg.alpha == 0.0 or context_loss is None:
        return task_loss
    return T.add(task_loss, T.scale(context_loss, cfg.alpha))
