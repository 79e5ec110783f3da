"""Independent reference implementations used to pin expected values.

Everything here is deliberately naive (per-query python loops, explicit set
materialization) and never shares code with the batched paths it checks.
"""

import numpy as np

from lshformer.attention import SELF_PENALTY
from lshformer.hashing import chunk_neighborhood


def dense_loop_attention(q, k, v, scale=True, causal=True, exclude_self=False):
    """Double-loop softmax attention, one query at a time."""
    l, dk = q.shape
    alpha = 1.0 / np.sqrt(dk) if scale else 1.0
    out = np.zeros((l, v.shape[1]), dtype=np.float64)
    for i in range(l):
        js = [j for j in range(l) if (not causal) or j <= i]
        logits = np.array([alpha * float(q[i] @ k[j]) for j in js], dtype=np.float64)
        if exclude_self:
            logits[js.index(i)] -= SELF_PENALTY
        w = np.exp(logits - logits.max())
        w /= w.sum()
        out[i] = w @ v[js]
    return out


def union_set_members(rounds, m, i, l, causal=True):
    """The union over rounds of bucket-equal, chunk-reachable key positions."""
    members = set()
    for rh in rounds:
        sr = rh.inverse_perm.indices
        for j in range(l):
            if causal and j > i:
                continue
            if rh.bucket_ids[i] == rh.bucket_ids[j] and chunk_neighborhood(sr[i], sr[j], m):
                members.add(j)
    return sorted(members)


def union_set_attention(q, k, v, rounds, m, scale=True, causal=True):
    """Dense attention over the explicitly materialized union pair set, with
    the shared-QK self penalty."""
    l, dk = q.shape
    alpha = 1.0 / np.sqrt(dk) if scale else 1.0
    out = np.zeros((l, v.shape[1]), dtype=np.float64)
    for i in range(l):
        js = union_set_members(rounds, m, i, l, causal)
        logits = np.array([alpha * float(q[i] @ k[j]) - (SELF_PENALTY if j == i else 0.0)
                           for j in js], dtype=np.float64)
        w = np.exp(logits - logits.max())
        w /= w.sum()
        out[i] = w @ v[js]
    return out


def central_diff_grad(loss_fn, arr, eps=1e-5, indices=None):
    """Central finite differences of ``loss_fn()`` w.r.t. entries of ``arr``
    (mutated in place and restored)."""
    flat = arr.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    fd = np.zeros(len(list(indices)) if not isinstance(indices, range) else flat.size)
    fd = {}
    for ix in indices:
        orig = flat[ix]
        flat[ix] = orig + eps
        up = loss_fn()
        flat[ix] = orig - eps
        dn = loss_fn()
        flat[ix] = orig
        fd[ix] = (up - dn) / (2.0 * eps)
    return fd


def grad_vector_error(analytic, fd_map):
    """max |analytic - fd| / max |fd| over the probed entries."""
    flat = analytic.reshape(-1)
    diffs = [abs(flat[ix] - fd) for ix, fd in fd_map.items()]
    scale = max((abs(fd) for fd in fd_map.values()), default=0.0)
    scale = max(scale, 1e-12)
    return max(diffs) / scale
