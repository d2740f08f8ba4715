"""Pure numpy grid-encoding kernels, used when the compiled extension is absent."""

import numpy as np

_PRIMES = np.array([1, 2654435761, 805459861], dtype=np.uint64)


def _corner_bits(m):
    c = np.arange(1 << m)
    return ((c[:, None] >> np.arange(m - 1, -1, -1)[None, :]) & 1).astype(bool)


def level_forward(x, table, res, hashed, tangents):
    """Multilinear lookup of one grid level.

    Returns ``(feats, dfeats, idx, w, dw)``: interpolated features ``(B, F)``,
    their spatial tangents ``(m, B, F)`` (or None), corner indices and
    weights ``(B, C)``, and weight derivatives ``(B, m, C)`` (or None).
    """
    B, m = x.shape
    scale = 0.5 * (res - 1)
    u = (x + 1.0) * scale
    cell = np.clip(np.floor(u).astype(np.int64), 0, res - 2)
    t = u - cell
    bits = _corner_bits(m)
    verts = cell[:, None, :] + bits[None, :, :]
    wfac = np.where(bits[None], t[:, None, :], 1.0 - t[:, None, :])
    w = np.prod(wfac, axis=2)
    if hashed:
        h = np.bitwise_xor.reduce(verts.astype(np.uint64) * _PRIMES[:m], axis=2)
        idx = (h % np.uint64(table.shape[0])).astype(np.int64)
    else:
        idx = np.zeros(verts.shape[:2], dtype=np.int64)
        for j in range(m):
            idx = idx * res + verts[..., j]
    gathered = table[idx]
    feats = np.einsum("bc,bcf->bf", w, gathered)
    if not tangents:
        return feats, None, idx, w, None
    dw = np.empty((B, m, 1 << m))
    for j in range(m):
        others = np.prod(np.delete(wfac, j, axis=2), axis=2)
        dw[:, j, :] = scale * np.where(bits[:, j], 1.0, -1.0) * others
    dfeats = np.einsum("bjc,bcf->jbf", dw, gathered)
    return feats, dfeats, idx, w, dw


def level_backward(idx, w, dw, gfeat, gdfeat, grad_table):
    """Scatter-add feature adjoints back into ``grad_table`` in place."""
    contrib = w[:, :, None] * gfeat[:, None, :]
    if dw is not None and gdfeat is not None:
        contrib = contrib + np.einsum("bjc,jbf->bcf", dw, gdfeat)
    flat = idx.ravel()
    R = grad_table.shape[0]
    for f in range(grad_table.shape[1]):
        grad_table[:, f] += np.bincount(flat, weights=contrib[..., f].ravel(), minlength=R)
