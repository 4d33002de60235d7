"""Real-valued packing of the network input (Gram matrix) and output (U_k, W_k).

Input: a Hermitian n x n matrix folds into one real n x n matrix holding the
real parts on and above the diagonal and the imaginary parts strictly below.

Output: one fixed slot per user of ``2*n_rx*d_max + d_max**2`` reals
(12 for n_rx = d_max = 2)::

    [Re U_00, Im U_00, Re U_10, Im U_10,      # U column 0
     Re U_01, Im U_01, Re U_11, Im U_11,      # U column 1
     W_00, Re W_01, Im W_01, W_11]            # upper triangle of W, row-major

A single-stream user fills only U column 0 and W_00; every other position of
its slot is zero.

All functions accept a leading batch axis where noted.
"""
import numpy as np

D_MAX = 2


class NotHermitian(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


def slot_size(n_rx, d_max=D_MAX):
    return 2 * n_rx * d_max + d_max * d_max


def output_size(n_users, n_rx, d_max=D_MAX):
    return n_users * slot_size(n_rx, d_max)


def pack_gram(g):
    """Fold Hermitian ``g`` (n, n) or (B, n, n) into a real matrix of the same shape."""
    g = np.asarray(g)
    scale = max(1.0, float(np.abs(g).max(initial=0.0)))
    if np.abs(g - np.conj(np.swapaxes(g, -1, -2))).max(initial=0.0) > 1e-9 * scale:
        raise NotHermitian("input Gram matrix is not Hermitian")
    n = g.shape[-1]
    upper = np.triu(np.ones((n, n), dtype=bool))
    return np.where(upper, g.real, g.imag)


def unpack_gram(m):
    m = np.asarray(m, dtype=np.float64)
    strict_upper = np.triu(m, 1)
    lower = np.tril(m, -1)
    re = np.triu(m) + np.swapaxes(strict_upper, -1, -2)
    im = lower - np.swapaxes(lower, -1, -2)
    return re + 1j * im


def _u_index(n_rx, col, row):
    return 2 * (col * n_rx + row)


def w_positions(n_rx, d_max=D_MAX):
    """(i, j, offset) for the upper triangle of W inside a user slot."""
    pos = []
    off = 2 * n_rx * d_max
    for i in range(d_max):
        for j in range(i, d_max):
            pos.append((i, j, off))
            off += 1 if i == j else 2
    return pos


def slot_mask(n_rx, dk, d_max=D_MAX):
    m = np.zeros(slot_size(n_rx, d_max))
    for c in range(dk):
        for r in range(n_rx):
            i = _u_index(n_rx, c, r)
            m[i:i + 2] = 1.0
    for i, j, off in w_positions(n_rx, d_max):
        if i < dk and j < dk:
            m[off:off + (1 if i == j else 2)] = 1.0
    return m


def stream_mask(d, n_rx=2, d_max=D_MAX):
    """1.0 at positions valid for stream counts ``d``; shape (len, ) or (B, len)."""
    d = np.asarray(d)
    table = {dk: slot_mask(n_rx, dk, d_max) for dk in range(1, d_max + 1)}
    if d.ndim == 1:
        return np.concatenate([table[int(dk)] for dk in d])
    return np.stack([stream_mask(row, n_rx, d_max) for row in d])


def pack_uw(u, w, d, d_max=D_MAX):
    """Pack per-user U_k (n_rx x d_k) and Hermitian W_k (d_k x d_k)."""
    if not len(u) == len(w) == len(d):
        raise ShapeMismatch("u, w and d must have one entry per user")
    n_rx = u[0].shape[0]
    size = slot_size(n_rx, d_max)
    out = np.zeros(len(d) * size)
    for k, (uk, wk, dk) in enumerate(zip(u, w, d)):
        uk, wk = np.asarray(uk), np.asarray(wk)
        if uk.shape != (n_rx, dk) or wk.shape != (dk, dk):
            raise ShapeMismatch(f"user {k}: U {uk.shape}, W {wk.shape}, d_k={dk}")
        base = k * size
        for c in range(dk):
            for r in range(n_rx):
                i = base + _u_index(n_rx, c, r)
                out[i] = uk[r, c].real
                out[i + 1] = uk[r, c].imag
        for i, j, off in w_positions(n_rx, d_max):
            if i < dk and j < dk:
                out[base + off] = wk[i, j].real
                if i != j:
                    out[base + off + 1] = wk[i, j].imag
    return out


def unpack_uw(p, d, n_rx=2, d_max=D_MAX):
    """Inverse of :func:`pack_uw`; positions outside each user's d_k are ignored."""
    p = np.asarray(p, dtype=np.float64)
    size = slot_size(n_rx, d_max)
    u, w = [], []
    for k, dk in enumerate(d):
        dk = int(dk)
        slot = p[k * size:(k + 1) * size]
        uk = np.zeros((n_rx, dk), dtype=np.complex128)
        for c in range(dk):
            for r in range(n_rx):
                i = _u_index(n_rx, c, r)
                uk[r, c] = slot[i] + 1j * slot[i + 1]
        wk = np.zeros((dk, dk), dtype=np.complex128)
        for i, j, off in w_positions(n_rx, d_max):
            if i < dk and j < dk:
                if i == j:
                    wk[i, i] = slot[off]
                else:
                    wk[i, j] = slot[off] + 1j * slot[off + 1]
                    wk[j, i] = np.conj(wk[i, j])
        u.append(uk)
        w.append(wk)
    return u, w


def unpack_uw_padded(p, n_users, n_rx=2, d_max=D_MAX):
    """Batched unpack into padded arrays U (B, K, n_rx, d_max), W (B, K, d_max, d_max).

    No masking is applied; callers multiply by :func:`stream_mask` first.
    """
    p = np.asarray(p, dtype=np.float64).reshape(-1, n_users, slot_size(n_rx, d_max))
    nu = 2 * n_rx * d_max
    uri = p[..., :nu].reshape(p.shape[0], n_users, d_max, n_rx, 2)
    u = (uri[..., 0] + 1j * uri[..., 1]).swapaxes(-1, -2)
    w = np.zeros((p.shape[0], n_users, d_max, d_max), dtype=np.complex128)
    for i, j, off in w_positions(n_rx, d_max):
        if i == j:
            w[..., i, i] = p[..., off]
        else:
            w[..., i, j] = p[..., off] + 1j * p[..., off + 1]
            w[..., j, i] = p[..., off] - 1j * p[..., off + 1]
    return u, w


def pack_uw_padded(u, w, n_rx=2, d_max=D_MAX):
    """Inverse of :func:`unpack_uw_padded` (upper triangle of W is read)."""
    b, k = u.shape[:2]
    ut = np.asarray(u).swapaxes(-1, -2)
    out = np.zeros((b, k, slot_size(n_rx, d_max)))
    nu = 2 * n_rx * d_max
    out[..., :nu] = np.stack([ut.real, ut.imag], axis=-1).reshape(b, k, nu)
    for i, j, off in w_positions(n_rx, d_max):
        out[..., off] = w[..., i, j].real
        if i != j:
            out[..., off + 1] = w[..., i, j].imag
    return out.reshape(b, -1)
