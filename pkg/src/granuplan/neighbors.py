"""Fixed-radius neighbor search on a uniform cell grid.

Points are binned into cells of side `radius`; candidate pairs then only
need to be checked across the 3^dim neighboring cells.  The implementation
is fully vectorized: one argsort over cell ids plus a pair of searchsorted
calls per cell offset.
"""

import numpy as np

__all__ = ["find_neighbors"]


def _concat_ranges(starts, counts):
    # Vectorized concatenation of [s, s+1, ..., s+c-1] for each (s, c) pair.
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    nz = counts > 0
    s = starts[nz]
    c = counts[nz]
    out = np.ones(total, dtype=np.int64)
    out[0] = s[0]
    ends = np.cumsum(c)[:-1]
    out[ends] = s[1:] - (s[:-1] + c[:-1] - 1)
    return np.cumsum(out)


def _brute_pairs(positions, radius):
    # Quadratic fallback, only used when the grid would be degenerate.
    n = positions.shape[0]
    diff = positions[:, None, :] - positions[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    mask = d2 < radius * radius
    np.fill_diagonal(mask, False)
    send, recv = np.nonzero(mask)
    return send.astype(np.int64), recv.astype(np.int64)


def find_neighbors(positions, radius):
    """All directed pairs of points strictly closer than `radius`.

    Args:
        positions: (N, dim) float array.
        radius: search radius; a pair at exactly this distance is excluded.

    Returns:
        (senders, receivers) int64 arrays, sorted by (receiver, sender).
        Both directions of every pair are present; no self pairs.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 2:
        raise ValueError("positions must be (N, dim)")
    n, dim = positions.shape
    if radius <= 0:
        raise ValueError("radius must be positive")
    if n < 2:
        e = np.empty(0, dtype=np.int64)
        return e, e

    origin = positions.min(axis=0)
    cell = np.floor((positions - origin) / radius).astype(np.int64) + 1
    dims = cell.max(axis=0) + 2  # one cell of padding on each side

    # Linearized ids; fall back to brute force if the id space would overflow.
    if float(np.prod(dims.astype(np.float64))) > 4e18 or n * n <= 4096:
        send, recv = _brute_pairs(positions, radius)
    else:
        lin = cell[:, 0]
        for a in range(1, dim):
            lin = lin * dims[a] + cell[:, a]
        order = np.argsort(lin, kind="stable")
        lin_sorted = lin[order]

        strides = np.ones(dim, dtype=np.int64)
        for a in range(dim - 2, -1, -1):
            strides[a] = strides[a + 1] * dims[a + 1]
        offsets = np.stack(
            np.meshgrid(*([np.array([-1, 0, 1])] * dim), indexing="ij"), axis=-1
        ).reshape(-1, dim)
        off_lin = offsets @ strides

        send_parts = []
        recv_parts = []
        for off in off_lin:
            target = lin + off
            left = np.searchsorted(lin_sorted, target, side="left")
            right = np.searchsorted(lin_sorted, target, side="right")
            cnt = right - left
            if not cnt.any():
                continue
            recv_parts.append(np.repeat(np.arange(n, dtype=np.int64), cnt))
            send_parts.append(order[_concat_ranges(left, cnt)])
        if send_parts:
            send = np.concatenate(send_parts)
            recv = np.concatenate(recv_parts)
        else:
            send = np.empty(0, dtype=np.int64)
            recv = np.empty(0, dtype=np.int64)
        keep = send != recv
        send = send[keep]
        recv = recv[keep]
        if send.size:
            diff = positions[send] - positions[recv]
            d2 = np.einsum("ij,ij->i", diff, diff)
            keep = d2 < radius * radius
            send = send[keep]
            recv = recv[keep]

    if send.size:
        order = np.lexsort((send, recv))
        send = send[order]
        recv = recv[order]
    return send, recv
