# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled blank-filling kernels; mirrors ``_pykernels`` exactly."""

import numpy as np

IMPLEMENTATION = "cython"

ctypedef long long i64


def corrupt_arrays(const i64[:] tokens, const i64[:] starts, const i64[:] lengths,
                   const i64[:] perm, i64 mask_id, i64 start_id, i64 end_id):
    cdef Py_ssize_t n = tokens.shape[0]
    cdef Py_ssize_t k = starts.shape[0]
    cdef Py_ssize_t i, j, t, s, ln, cursor = 0, la = 0, lb = 0, masked = 0
    for i in range(k):
        s = starts[i]
        ln = lengths[i]
        if ln < 1 or s < cursor or s + ln > n:
            raise ValueError(f"span {i} ({s}, {ln}) overlaps or is out of bounds")
        cursor = s + ln
        masked += ln
    la = n - masked + k
    lb = masked + k

    part_a_arr = np.empty(la, dtype=np.int64)
    part_b_arr = np.empty(lb, dtype=np.int64)
    targets_arr = np.empty(lb, dtype=np.int64)
    pos_1_arr = np.empty(la + lb, dtype=np.int64)
    pos_2_arr = np.zeros(la + lb, dtype=np.int64)
    mask_pos_arr = np.empty(k, dtype=np.int64)
    cdef i64[:] part_a = part_a_arr
    cdef i64[:] part_b = part_b_arr
    cdef i64[:] targets = targets_arr
    cdef i64[:] pos_1 = pos_1_arr
    cdef i64[:] pos_2 = pos_2_arr
    cdef i64[:] mask_pos = mask_pos_arr

    cdef Py_ssize_t a = 0
    cursor = 0
    for i in range(k):
        s = starts[i]
        for t in range(cursor, s):
            part_a[a] = tokens[t]
            a += 1
        mask_pos[i] = a
        part_a[a] = mask_id
        a += 1
        cursor = s + lengths[i]
    for t in range(cursor, n):
        part_a[a] = tokens[t]
        a += 1
    for t in range(la):
        pos_1[t] = t

    cdef Py_ssize_t b = 0
    for j in range(k):
        i = perm[j]
        s = starts[i]
        ln = lengths[i]
        part_b[b] = start_id
        pos_1[la + b] = mask_pos[i]
        pos_2[la + b] = 1
        for t in range(ln):
            part_b[b + 1 + t] = tokens[s + t]
            targets[b + t] = tokens[s + t]
            pos_1[la + b + 1 + t] = mask_pos[i]
            pos_2[la + b + 1 + t] = t + 2
        targets[b + ln] = end_id
        b += ln + 1
    return part_a_arr, part_b_arr, targets_arr, pos_1_arr, pos_2_arr


def reconstruct_arrays(const i64[:] part_a, const i64[:] part_b, const i64[:] targets,
                       const i64[:] pos_1, const i64[:] pos_2,
                       i64 mask_id, i64 start_id, i64 end_id):
    cdef Py_ssize_t la = part_a.shape[0]
    cdef Py_ssize_t lb = part_b.shape[0]
    cdef Py_ssize_t i, j, q, m, anchor, total
    if pos_1.shape[0] != la + lb or pos_2.shape[0] != la + lb or targets.shape[0] != lb:
        raise ValueError("position/target lengths do not match part lengths")
    for i in range(la):
        if pos_1[i] != i or pos_2[i] != 0:
            raise ValueError(f"bad Part A positions at {i}")

    # per mask position: offset into part_b of its span tokens (-1 = unfilled)
    block_at_arr = np.full(la, -1, dtype=np.int64)
    block_len_arr = np.zeros(la, dtype=np.int64)
    cdef i64[:] block_at = block_at_arr
    cdef i64[:] block_len = block_len_arr
    j = 0
    total = 0
    while j < lb:
        if part_b[j] != start_id or pos_2[la + j] != 1:
            raise ValueError(f"Part B block at {j} does not open with START")
        anchor = pos_1[la + j]
        if anchor < 0 or anchor >= la or part_a[anchor] != mask_id:
            raise ValueError(f"Part B block at {j} points at non-MASK position {anchor}")
        if block_at[anchor] != -1:
            raise ValueError(f"MASK at {anchor} filled twice")
        q = j + 1
        while q < lb and pos_2[la + q] != 1:
            if pos_2[la + q] != q - j + 1 or pos_1[la + q] != anchor:
                raise ValueError(f"bad Part B positions at {q}")
            if part_b[q] == start_id:
                raise ValueError(f"START inside span at {q}")
            if targets[q - 1] != part_b[q]:
                raise ValueError(f"target mismatch at {q - 1}")
            q += 1
        if q == j + 1:
            raise ValueError(f"empty span block at {j}")
        if targets[q - 1] != end_id:
            raise ValueError(f"span block at {j} does not end with END target")
        block_at[anchor] = j + 1
        block_len[anchor] = q - j - 1
        total += q - j - 1
        j = q

    cdef Py_ssize_t nmask = 0
    for i in range(la):
        if part_a[i] == mask_id:
            nmask += 1
            if block_at[i] == -1:
                raise ValueError(f"MASK at {i} has no Part B span")
    out_arr = np.empty(la - nmask + total, dtype=np.int64)
    cdef i64[:] out = out_arr
    cdef Py_ssize_t o = 0
    for i in range(la):
        if part_a[i] == mask_id:
            for m in range(block_len[i]):
                out[o] = part_b[block_at[i] + m]
                o += 1
        else:
            out[o] = part_a[i]
            o += 1
    return out_arr


def attention_mask(Py_ssize_t len_a, Py_ssize_t len_b):
    cdef Py_ssize_t n = len_a + len_b
    cdef Py_ssize_t q, k
    mask_arr = np.zeros((n, n), dtype=np.uint8)
    cdef unsigned char[:, :] mask = mask_arr
    for q in range(n):
        if q < len_a:
            for k in range(len_a):
                mask[q, k] = 1
        else:
            for k in range(q + 1):
                mask[q, k] = 1
    return mask_arr
