"""Reference (pure-Python) blank-filling kernels.

Same signatures and semantics as the compiled ``_ckernels`` module; the
package picks one at import time. All arrays are 1-D ``int64`` except the
attention mask.
"""

import numpy as np

IMPLEMENTATION = "python"


def corrupt_arrays(tokens, starts, lengths, perm, mask_id, start_id, end_id):
    """Build Part A / Part B, targets and both position rows.

    ``starts``/``lengths`` describe spans in sequence order; ``perm[j]`` is the
    span placed j-th in Part B.
    """
    n = len(tokens)
    k = len(starts)
    part_a = []
    mask_pos = [0] * k
    cursor = 0
    for i in range(k):
        s = int(starts[i])
        ln = int(lengths[i])
        if ln < 1 or s < cursor or s + ln > n:
            raise ValueError(f"span {i} ({s}, {ln}) overlaps or is out of bounds")
        part_a.extend(int(t) for t in tokens[cursor:s])
        mask_pos[i] = len(part_a)
        part_a.append(mask_id)
        cursor = s + ln
    part_a.extend(int(t) for t in tokens[cursor:n])

    la = len(part_a)
    pos_1 = list(range(la))
    pos_2 = [0] * la
    part_b = []
    targets = []
    for j in range(k):
        i = int(perm[j])
        s = int(starts[i])
        ln = int(lengths[i])
        span = [int(t) for t in tokens[s:s + ln]]
        part_b.append(start_id)
        part_b.extend(span)
        targets.extend(span)
        targets.append(end_id)
        pos_1.extend([mask_pos[i]] * (ln + 1))
        pos_2.extend(range(1, ln + 2))
    as_arr = lambda xs: np.asarray(xs, dtype=np.int64)
    return as_arr(part_a), as_arr(part_b), as_arr(targets), as_arr(pos_1), as_arr(pos_2)


def reconstruct_arrays(part_a, part_b, targets, pos_1, pos_2, mask_id, start_id, end_id):
    """Invert ``corrupt_arrays``; raises ValueError on any inconsistency."""
    la = len(part_a)
    lb = len(part_b)
    if len(pos_1) != la + lb or len(pos_2) != la + lb or len(targets) != lb:
        raise ValueError("position/target lengths do not match part lengths")
    for i in range(la):
        if pos_1[i] != i or pos_2[i] != 0:
            raise ValueError(f"bad Part A positions at {i}")

    # mask position -> span tokens
    fill = {}
    j = 0
    while j < lb:
        if part_b[j] != start_id or pos_2[la + j] != 1:
            raise ValueError(f"Part B block at {j} does not open with START")
        anchor = int(pos_1[la + j])
        if not (0 <= anchor < la) or part_a[anchor] != mask_id:
            raise ValueError(f"Part B block at {j} points at non-MASK position {anchor}")
        if anchor in fill:
            raise ValueError(f"MASK at {anchor} filled twice")
        span = []
        q = j + 1
        while q < lb and pos_2[la + q] != 1:
            if pos_2[la + q] != q - j + 1 or pos_1[la + q] != anchor:
                raise ValueError(f"bad Part B positions at {q}")
            if part_b[q] == start_id:
                raise ValueError(f"START inside span at {q}")
            span.append(int(part_b[q]))
            q += 1
        if not span:
            raise ValueError(f"empty span block at {j}")
        for m, tok in enumerate(span):
            if targets[j + m] != tok:
                raise ValueError(f"target mismatch at {j + m}")
        if targets[q - 1] != end_id:
            raise ValueError(f"span block at {j} does not end with END target")
        fill[anchor] = span
        j = q

    out = []
    for i in range(la):
        tok = int(part_a[i])
        if tok == mask_id:
            if i not in fill:
                raise ValueError(f"MASK at {i} has no Part B span")
            out.extend(fill[i])
        else:
            out.append(tok)
    return np.asarray(out, dtype=np.int64)


def attention_mask(len_a, len_b):
    """mask[q, k] = 1 iff query q may attend key k (Part A laid out first)."""
    n = len_a + len_b
    mask = np.zeros((n, n), dtype=np.uint8)
    for q in range(n):
        if q < len_a:
            for k in range(len_a):
                mask[q, k] = 1
        else:
            for k in range(q + 1):
                mask[q, k] = 1
    return mask
