"""Random case generators shared by the loss tests and the acceptance suite."""

import numpy as np

from longtail_lab.losses import AdjustingTerm, ala_loss, la_loss, quantity_factor


def target_only(a_y, y, C):
    A = np.zeros(C)
    A[y] = a_y
    return AdjustingTerm(A, target_only=True)


def generic_ala_case(rng, s=30.0):
    """Random ALA input whose target is not already fit (off-target mass >= 1e-2).

    On fitted samples the detached and full derivatives differ by
    s * (1 - p_y) * QF / 2, which shrinks to rounding level.
    """
    while True:
        C = int(rng.integers(2, 7))
        f = rng.uniform(-0.9, 0.9, C)
        y = int(rng.integers(C))
        counts = rng.integers(1, 600, C)
        if -ala_loss(f, y, counts, s)[1][y] / s >= 1e-2:
            return C, f, y, counts, s


def dominance_pair(rng, s=30.0):
    """Equal logits, target adjusted by QF of a 500-sample vs a 5-sample class.

    Off-target logits stay within [f_y - 1, f_y + 0.8] so that the head
    gradient 1 - p_y is resolvable in float64.
    """
    C = int(rng.integers(2, 11))
    fy = rng.uniform(-1, 1)
    f = rng.uniform(max(-1.0, fy - 1.0), min(1.0, fy + 0.8), C)
    f[0] = fy
    qf = quantity_factor([500, 5])
    head = la_loss(f, 0, target_only(qf[0], 0, C), s)
    tail = la_loss(f, 0, target_only(qf[1], 0, C), s)
    return head, tail
