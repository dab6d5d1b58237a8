"""Independent oracles and small fixtures shared by the test modules."""

from __future__ import annotations

import numpy as np

from deps.interactions import InteractionLog


def central_difference(f, array: np.ndarray, flat_index: int, h: float = 1e-5) -> float:
    """(f(x + h e_k) - f(x - h e_k)) / 2h, perturbing ``array`` in place."""
    view = array.reshape(-1)
    saved = view[flat_index]
    view[flat_index] = saved + h
    up = f()
    view[flat_index] = saved - h
    down = f()
    view[flat_index] = saved
    return (up - down) / (2.0 * h)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def make_log(rows, n_users=None, n_items=None) -> InteractionLog:
    """rows of (user, item, time, click)."""
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    n_users = n_users if n_users is not None else int(arr[:, 0].max()) + 1
    n_items = n_items if n_items is not None else int(arr[:, 1].max()) + 1
    return InteractionLog(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], n_users, n_items)


def random_log(seed: int, n_users: int = 6, n_items: int = 8, n: int = 60, click_rate: float = 0.6) -> InteractionLog:
    rng = np.random.default_rng(seed)
    rows = np.column_stack(
        [
            rng.integers(0, n_users, n),
            rng.integers(0, n_items, n),
            rng.integers(0, n // 2, n),
            (rng.random(n) < click_rate).astype(np.int64),
        ]
    )
    return make_log(rows, n_users, n_items)
