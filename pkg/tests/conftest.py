from __future__ import annotations

import numpy as np
import pytest

from panelcluster import Grouping, PanelData

THETA_STATIC = np.array([[3.0, -3.0], [1.0, -2.0], [4.0, -1.0]])


def make_grouped_panel(n_per_group=(10, 10, 10), t=40, thetas=THETA_STATIC,
                       noise=0.5, seed=0, mus=None):
    """Synthetic panel with known group structure; returns (panel, truth)."""
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(1, len(n_per_group) + 1), n_per_group)
    n = labels.size
    p = thetas.shape[1]
    x = rng.standard_normal((n, t, p))
    y = np.einsum("ntp,np->nt", x, thetas[labels - 1])
    if noise:
        y = y + noise * rng.standard_normal((n, t))
    if mus is not None:
        y = y + mus[labels - 1]
    return PanelData(y=y, x=x), Grouping(labels=labels, k=len(n_per_group))


@pytest.fixture
def small_panel():
    panel, truth = make_grouped_panel(n_per_group=(4, 4, 4), t=20, seed=3)
    return panel, truth
