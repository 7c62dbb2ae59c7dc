"""Properties of the trained desk model (shared session fixture)."""

import numpy as np
import pytest

from bathyscope.explain import acamr
from bathyscope.net import forward, forward_with_channel_ablated

pytestmark = pytest.mark.slow


def test_saliency_mass_lies_over_water(desk):
    model = desk["model"]
    fractions = []
    for p in desk["test"][:5]:
        sal = acamr(model, p.x_norm, p.y, p.mask, p.d_max)
        assert sal.grid.max() == 1.0
        water = p.y > 0
        fractions.append(sal.grid[water].sum() / sal.grid.sum())
    assert min(fractions) > 0.5


def test_some_channel_matters(desk):
    p = desk["test"][0]
    base = forward(desk["model"], p.x_norm)
    changed = [not np.array_equal(forward_with_channel_ablated(desk["model"], p.x_norm, "last_decoder_block", k), base)
               for k in range(desk["model"].config.unet_filters[0])]
    assert any(changed)


def test_training_history_decreases(desk):
    losses = [r["loss"] for r in desk["history"]]
    assert losses[-1] < 0.5 * losses[0]
