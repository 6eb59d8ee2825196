"""Small shared building blocks."""

import torch.nn as nn


def group_norm(c: int) -> nn.GroupNorm:
    """GroupNorm with at least two channels per group.

    Synthetic views contain large flat regions; a single-channel group would
    see zero variance there, which destabilizes gradients.
    """
    for g in (8, 4, 2, 1):
        if c % g == 0 and c // g >= 2:
            return nn.GroupNorm(g, c)
    return nn.GroupNorm(1, c)
