"""Bundled experiment presets.

The five-agent observation set pairs scalar mixtures over distinct state
subsets with one two-row agent; stacked, the five matrices form an
invertible 6x6 matrix, so the network as a whole sees the full state even
though no single agent does.
"""

import numpy as np

FIVE_AGENT_C = (
    np.array([[4 / 7, 3 / 7, 0.0, 0.0, 0.0, 0.0]]),
    np.array([[0.0, 1 / 2, 1 / 4, 0.0, 1 / 4, 0.0],
              [0.0, 0.0, 1.0, 0.0, 0.0, 0.0]]),
    np.array([[0.0, 1 / 3, 0.0, 2 / 3, 0.0, 0.0]]),
    np.array([[0.0, 0.0, 2 / 5, 0.0, 3 / 5, 0.0]]),
    np.array([[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]]),
)


def five_agent_c_list():
    """Fresh copies of the bundled five-agent observation matrices."""
    return [c.copy() for c in FIVE_AGENT_C]
