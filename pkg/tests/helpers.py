"""Small shared constructors for the test modules."""

import numpy as np

from nlbbpp.configspace import ConfigSpace, line_window, random_density


def space(m, n_max, h=1.0):
    return ConfigSpace(line_window(m, h), n_max)


def random_pair(m, n_max, seed=0):
    sp = space(m, n_max)
    g = np.random.default_rng(seed)
    return random_density(sp, g), random_density(sp, g)
