"""
Difference weighting
====================

The network output replaces the input only where the two disagree;
elsewhere the input is kept.
"""

import numpy as np

from volufuse.losses import apply_difference_weighting, difference_weight, max_filter

i = np.zeros((1, 1, 9), dtype=np.float32)
i[..., 4] = 0.3
o = i.copy()
o[..., 4] = 1.0     # the model brightens the dim object
o[..., 0] = 0.05    # and adds a faint ripple to the background

w = difference_weight(i, o)
print("weights:", np.round(w.ravel(), 3))
print("blended:", np.round(apply_difference_weighting(i, o, w).ravel(), 3))

# the max filter widens bright structures before weighting
print("max filtered output:", max_filter(o, 1).ravel())

# scaling both inputs together leaves the weights alone
print("scale invariant:", np.allclose(difference_weight(7 * i, 7 * o), w))
