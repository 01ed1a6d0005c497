"""Brute-force reference implementations shared by several test modules."""

import numpy as np
from scipy import ndimage

FOUR = ndimage.generate_binary_structure(2, 1)


def sweep_oracle(img: np.ndarray) -> list[tuple[float, float]]:
    """Superlevel threshold sweep with connected-component labelling at every level."""
    levels = np.unique(img)[::-1]
    prev_labels, births = None, {}
    pairs = []
    for t in levels:
        labels, n = ndimage.label(img >= t, structure=FOUR)
        new_births = {}
        for comp in range(1, n + 1):
            region = labels == comp
            olds = set() if prev_labels is None else set(np.unique(prev_labels[region])) - {0}
            if not olds:
                new_births[comp] = t
                continue
            ranked = sorted(olds, key=lambda o: births[o], reverse=True)
            new_births[comp] = births[ranked[0]]
            for o in ranked[1:]:
                pairs.append((births[o], t))
        prev_labels, births = labels, new_births
    (survivor,) = births.values()
    pairs.append((survivor, levels[-1]))
    return sorted(pairs, reverse=True)
