import numpy as np

from sdflow.verify import pick_coordinates


def active_coordinates(params, loss, seed=0, n=48):
    """Coordinates whose gradient is large enough for finite differences to resolve."""
    total = sum(p.numel() for p in params)
    return pick_coordinates(total, params, loss, np.random.default_rng(seed), n_random=0, n_active=n,
                            threshold=1e-6)
