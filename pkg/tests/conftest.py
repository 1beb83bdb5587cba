import numpy as np


def randomize_zero_params(module, seed=0, scale=0.05):
    """Give zero-initialized parameters small random values.

    Finite-difference checks evaluate at a single point; zero biases feeding
    stacked ReLUs put pre-activations exactly on the kink, where central
    differences measure the average of the two one-sided slopes instead of
    the subgradient. Nudging the parameters makes the point differentiable.
    """
    rng = np.random.default_rng(seed)
    for p in module.parameters():
        if not p.data.any():
            p.data = rng.uniform(-scale, scale, p.data.shape).astype(p.data.dtype)
