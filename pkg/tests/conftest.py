import numpy as np
import pytest

from robustgmm import Dataset, RandomSource


class ForcedUniform(RandomSource):
    """RandomSource whose scalar uniform draws are pinned to a constant.

    The spectral filter consumes normals (power-iteration start) and then a
    single uniform (the removal threshold fraction); pinning the uniform
    makes the removal set exactly predictable while the eigenvector search
    stays honest.
    """

    def __init__(self, seed: int, forced: float):
        super().__init__(seed)
        self.forced = forced

    def uniform(self, size=None):
        if size is None:
            return self.forced
        return np.full(size, self.forced)

    def child(self, label: str) -> "ForcedUniform":
        base = super().child(label)
        return ForcedUniform(base.seed, self.forced)


@pytest.fixture
def rng():
    return RandomSource(20260815)


def make_linear_dataset(seed: int, n: int, d: int, noise: float = 0.0, p=None):
    """Linear IV data with Z correlated to X; returns (Dataset, w_true)."""
    src = RandomSource(seed)
    p = d if p is None else p
    X = src.normal((n, d))
    Z = X @ src.normal((d, p)) * 0.3 + src.normal((n, p))
    w_true = src.normal(d)
    Y = X @ w_true + noise * src.normal(n)
    return Dataset(X=X, Y=Y, Z=Z), w_true
