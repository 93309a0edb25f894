import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("mflab", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("mflab")

TANH1 = 0.7615941559557649       # tanh(1)
SECH2_1 = 0.41997434161402603    # 1 - tanh(1)^2


class ConstD2Loss:
    """Test loss with a constant derivative in the prediction."""

    def __init__(self, c):
        self.c = c

    def value(self, y, yhat):
        return self.c * (np.asarray(yhat, dtype=float) - y)

    def d2(self, y, yhat):
        return np.full(np.shape(np.asarray(yhat, dtype=float) - y), float(self.c))


@pytest.fixture
def toy_l2():
    """L=2, d=1, n1=2 network with w1=[1,-1], w2=[3;1]."""
    from mflab import FiniteWeights, NetworkArch
    arch = NetworkArch(1, (2, 1))
    w = FiniteWeights([np.array([[1.0], [-1.0]]), np.array([[3.0], [1.0]])])
    return arch, w
