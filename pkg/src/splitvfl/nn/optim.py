from dataclasses import dataclass

import numpy as np

from splitvfl.errors import ConfigError
from splitvfl.nn.params import ParameterStore


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    kind: str = "sgd"

    def __post_init__(self):
        if self.kind != "sgd":
            raise ConfigError(f"unsupported optimizer {self.kind!r}")
        # lr == 0 is allowed: it is the fixed-point configuration used in tests
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")


def sgd_step(params: ParameterStore, cfg: OptimizerConfig) -> ParameterStore:
    """``v <- m*v + g; w <- w - lr*v``, then clear gradients.  Updates in place."""
    for p in params:
        dt = p.value.dtype.type
        if p.velocity is None:
            p.velocity = np.zeros_like(p.value)
        p.velocity *= dt(cfg.momentum)
        p.velocity += p.grad
        p.value -= dt(cfg.learning_rate) * p.velocity
        p.grad[...] = 0
    return params
