from __future__ import annotations

from dataclasses import dataclass, replace


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters shared by pretraining and the clustering regimes.

    Defaults are the full-scale values; desk-scale runs override
    ``pretrain_epochs`` and the image size.
    """

    lambda_rec: float = 0.1
    update_interval: int = 140
    tolerance: float = 0.001
    pretrain_epochs: int = 200
    batch_size: int = 128
    kmeans_restarts: int = 20
    max_iterations: int = 20000
    seed: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.lambda_rec <= 1.0:
            raise ValueError(f"lambda_rec must be in [0, 1], got {self.lambda_rec}")
        if self.update_interval < 1:
            raise ValueError("update_interval must be >= 1")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.kmeans_restarts < 1:
            raise ValueError("kmeans_restarts must be >= 1")
        if self.pretrain_epochs < 0 or self.max_iterations < 0:
            raise ValueError("epoch and iteration counts must be non-negative")

    def with_overrides(self, **changes) -> "TrainConfig":
        return replace(self, **{k: v for k, v in changes.items() if v is not None})
