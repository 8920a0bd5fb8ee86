from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from trajdrop.errors import ParameterError

FEATURES: Tuple[str, ...] = ("x", "y", "u", "v")
FEATURE_COUNT = len(FEATURES)

ArchitectureId = Literal["lstm_ed", "cnn1d", "cnn_lstm"]
ARCHITECTURES: Tuple[str, ...] = ("lstm_ed", "cnn1d", "cnn_lstm")


class ForwardMode(BaseModel):
    """How a forward pass treats its dropout layers."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["deterministic", "stochastic"] = Field(
        "deterministic", description="deterministic skips every mask"
    )
    dropout_probability: float = Field(
        0.0, ge=0.0, lt=1.0, description="Drop probability p of the masks"
    )
    seed: int = Field(0, ge=0, description="Seed of the mask stream")

    @classmethod
    def deterministic(cls) -> "ForwardMode":
        return cls(kind="deterministic")

    @classmethod
    def stochastic(cls, p: float, seed: int) -> "ForwardMode":
        return cls(kind="stochastic", dropout_probability=p, seed=seed)

    @property
    def masks_active(self) -> bool:
        return self.kind == "stochastic" and self.dropout_probability > 0.0


class NormalizationStats(BaseModel):
    """Per-feature z-score statistics, fitted on the training split only.

    With `relative` set, window positions are first measured from the last
    observed position of the history (the anchor). `apply` / `invert` are the
    plain per-feature z-score; `encode` / `decode_positions` add the anchor shift.
    """

    mean: List[float] = Field(..., min_length=FEATURE_COUNT, max_length=FEATURE_COUNT)
    std: List[float] = Field(..., min_length=FEATURE_COUNT, max_length=FEATURE_COUNT)
    relative: bool = Field(
        True, description="Positions measured from the last observed position"
    )

    @field_validator("std")
    @classmethod
    def _positive_std(cls, value: List[float]) -> List[float]:
        if any(s <= 0 for s in value):
            raise ValueError(f"std must be > 0 per feature, got {value}")
        return value

    def apply(self, features: np.ndarray) -> np.ndarray:
        """Scale an array whose last axis is (x, y, u, v)."""
        return (features - np.asarray(self.mean)) / np.asarray(self.std)

    def invert(self, features: np.ndarray) -> np.ndarray:
        return features * np.asarray(self.std) + np.asarray(self.mean)

    def invert_positions(self, positions: np.ndarray) -> np.ndarray:
        """Invert only the (x, y) part; the last axis has length 2."""
        return positions * np.asarray(self.std[:2]) + np.asarray(self.mean[:2])

    def anchors(self, histories: np.ndarray) -> np.ndarray:
        """[..., 2] last observed (x, y) of each [..., T, 4] history; zeros when absolute."""
        histories = np.asarray(histories, dtype=np.float64)
        if not self.relative:
            return np.zeros(histories.shape[:-2] + (2,))
        return histories[..., -1, :2].copy()

    def encode(self, features: np.ndarray, anchors: np.ndarray) -> np.ndarray:
        """Shift [..., steps, 4] positions by their window anchor, then z-score."""
        shifted = np.array(features, dtype=np.float64)
        shifted[..., :2] -= np.asarray(anchors)[..., None, :]
        return self.apply(shifted)

    def decode_positions(self, positions: np.ndarray, anchors: np.ndarray) -> np.ndarray:
        """[..., F, 2] network positions back to scene meters."""
        return self.invert_positions(positions) + np.asarray(anchors)[..., None, :]


class GaussianState(BaseModel):
    """Bivariate Gaussian fitted to the predicted point cloud of one step."""

    model_config = ConfigDict(frozen=True)

    mean: Tuple[float, float] = Field(..., description="(mu_x, mu_y) in meters")
    covariance: Tuple[Tuple[float, float], Tuple[float, float]] = Field(
        ..., description="2x2 covariance in m^2"
    )

    @model_validator(mode="after")
    def _check_covariance(self) -> "GaussianState":
        (sxx, sxy), (syx, syy) = self.covariance
        if sxy != syx:
            raise ValueError(f"covariance not symmetric: {sxy} != {syx}")
        if sxx < 0 or syy < 0:
            raise ValueError(f"negative variance on the diagonal: {sxx}, {syy}")
        bound = np.sqrt(sxx * syy)
        if abs(sxy) > bound * (1 + 1e-9) + 1e-15:
            raise ValueError(f"|cov_xy|={abs(sxy)} exceeds sigma_x*sigma_y={bound}")
        return self

    @property
    def sigma(self) -> Tuple[float, float]:
        return (
            float(np.sqrt(self.covariance[0][0])),
            float(np.sqrt(self.covariance[1][1])),
        )

    @property
    def cov_xy(self) -> float:
        return self.covariance[0][1]


class TrajectoryMetrics(BaseModel):
    """Displacement errors and confidence scores of one test trajectory."""

    ade: float = Field(..., ge=0, description="Average displacement error (m)")
    fde: float = Field(..., ge=0, description="Final displacement error (m)")
    cs_x: Optional[float] = Field(None, ge=0, le=100)
    cs_y: Optional[float] = Field(None, ge=0, le=100)


class EvaluationReport(BaseModel):
    """One (model, p, horizon) cell aggregated over a test set."""

    model: str = Field(..., min_length=1, description="Model id, '+mc' when sampled")
    p: float = Field(..., ge=0, lt=1, description="Inference dropout probability")
    horizon_s: float = Field(..., gt=0, description="Prediction horizon T_f (s)")
    ade: float = Field(..., ge=0)
    fde: float = Field(..., ge=0)
    cs_x: Optional[float] = Field(None, ge=0, le=100)
    cs_y: Optional[float] = Field(None, ge=0, le=100)
    n_traj: int = Field(..., ge=1, description="Number of test trajectories")
    n_mc: int = Field(..., ge=1, description="Number of MC passes")


class TrainConfig(BaseModel):
    """Training protocol: Adam on MSE with early stopping and LR plateau."""

    model_config = ConfigDict(validate_assignment=True)

    epochs: int = Field(100, ge=0)
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    validation_fraction: float = Field(0.10, gt=0, lt=1)
    early_stop_patience: int = Field(15, ge=1)
    lr_reduce_factor: float = Field(0.5, gt=0, lt=1)
    lr_reduce_patience: int = Field(5, ge=1)
    min_lr: float = Field(1e-5, gt=0)
    min_delta: float = Field(1e-6, ge=0, description="Smallest counted improvement")
    seed: int = Field(0, ge=0)
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    adam_epsilon: float = Field(1e-7, gt=0)


class TrainLogEntry(BaseModel):
    epoch: int = Field(..., ge=1)
    train_mse: float
    val_mse: float
    lr: float = Field(..., gt=0)
    seconds: float = Field(0.0, ge=0, description="Wall time, informational only")


class TrainLog(BaseModel):
    """One entry per completed epoch."""

    entries: List[TrainLogEntry] = Field(default_factory=list)

    @property
    def val_history(self) -> List[float]:
        return [entry.val_mse for entry in self.entries]

    def numeric_rows(self) -> List[Tuple[int, float, float, float]]:
        return [(e.epoch, e.train_mse, e.val_mse, e.lr) for e in self.entries]

    def __eq__(self, other: object) -> bool:
        # Wall time differs between identical runs
        if not isinstance(other, TrainLog):
            return NotImplemented
        return self.numeric_rows() == other.numeric_rows()

    def __len__(self) -> int:
        return len(self.entries)


class GradientCheckReport(BaseModel):
    """Max relative error between analytic and finite-difference gradients."""

    errors: Dict[str, float] = Field(default_factory=dict)
    checked: Dict[str, int] = Field(default_factory=dict)
    tolerance: float = Field(..., gt=0)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def check_probability(p: float, name: str = "p") -> float:
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"{name} must be in [0, 1), got {p}")
    return p
