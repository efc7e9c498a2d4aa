"""Multi-output linear regressor from embeddings to 2K raw scores."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


class SingularSystemError(np.linalg.LinAlgError):
    """Normal equations are rank deficient and no ridge term was given."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 500
    learning_rate: float = 1e-3
    epochs: int = 50
    seed: int = 0
    shuffle_each_epoch: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class LinearScoreModel:
    weights: np.ndarray  # (2K, m)
    bias: np.ndarray  # (2K,)
    config: TrainConfig | None = None
    final_train_loss: float = float("nan")
    loss_history: list[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def predict(self, embeddings) -> np.ndarray:
        x = np.asarray(embeddings, dtype=float)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.dim:
            raise ValueError(f"dimension mismatch: expected {self.dim}, got {x.shape[1]}")
        out = x @ self.weights.T + self.bias
        return out[0] if single else out

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
            "config": None if self.config is None else asdict(self.config),
            "final_train_loss": self.final_train_loss,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinearScoreModel":
        cfg = d.get("config")
        return cls(
            weights=np.asarray(d["weights"], dtype=float),
            bias=np.asarray(d["bias"], dtype=float),
            config=None if cfg is None else TrainConfig(**cfg),
            final_train_loss=float(d.get("final_train_loss", float("nan"))),
        )


def predict_linear(model: LinearScoreModel, embedding) -> np.ndarray:
    return model.predict(embedding)


def mse_loss(weights, bias, x, y) -> float:
    r = x @ weights.T + bias - y
    return float(np.mean(r * r))


def mse_grad(weights, bias, x, y) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the loss averaged over rows and over outputs."""
    r = x @ weights.T + bias - y
    scale = 2.0 / r.size
    return scale * (r.T @ x), scale * r.sum(axis=0)


def _xy(data, targets):
    if targets is None:
        x, y = data.embeddings, data.targets
    else:
        x, y = data, targets
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] == 0 or x.shape[0] != y.shape[0]:
        raise ValueError("regression set must be non-empty with one target row per embedding")
    return x, y


def fit_linear(data, cfg: TrainConfig = TrainConfig(), targets=None) -> LinearScoreModel:
    """Mini-batch gradient descent from zero weights.

    ``data`` is a Dataset, or an embedding matrix when ``targets`` is given.
    The loss history records the full-set loss after every epoch.
    """
    x, y = _xy(data, targets)
    n = x.shape[0]
    w = np.zeros((y.shape[1], x.shape[1]))
    b = np.zeros(y.shape[1])
    rng = np.random.default_rng(cfg.seed)
    history = []
    order = np.arange(n)
    for epoch in range(1, cfg.epochs + 1):
        if cfg.shuffle_each_epoch:
            order = rng.permutation(n)
        with np.errstate(over="ignore", invalid="ignore"):
            for s in range(0, n, cfg.batch_size):
                idx = order[s : s + cfg.batch_size]
                gw, gb = mse_grad(w, b, x[idx], y[idx])
                w -= cfg.learning_rate * gw
                b -= cfg.learning_rate * gb
            loss = mse_loss(w, b, x, y)
        if not np.isfinite(loss):
            raise DivergenceError(
                f"training loss became non-finite at epoch {epoch} "
                f"(learning_rate={cfg.learning_rate}); lower the learning rate"
            )
        history.append(loss)
    return LinearScoreModel(w, b, cfg, history[-1], history)


def fit_linear_closed_form(data, ridge: float = 0.0, targets=None) -> LinearScoreModel:
    """Exact (ridge-)least squares; the bias is not penalized."""
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    x, y = _xy(data, targets)
    xm, ym = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - xm, y - ym
    gram = xc.T @ xc + ridge * np.eye(x.shape[1])
    if ridge == 0 and np.linalg.matrix_rank(gram) < x.shape[1]:
        raise SingularSystemError("normal equations are singular; use ridge > 0")
    w = np.linalg.solve(gram, xc.T @ yc).T
    b = ym - w @ xm
    return LinearScoreModel(w, b, None, mse_loss(w, b, x, y))
