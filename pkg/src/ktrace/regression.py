"""Sparse binary logistic regression with a deterministic trainer.

The objective is the negative log-likelihood plus an L2 penalty that
excludes bias weights:

    J(w) = sum_i [softplus(z_i) - y_i z_i] + (l2 / 2) ||w_reg||^2,
    z_i = x_i . w

with gradient  X^T (sigma(z) - y) + l2 * w_reg.  Training is full-batch
gradient descent with a step-halving line search: every accepted step
strictly decreases J, the step grows after each accepted epoch, and the
run stops when the relative improvement drops below the tolerance.
There is no randomness anywhere (weights start at zero), so a fit is a
pure function of the training matrix, labels and config.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from ktrace.core import ConfigError, SparseVector, canonical_json, dot
from ktrace.features import Encoder, Recipe


class TrainingDivergenceError(RuntimeError):
    """Non-finite loss encountered during training."""


@dataclass(frozen=True)
class TrainConfig:
    l2: float = 1e-6
    max_epochs: int = 500
    tol: float = 1e-7
    initial_step: float = 1.0
    max_halvings: int = 60

    def __post_init__(self) -> None:
        if self.l2 < 0:
            raise ConfigError("l2 must be >= 0")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.tol < 0 or self.initial_step <= 0:
            raise ConfigError("tol must be >= 0 and initial_step > 0")

    def to_json(self) -> dict:
        return {
            "l2": self.l2,
            "max_epochs": self.max_epochs,
            "tol": self.tol,
            "initial_step": self.initial_step,
            "max_halvings": self.max_halvings,
        }


def _as_csr(X) -> sp.csr_matrix:
    if sp.issparse(X):
        return X.tocsr()
    return sp.csr_matrix(np.asarray(X, dtype=np.float64))


def reg_mask_for(encoder: Encoder) -> np.ndarray:
    """Regularization mask over the encoder dimension: bias blocks excluded."""
    mask = np.ones(encoder.dim, dtype=np.float64)
    for fam, off, size in encoder.blocks:
        if fam.kind == "bias":
            mask[off : off + size] = 0.0
    return mask


def nll(weights: np.ndarray, X, y: np.ndarray, l2: float = 0.0, reg_mask: np.ndarray | None = None) -> float:
    """Objective value only (shares the definition with nll_and_gradient)."""
    X = _as_csr(X)
    # overflow to inf/nan is detected by callers, not warned about
    with np.errstate(over="ignore", invalid="ignore"):
        z = X @ weights
        data = float(np.sum(np.logaddexp(0.0, z) - y * z))
        if l2:
            w_reg = weights if reg_mask is None else weights * reg_mask
            data += 0.5 * l2 * float(np.sum(w_reg * w_reg))
    return data


def nll_and_gradient(
    weights: np.ndarray,
    X,
    y: np.ndarray,
    l2: float = 0.0,
    reg_mask: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Penalized negative log-likelihood and its exact gradient.

    `reg_mask` selects the weights the L2 term applies to (1 = subject
    to the penalty); None penalizes everything.
    """
    X = _as_csr(X)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] != len(y):
        raise ConfigError(f"X has {X.shape[0]} rows but y has {len(y)} labels")
    with np.errstate(over="ignore", invalid="ignore"):
        z = X @ weights
        value = float(np.sum(np.logaddexp(0.0, z) - y * z))
        grad = X.T @ (expit(z) - y)
        if l2:
            w_reg = weights if reg_mask is None else weights * reg_mask
            value += 0.5 * l2 * float(np.sum(w_reg * w_reg))
            grad = grad + l2 * w_reg
    return value, np.asarray(grad, dtype=np.float64)


@dataclass
class Model:
    """Trained weights, optionally tied to a recipe and encoder."""

    weights: np.ndarray
    config: TrainConfig = TrainConfig()
    recipe: Recipe | None = None
    encoder: Encoder | None = None
    info: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return len(self.weights)

    def to_json(self) -> dict:
        nz = np.flatnonzero(self.weights)
        obj = {
            "version": 1,
            "dim": int(self.dim),
            "weights": [[int(i), float(self.weights[i])] for i in nz],
            "config": self.config.to_json(),
            "info": {k: self.info[k] for k in sorted(self.info)},
        }
        if self.recipe is not None:
            obj["recipe"] = self.recipe.to_json()
        if self.encoder is not None:
            obj["encoder_digest"] = self.encoder.digest()
        return obj

    @classmethod
    def from_json(cls, obj: Mapping, encoder: Encoder | None = None) -> "Model":
        w = np.zeros(int(obj["dim"]), dtype=np.float64)
        for i, v in obj["weights"]:
            w[int(i)] = float(v)
        cfg = obj.get("config", {})
        config = TrainConfig(**cfg) if cfg else TrainConfig()
        recipe = Recipe.from_json(obj["recipe"]) if "recipe" in obj else None
        if encoder is not None and "encoder_digest" in obj:
            if encoder.digest() != obj["encoder_digest"]:
                raise ConfigError("encoder digest does not match the model file")
        return cls(weights=w, config=config, recipe=recipe, encoder=encoder, info=dict(obj.get("info", {})))


def predict_logit(model_or_weights, phi: SparseVector) -> float:
    w = model_or_weights.weights if isinstance(model_or_weights, Model) else model_or_weights
    return dot(phi, w)


def sigmoid(z: float) -> float:
    """Stable scalar sigmoid: never overflows, saturates to 0.0/1.0 only
    in the far tails (|z| beyond roughly 37 upward, 745 downward)."""
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


def predict_proba(model_or_weights, phi: SparseVector) -> float:
    """Probability of a correct response for one feature vector."""
    return sigmoid(predict_logit(model_or_weights, phi))


def predict_proba_batch(model_or_weights, X) -> np.ndarray:
    w = model_or_weights.weights if isinstance(model_or_weights, Model) else model_or_weights
    return expit(_as_csr(X) @ w)


def fit(
    X,
    y: np.ndarray,
    config: TrainConfig = TrainConfig(),
    reg_mask: np.ndarray | None = None,
    recipe: Recipe | None = None,
    encoder: Encoder | None = None,
    init: np.ndarray | None = None,
) -> Model:
    """Train by full-batch gradient descent with step-halving.

    The accepted-step NLL sequence is strictly decreasing.  When the
    encoder is given and no mask is passed, its bias block is excluded
    from regularization.
    """
    X = _as_csr(X)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] != len(y):
        raise ConfigError(f"X has {X.shape[0]} rows but y has {len(y)} labels")
    if X.shape[0] == 0:
        raise ConfigError("cannot fit on an empty training set")
    if reg_mask is None and encoder is not None:
        reg_mask = reg_mask_for(encoder)

    dim = X.shape[1]
    w = np.zeros(dim, dtype=np.float64) if init is None else np.array(init, dtype=np.float64)
    if len(w) != dim:
        raise ConfigError(f"init has length {len(w)}, expected {dim}")

    value, grad = nll_and_gradient(w, X, y, config.l2, reg_mask)
    if not math.isfinite(value):
        raise TrainingDivergenceError(
            f"non-finite loss at initialization (loss={value!r}, max|w|={np.max(np.abs(w))!r})"
        )
    trace = [value]
    step = config.initial_step
    epochs = 0
    converged = False
    for _ in range(config.max_epochs):
        accepted = False
        s = step
        for _ in range(config.max_halvings):
            w_try = w - s * grad
            v_try = nll(w_try, X, y, config.l2, reg_mask)
            if math.isfinite(v_try) and v_try < value:
                accepted = True
                break
            s *= 0.5
        if not accepted:
            converged = True
            break
        epochs += 1
        rel = (value - v_try) / max(abs(value), 1.0)
        w = w_try
        value = v_try
        trace.append(value)
        if not math.isfinite(value):
            raise TrainingDivergenceError(
                f"non-finite loss at epoch {epochs} (step={s!r})"
            )
        _, grad = nll_and_gradient(w, X, y, config.l2, reg_mask)
        step = s * 2.0
        if rel < config.tol:
            converged = True
            break
    info = {
        "epochs": epochs,
        "converged": converged,
        "final_nll": value,
        "n_examples": int(X.shape[0]),
    }
    return Model(weights=w, config=config, recipe=recipe, encoder=encoder, info=info)


def save_model(model: Model, path: str | Path) -> str:
    text = canonical_json(model.to_json())
    Path(path).write_text(text, encoding="utf-8")
    return hashlib.sha256(text.encode()).hexdigest()


def load_model(path: str | Path, encoder: Encoder | None = None) -> Model:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return Model.from_json(obj, encoder=encoder)
