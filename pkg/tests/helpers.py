"""Shared test utilities: parameter flattening and finite differences."""

import numpy as np

from maskgen.corrector import CorrectorModel
from maskgen.predictor import PredictorGradients, PredictorModel


def predictor_params(model: PredictorModel) -> np.ndarray:
    return np.concatenate([model.embedding.ravel(), model.out_w.ravel(), model.out_b.ravel()])


def set_predictor_params(model: PredictorModel, flat: np.ndarray) -> None:
    n_e, n_w = model.embedding.size, model.out_w.size
    model.embedding[:] = flat[:n_e].reshape(model.embedding.shape)
    model.out_w[:] = flat[n_e : n_e + n_w].reshape(model.out_w.shape)
    model.out_b[:] = flat[n_e + n_w :]


def predictor_grads_flat(grads: PredictorGradients) -> np.ndarray:
    return np.concatenate([grads.embedding.ravel(), grads.out_w.ravel(), grads.out_b.ravel()])


def corrector_params(model: CorrectorModel) -> np.ndarray:
    return np.concatenate([model.embedding.ravel(), model.w.ravel(), [model.b]])


def set_corrector_params(model: CorrectorModel, flat: np.ndarray) -> None:
    n_e, n_w = model.embedding.size, model.w.size
    model.embedding[:] = flat[:n_e].reshape(model.embedding.shape)
    model.w[:] = flat[n_e : n_e + n_w]
    model.b = float(flat[n_e + n_w])


def central_differences(fn, x0: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Gradient of a scalar function by central finite differences."""
    grad = np.empty_like(x0)
    for k in range(x0.shape[0]):
        bumped = x0.copy()
        bumped[k] = x0[k] + h
        up = fn(bumped)
        bumped[k] = x0[k] - h
        down = fn(bumped)
        grad[k] = (up - down) / (2 * h)
    return grad
