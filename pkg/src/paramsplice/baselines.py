"""Comparison methods: magnitude pruning, output ensembling, and
positionwise parameter averaging."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor
from .checkpoint import ParameterSet, validate_compatible
from .models import ForwardCounter, predict


def magnitude_prune(model: ParameterSet, sparsity: float) -> ParameterSet:
    """Zero the globally smallest-magnitude fraction of the weights.

    One threshold across all matrices. Ties at the threshold keep the
    earlier-indexed entries (in declared parameter order, row-major).
    """
    if not 0.0 <= sparsity < 1.0:
        raise ValueError(f"sparsity must lie in [0, 1), got {sparsity}")
    flat = np.concatenate([tensor.data.ravel() for _, tensor in model.items()])
    n_zero = math.ceil(sparsity * flat.size)
    mask = np.ones(flat.size)
    if n_zero > 0:
        magnitude = np.abs(flat)
        # Secondary key -index: among equal magnitudes, later entries are
        # pruned first, so earlier-indexed ties survive.
        order = np.lexsort((-np.arange(flat.size), magnitude))
        mask[order[:n_zero]] = 0.0
    pruned = flat * mask
    entries = []
    offset = 0
    for name, tensor in model.items():
        chunk = pruned[offset:offset + tensor.size].reshape(tensor.shape)
        offset += tensor.size
        entries.append((name, Tensor(chunk)))
    return ParameterSet(model.architecture, tuple(entries))


def output_ensemble(models: list[ParameterSet], inputs: np.ndarray,
                    weights: list[float] | None = None,
                    counter: ForwardCounter | None = None) -> np.ndarray:
    """Weighted sum of the models' output scores (one forward pass each,
    which is what makes ensembling cost n times a single model)."""
    if len(models) < 1:
        raise ValueError("ensemble needs at least one model")
    if weights is None:
        weights = [1.0 / len(models)] * len(models)
    if len(weights) != len(models):
        raise ValueError(f"{len(weights)} weights for {len(models)} models")
    if not all(np.isfinite(w) for w in weights):
        raise ValueError("ensemble weights must be finite")
    combined = None
    for weight, model in zip(weights, models):
        scores = predict(model, inputs, counter=counter)
        if combined is None:
            combined = weight * scores
        elif scores.shape != combined.shape:
            raise ValueError(f"model output shapes disagree: {scores.shape} vs {combined.shape}")
        else:
            combined = combined + weight * scores
    return combined


def parameter_average(models: list[ParameterSet]) -> ParameterSet:
    """Positionwise arithmetic mean of the models' parameters.

    Accumulates sum_k W_k * (1/n) in model order, the same float operations
    as soft splicing under a uniform compatibility map, so the two agree
    bitwise.
    """
    validate_compatible(models)
    scale = 1.0 / len(models)
    entries = []
    for name, _ in models[0].items():
        acc = None
        for model in models:
            term = model.get(name).data * scale
            acc = term if acc is None else acc + term
        entries.append((name, Tensor(acc)))
    return ParameterSet(models[0].architecture, tuple(entries))
