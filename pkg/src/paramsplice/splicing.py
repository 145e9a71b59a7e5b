"""Combine N parameter sets into one using a compatibility map.

Soft splicing takes the positionwise convex combination of the models'
parameters weighted by compatibility. Hard splicing binarizes first:
each position keeps the parameter of the model with the highest weight
(ties go to the lowest model index). Both preserve names, order, shapes,
and the architecture tag, so the result is a drop-in model of identical
size.

For training, the hard forward pass is paired with the soft backward
pass (a straight-through estimator): the binarized weights are written
as soft + constant correction, so gradients flow as if the splice were
soft.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import DiffNode, Tensor, leaf
from .checkpoint import ParameterSet, validate_compatible
from .compatibility import AssessmentGraph, CompatibilityMap

SPLICE_MODES = ("soft", "hard")


def _check_compat(models: list[ParameterSet], compat: CompatibilityMap) -> dict:
    shapes = validate_compatible(models)
    if compat.n_models != len(models):
        raise ValueError(f"compatibility map covers {compat.n_models} models, got {len(models)}")
    for name, shape in shapes.items():
        if name not in compat.weights:
            raise ValueError(f"compatibility map is missing {name!r}")
        for tensor in compat.weights[name]:
            if tensor.shape != shape:
                raise ValueError(f"{name!r}: weight shape {tensor.shape} != matrix shape {shape}")
    compat.validate()
    return shapes


def _binarized(per_model: list[Tensor]) -> list[np.ndarray]:
    """One-hot weights selecting the argmax model per position; ties pick
    the lowest model index (np.argmax returns the first maximum)."""
    stacked = np.stack([t.data for t in per_model])
    winner = np.argmax(stacked, axis=0)
    return [(winner == k).astype(np.float64) for k in range(len(per_model))]


def soft_splice(models: list[ParameterSet], compat: CompatibilityMap) -> ParameterSet:
    """Positionwise convex combination: W = sum_k W_k * V_k."""
    _check_compat(models, compat)
    entries = []
    for name, _ in models[0].items():
        acc = None
        for k, model in enumerate(models):
            term = model.get(name).data * compat.weights[name][k].data
            acc = term if acc is None else acc + term
        entries.append((name, Tensor(acc)))
    return ParameterSet(models[0].architecture, tuple(entries))


def hard_splice(models: list[ParameterSet], compat: CompatibilityMap) -> ParameterSet:
    """Positionwise selection: every output entry is copied from the model
    with the highest compatibility at that position."""
    _check_compat(models, compat)
    entries = []
    for name, _ in models[0].items():
        stacked = np.stack([m.get(name).data for m in models])
        winner = np.argmax(np.stack([t.data for t in compat.weights[name]]), axis=0)
        chosen = np.take_along_axis(stacked, winner[None, ...], axis=0)[0]
        entries.append((name, Tensor(chosen)))
    return ParameterSet(models[0].architecture, tuple(entries))


@dataclass
class SplicedGraph:
    """Differentiable spliced model: one weight node per parameter matrix,
    in the models' declared order, plus the architecture tag."""

    architecture: str
    names: tuple[str, ...]
    nodes: dict[str, DiffNode]

    def to_parameter_set(self) -> ParameterSet:
        return ParameterSet(self.architecture,
                            tuple((name, self.nodes[name].value) for name in self.names))


def splice_for_training(models: list[ParameterSet], graph: AssessmentGraph,
                        mode: str) -> SplicedGraph:
    """Splice through the differentiable assessment graph.

    In soft mode this is exactly soft_splice with gradients flowing through
    the weights. In hard mode the forward pass equals hard_splice while the
    backward pass uses the soft weights' gradients (a straight-through
    estimator; the binary selection itself has no useful gradient).
    """
    if mode not in SPLICE_MODES:
        raise ValueError(f"unknown splice mode {mode!r}; expected one of {SPLICE_MODES}")
    shapes = validate_compatible(models)
    if graph.n_models != len(models):
        raise ValueError(f"assessment graph covers {graph.n_models} models, got {len(models)}")

    nodes: dict[str, DiffNode] = {}
    for name, shape in shapes.items():
        weight_nodes = graph.weight_nodes[name]
        if mode == "hard":
            flat_weights = [w.value.reshape((-1, 1)) for w in weight_nodes]
            hard = _binarized(flat_weights)
            # soft + constant(hard - soft): forward is the binarized weight,
            # backward is the soft weight's gradient.
            weight_nodes = [w + leaf(hard[k] - flat_weights[k].data)
                            for k, w in enumerate(weight_nodes)]
        acc = None
        for k, model in enumerate(models):
            term = leaf(model.get(name).data.reshape(-1, 1)) * weight_nodes[k]
            acc = term if acc is None else acc + term
        nodes[name] = acc.reshape(shape)
    return SplicedGraph(models[0].architecture, tuple(shapes), nodes)
