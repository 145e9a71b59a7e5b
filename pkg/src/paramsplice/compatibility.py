"""Dual-perspective parameter compatibility for a family of models.

For every parameter matrix, each model gets a compatibility weight per
position, built from two views:

* local uncertainty: a learned scalar map applied to absolute pairwise
  differences between corresponding parameters, summed over partners;
* global information content: the same idea applied to differences of
  histogram entropies of whole parameter matrices.

The two views are blended and normalized across models with a softmax,
so the per-position weights always sum to one. The scalar maps are tiny
trainable networks; gradients flow through the whole construction into
their parameters (never into the model weights themselves: entropy and
the base parameters are treated as constants).

Two evaluation paths share the same arithmetic: a plain numpy path
(:func:`assess`) and a differentiable graph path
(:func:`build_assessment_graph`) used while training the scalar maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiffNode, Tensor, leaf, stable_softplus
from .checkpoint import ParameterSet, validate_compatible

DEFAULT_BINS = 64
NORMALIZATION_TOLERANCE = 1e-9


@dataclass(frozen=True)
class HistogramSpec:
    """Number of equal-width bins used for parameter-value histograms."""

    bins: int = DEFAULT_BINS

    def __post_init__(self) -> None:
        if self.bins < 1:
            raise ValueError(f"bin count must be >= 1, got {self.bins}")


def histogram(matrix: Tensor, spec: HistogramSpec) -> np.ndarray:
    """Count parameter values per bin over [min, max] split into equal parts.

    Bin t covers [L_t, U_t) except the last, which is closed at the top so
    the maximum always lands inside. A constant matrix (max == min) puts
    all mass in the first bin.
    """
    flat = matrix.data.ravel()
    if flat.size == 0:
        raise ValueError("histogram of an empty tensor")
    u = spec.bins
    lo = float(flat.min())
    hi = float(flat.max())
    if lo == hi or u == 1:
        counts = np.zeros(u, dtype=np.int64)
        counts[0] = flat.size
        return counts
    # Inner boundaries follow the same expression as the bin-bound formula
    # (lo + (hi - lo) * t / u) so comparison-based counting is reproducible.
    inner = lo + (hi - lo) * np.arange(1, u, dtype=np.float64) / u
    idx = np.searchsorted(inner, flat, side="right")
    return np.bincount(idx, minlength=u).astype(np.int64)


def entropy(matrix: Tensor, spec: HistogramSpec) -> float:
    """Shannon entropy, in nats, of the binned parameter-value distribution.

    Empty bins contribute nothing (0 * ln 0 := 0). The value lies in
    [0, ln(bins)] up to float rounding.
    """
    counts = histogram(matrix, spec)
    total = counts.sum()
    probs = counts[counts > 0] / total
    return float(-(probs * np.log(probs)).sum())


class ScalarNet:
    """A 1 -> hidden -> 1 network applying one scalar map to every element.

    Softplus hidden activation, linear output. Initialization draws the
    hidden weights uniformly from [-0.5, 0.5] and solves the output layer
    so that f(0) = 0 and f'(0) = 1, i.e. the map starts out close to the
    raw-difference heuristic f(x) = x.
    """

    def __init__(self, w1: np.ndarray, b1: np.ndarray, w2: np.ndarray, b2: np.ndarray) -> None:
        w1 = np.array(w1, dtype=np.float64)
        b1 = np.array(b1, dtype=np.float64)
        w2 = np.array(w2, dtype=np.float64)
        b2 = np.array(b2, dtype=np.float64)
        hidden = w1.shape[1] if w1.ndim == 2 else -1
        expected = {"w1": (1, hidden), "b1": (1, hidden), "w2": (hidden, 1), "b2": (1, 1)}
        for name, arr in (("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)):
            if arr.shape != expected[name]:
                raise ValueError(f"{name} must have shape {expected[name]}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} holds non-finite values")
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2

    @classmethod
    def initialize(cls, rng: np.random.Generator, hidden: int = 16) -> "ScalarNet":
        if hidden < 1:
            raise ValueError("hidden width must be positive")
        while True:
            w1 = rng.uniform(-0.5, 0.5, size=(1, hidden))
            norm = float((w1 ** 2).sum())
            if norm > 1e-3:
                break
        w2 = (2.0 * w1 / norm).T
        b1 = np.zeros((1, hidden))
        b2 = np.array([[-float(np.log(2.0) * w2.sum())]])
        return cls(w1, b1, w2, b2)

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def n_params(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + self.b2.size

    def params(self) -> dict[str, np.ndarray]:
        """Live parameter arrays; optimizers update these in place."""
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def load_params(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in self.params().items():
            arr[...] = values[name]

    def copy(self) -> "ScalarNet":
        return ScalarNet(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())

    def __call__(self, x):
        """Vectorized numpy evaluation; mirrors apply_node bit for bit."""
        arr = np.asarray(x, dtype=np.float64)
        col = arr.reshape(-1, 1)
        hidden = stable_softplus(col @ self.w1 + self.b1)
        out = hidden @ self.w2 + self.b2
        return out.reshape(arr.shape) if arr.shape else float(out[0, 0])

    def make_leaves(self) -> dict[str, DiffNode]:
        return {name: leaf(arr) for name, arr in self.params().items()}

    def apply_node(self, x: DiffNode, leaves: dict[str, DiffNode]) -> DiffNode:
        """Apply the scalar map to a column node of shape (N, 1)."""
        n = x.shape[0]
        ones = leaf(np.ones((n, 1)))
        hidden = (x @ leaves["w1"] + ones @ leaves["b1"]).softplus()
        return hidden @ leaves["w2"] + ones @ leaves["b2"]


class IdentityNetwork:
    """Scalar map f(x) = x; the untrained raw-difference heuristic."""

    n_params = 0

    def __call__(self, x):
        return np.asarray(x, dtype=np.float64)

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def make_leaves(self) -> dict[str, DiffNode]:
        return {}

    def apply_node(self, x: DiffNode, leaves: dict[str, DiffNode]) -> DiffNode:
        return x

    def copy(self) -> "IdentityNetwork":
        return self


@dataclass
class AssessmentNetworks:
    """The two trainable scalar maps: one for local differences, one for
    entropy differences, plus their shared architecture descriptor."""

    local_net: ScalarNet | IdentityNetwork
    global_net: ScalarNet | IdentityNetwork
    hidden: int = 16
    activation: str = "softplus"

    @classmethod
    def initialize(cls, seed: int, hidden: int = 16) -> "AssessmentNetworks":
        seq = np.random.SeedSequence(seed)
        rng_local, rng_global = (np.random.default_rng(s) for s in seq.spawn(2))
        return cls(ScalarNet.initialize(rng_local, hidden),
                   ScalarNet.initialize(rng_global, hidden),
                   hidden=hidden)

    def trainable_params(self) -> dict[str, np.ndarray]:
        out = {f"local/{k}": v for k, v in self.local_net.params().items()}
        out.update({f"global/{k}": v for k, v in self.global_net.params().items()})
        return out

    def copy(self) -> "AssessmentNetworks":
        return AssessmentNetworks(self.local_net.copy(), self.global_net.copy(),
                                  self.hidden, self.activation)

    def to_parameter_set(self) -> ParameterSet:
        entries = tuple((name, Tensor(arr)) for name, arr in self.trainable_params().items())
        return ParameterSet(f"assessment-networks:{self.hidden}:{self.activation}", entries)

    @classmethod
    def from_parameter_set(cls, pset: ParameterSet) -> "AssessmentNetworks":
        parts = pset.architecture.split(":")
        if parts[0] != "assessment-networks" or len(parts) != 3:
            raise ValueError(f"not an assessment-networks checkpoint: {pset.architecture!r}")
        hidden, activation = int(parts[1]), parts[2]
        nets = []
        for prefix in ("local", "global"):
            kwargs = {key: pset.get(f"{prefix}/{key}").data for key in ("w1", "b1", "w2", "b2")}
            nets.append(ScalarNet(**kwargs))
        return cls(nets[0], nets[1], hidden=hidden, activation=activation)


@dataclass
class CompatibilityMap:
    """Per-model, per-matrix compatibility weights, plus the cached
    intermediate views they were blended from.

    Invariant: for every matrix and position, the weights over models sum
    to 1 (within 1e-9) and each lies in [0, 1].
    """

    n_models: int
    weights: dict[str, list[Tensor]]
    local: dict[str, list[Tensor]] = field(default_factory=dict)
    global_info: dict[str, list[float]] = field(default_factory=dict)

    def validate(self) -> None:
        for name, per_model in self.weights.items():
            if len(per_model) != self.n_models:
                raise ValueError(f"{name!r}: expected {self.n_models} weight tensors")
            stacked = np.stack([t.data for t in per_model])
            if stacked.min() < 0.0 or stacked.max() > 1.0:
                raise ValueError(f"{name!r}: compatibility weights outside [0, 1]")
            sums = stacked.sum(axis=0)
            err = float(np.abs(sums - 1.0).max())
            if err > NORMALIZATION_TOLERANCE:
                raise ValueError(
                    f"{name!r}: per-position weights sum to 1 +/- {err:.3e}, "
                    f"beyond tolerance {NORMALIZATION_TOLERANCE}")

    @classmethod
    def uniform(cls, models: list[ParameterSet]) -> "CompatibilityMap":
        """Equal weight 1/n everywhere; soft splicing with this map is
        exactly parameter averaging."""
        shapes = validate_compatible(models)
        n = len(models)
        weights = {name: [Tensor(np.full(shape, 1.0 / n)) for _ in range(n)]
                   for name, shape in shapes.items()}
        return cls(n, weights)


ASSESSMENT_VARIANTS = ("both", "local", "global", "neither")


def local_uncertainty(models: list[ParameterSet], name: str, f_local) -> list[Tensor]:
    """Per-model local view: sum over the other models of the scalar map
    applied to |W_k - W_l|, elementwise. For two models both entries
    reduce to f(|W_A - W_B|)."""
    mats = [m.get(name).data for m in models]
    out: list[Tensor] = []
    for k in range(len(mats)):
        acc = None
        for l in range(len(mats)):
            if l == k:
                continue
            term = np.asarray(f_local(np.abs(mats[k] - mats[l])), dtype=np.float64)
            acc = term if acc is None else acc + term
        out.append(Tensor(acc))
    return out


def global_information(models: list[ParameterSet], name: str, f_global,
                       spec: HistogramSpec) -> list[float]:
    """Per-model global view: sum over the other models of the scalar map
    applied to the absolute difference of matrix entropies."""
    entropies = [entropy(m.get(name), spec) for m in models]
    out: list[float] = []
    for k in range(len(entropies)):
        total = 0.0
        for l in range(len(entropies)):
            if l == k:
                continue
            value = float(f_global(abs(entropies[k] - entropies[l])))
            if not np.isfinite(value):
                raise ad.NonFiniteError("global assessment network produced a non-finite value")
            total = total + value
        out.append(total)
    return out


def blend(v_global: float, v_local: Tensor) -> Tensor:
    """Fuse the two views: v_g * (1 - exp(-(v_g * v_local))), positionwise."""
    raw = (1.0 - np.exp(-(v_local.data * v_global))) * v_global
    return Tensor(raw)


def normalize(raws: list[Tensor]) -> list[Tensor]:
    """Softmax across models per position, with the positionwise max
    subtracted before exponentiation (value-identical, overflow-safe)."""
    if len(raws) < 2:
        raise ValueError("normalization needs at least 2 models")
    shape = raws[0].shape
    for t in raws[1:]:
        if t.shape != shape:
            raise ValueError(f"normalize: shape mismatch {t.shape} vs {shape}")
    values = [t.data for t in raws]
    peak = np.maximum.reduce(values)
    exps = [np.exp(v - peak) for v in values]
    denom = exps[0]
    for e in exps[1:]:
        denom = denom + e
    return [Tensor(e / denom) for e in exps]


def _raw_compatibility(v_locals: list[Tensor] | None, v_globals: list[float] | None,
                       shape: tuple[int, ...], n: int, variant: str) -> list[Tensor]:
    if variant == "both":
        return [blend(v_globals[k], v_locals[k]) for k in range(n)]
    if variant == "local":
        return list(v_locals)
    if variant == "global":
        return [Tensor(np.full(shape, v_globals[k])) for k in range(n)]
    raise ValueError(f"unknown assessment variant {variant!r}")


def assess(models: list[ParameterSet], networks: AssessmentNetworks,
           spec: HistogramSpec, variant: str = "both") -> CompatibilityMap:
    """Run the full assessment for every parameter matrix.

    ``variant`` selects which views contribute: "both" (the blend),
    "local", "global", or "neither" (uniform 1/n, no networks involved).
    """
    if variant not in ASSESSMENT_VARIANTS:
        raise ValueError(f"unknown assessment variant {variant!r}")
    if variant == "neither":
        return CompatibilityMap.uniform(models)
    shapes = validate_compatible(models)
    n = len(models)
    weights: dict[str, list[Tensor]] = {}
    local_cache: dict[str, list[Tensor]] = {}
    global_cache: dict[str, list[float]] = {}
    for name, shape in shapes.items():
        v_locals = local_uncertainty(models, name, networks.local_net) \
            if variant in ("both", "local") else None
        v_globals = global_information(models, name, networks.global_net, spec) \
            if variant in ("both", "global") else None
        raws = _raw_compatibility(v_locals, v_globals, shape, n, variant)
        weights[name] = normalize(raws)
        if v_locals is not None:
            local_cache[name] = v_locals
        if v_globals is not None:
            global_cache[name] = v_globals
    result = CompatibilityMap(n, weights, local_cache, global_cache)
    result.validate()
    return result


@dataclass
class AssessmentGraph:
    """Differentiable counterpart of a CompatibilityMap.

    ``weight_nodes[name][k]`` is the normalized weight of model k for one
    matrix, flattened to an (N, 1) column. ``param_leaves`` are the graph
    leaves holding the scalar networks' parameters; gradients of any loss
    built on top flow into exactly these.
    """

    architecture: str
    names: tuple[str, ...]
    shapes: dict[str, tuple[int, ...]]
    weight_nodes: dict[str, list[DiffNode]]
    param_leaves: dict[str, DiffNode]
    n_models: int

    def to_map(self) -> CompatibilityMap:
        weights = {
            name: [node.value.reshape(self.shapes[name]) for node in nodes]
            for name, nodes in self.weight_nodes.items()
        }
        result = CompatibilityMap(self.n_models, weights)
        result.validate()
        return result


def build_assessment_graph(models: list[ParameterSet], networks: AssessmentNetworks | None,
                           spec: HistogramSpec, variant: str = "both") -> AssessmentGraph:
    """Build the assessment as a computation graph for training.

    The base model weights, their pairwise differences, and the matrix
    entropies enter as constants; only the scalar networks' parameters are
    differentiable. Pairwise map evaluations are shared between the two
    orientations of a pair, which is exact since |a - b| = |b - a|.
    """
    if variant not in ASSESSMENT_VARIANTS:
        raise ValueError(f"unknown assessment variant {variant!r}")
    shapes = validate_compatible(models)
    n = len(models)
    names = tuple(shapes)

    if variant == "neither":
        weight_nodes = {
            name: [leaf(np.full((int(np.prod(shape)), 1), 1.0 / n)) for _ in range(n)]
            for name, shape in shapes.items()
        }
        return AssessmentGraph(models[0].architecture, names, dict(shapes),
                               weight_nodes, {}, n)

    leaves_local = networks.local_net.make_leaves()
    leaves_global = networks.global_net.make_leaves()
    param_leaves = {f"local/{k}": v for k, v in leaves_local.items()}
    param_leaves.update({f"global/{k}": v for k, v in leaves_global.items()})

    weight_nodes: dict[str, list[DiffNode]] = {}
    for name, shape in shapes.items():
        flats = [m.get(name).data.reshape(-1, 1) for m in models]

        v_local_nodes = None
        if variant in ("both", "local"):
            pair_local: dict[tuple[int, int], DiffNode] = {}
            for k in range(n):
                for l in range(k + 1, n):
                    diff = leaf(np.abs(flats[k] - flats[l]))
                    pair_local[(k, l)] = networks.local_net.apply_node(diff, leaves_local)
            v_local_nodes = []
            for k in range(n):
                acc = None
                for l in range(n):
                    if l == k:
                        continue
                    term = pair_local[(min(k, l), max(k, l))]
                    acc = term if acc is None else acc + term
                v_local_nodes.append(acc)

        v_global_nodes = None
        if variant in ("both", "global"):
            entropies = [entropy(m.get(name), spec) for m in models]
            pair_global: dict[tuple[int, int], DiffNode] = {}
            for k in range(n):
                for l in range(k + 1, n):
                    gap = leaf([[abs(entropies[k] - entropies[l])]])
                    pair_global[(k, l)] = networks.global_net.apply_node(gap, leaves_global)
            v_global_nodes = []
            for k in range(n):
                acc = None
                for l in range(n):
                    if l == k:
                        continue
                    term = pair_global[(min(k, l), max(k, l))]
                    acc = term if acc is None else acc + term
                v_global_nodes.append(acc)

        size = int(np.prod(shape))
        if variant == "both":
            ones = leaf(np.ones((size, 1)))
            raws = []
            for k in range(n):
                t = v_local_nodes[k] * v_global_nodes[k]
                raws.append((ones - (-t).exp()) * v_global_nodes[k])
        elif variant == "local":
            raws = v_local_nodes
        else:  # global-only: broadcast the scalar over the matrix
            ones = leaf(np.ones((size, 1)))
            raws = [ones * v_global_nodes[k] for k in range(n)]

        # The positionwise max is detached; softmax values and gradients
        # are unchanged by a constant shift.
        peak = leaf(np.maximum.reduce([r.value.data for r in raws]))
        exps = [(r - peak).exp() for r in raws]
        denom = exps[0]
        for e in exps[1:]:
            denom = denom + e
        weight_nodes[name] = [e / denom for e in exps]

    return AssessmentGraph(models[0].architecture, names, dict(shapes),
                           weight_nodes, param_leaves, n)
