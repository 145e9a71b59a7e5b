"""Desk-scale base models and training loops.

Two architectures: a small relu MLP classifier and a matrix-factorization
recommender scored by user/item factor dot products. Both train with Adam
on graphs rebuilt every step. The same machinery trains the assessment
networks end to end through the splice: each step assesses, splices, runs
the spliced model on a batch, and backpropagates the task loss into the
scalar networks only; the base model weights are never touched.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiffNode, Tensor, backward, leaf
from .checkpoint import ParameterSet
from .compatibility import AssessmentNetworks, HistogramSpec, build_assessment_graph
from .data import TASK_CLASSIFICATION, TASK_RANKING, Dataset
from .splicing import splice_for_training

logger = logging.getLogger(__name__)

ARCH_MLP = "mlp-classifier"
ARCH_MF = "matrix-factorization"


class TrainingDivergedError(RuntimeError):
    """Training hit a non-finite loss or gradient."""


@dataclass
class ForwardCounter:
    """Counts model forward passes, for inference-cost accounting."""

    count: int = 0

    def add(self, n: int = 1) -> None:
        self.count += n


@dataclass
class ModelConfig:
    arch: str = ARCH_MLP
    hidden: tuple[int, ...] = (64, 32)
    factor_dim: int = 32
    seed: int = 0
    learning_rate: float = 0.001
    batch_size: int = 256
    epochs: int = 8
    train_negatives: int = 100

    def __post_init__(self) -> None:
        if self.arch not in (ARCH_MLP, ARCH_MF):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if any(h <= 0 for h in self.hidden) or self.factor_dim <= 0:
            raise ValueError("layer widths and factor dimension must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size <= 0 or self.epochs < 0 or self.train_negatives <= 0:
            raise ValueError("batch size and negative count must be positive, epochs >= 0")


def default_config(task: str, seed: int = 0, **overrides) -> ModelConfig:
    if task == TASK_CLASSIFICATION:
        base = dict(arch=ARCH_MLP, batch_size=256, epochs=8)
    elif task == TASK_RANKING:
        base = dict(arch=ARCH_MF, batch_size=1024, epochs=10)
    else:
        raise ValueError(f"unknown task {task!r}")
    base.update(overrides)
    return ModelConfig(seed=seed, **base)


def parse_architecture(tag: str):
    """Split an architecture tag into (kind, dims)."""
    kind, _, rest = tag.partition(":")
    if kind == ARCH_MLP:
        widths = tuple(int(w) for w in rest.split("-"))
        return kind, widths
    if kind == ARCH_MF:
        users_items, _, dim = rest.partition(":")
        n_users, _, n_items = users_items.partition("x")
        return kind, (int(n_users), int(n_items), int(dim))
    raise ValueError(f"unknown architecture tag {tag!r}")


def initial_params(config: ModelConfig, data: Dataset, rng: np.random.Generator | None = None
                   ) -> ParameterSet:
    """Fresh weights for the configured architecture and dataset."""
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0,)))
    if config.arch == ARCH_MLP:
        if data.task != TASK_CLASSIFICATION:
            raise ValueError("mlp-classifier needs a classification dataset")
        widths = (int(data.meta["n_features"]), *config.hidden, int(data.meta["n_classes"]))
        entries = []
        for i in range(len(widths) - 1):
            fan_in, fan_out = widths[i], widths[i + 1]
            weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            entries.append((f"layer{i}/weight", Tensor(weight)))
            entries.append((f"layer{i}/bias", Tensor(np.zeros((1, fan_out)))))
        tag = f"{ARCH_MLP}:" + "-".join(str(w) for w in widths)
        return ParameterSet(tag, tuple(entries))
    if data.task != TASK_RANKING:
        raise ValueError("matrix-factorization needs a ranking dataset")
    n_users, n_items = int(data.meta["n_users"]), int(data.meta["n_items"])
    dim = config.factor_dim
    entries = (
        ("user_factors", Tensor(rng.normal(0.0, 0.1, size=(n_users, dim)))),
        ("item_factors", Tensor(rng.normal(0.0, 0.1, size=(n_items, dim)))),
    )
    return ParameterSet(f"{ARCH_MF}:{n_users}x{n_items}:{dim}", entries)


def predict(model: ParameterSet, inputs: np.ndarray,
            counter: ForwardCounter | None = None) -> np.ndarray:
    """Score inputs with a trained model (one forward pass).

    MLP: (B, d) features -> (B, C) logits. MF: (B,) user ids -> (B, n_items)
    scores over all items.
    """
    kind, dims = parse_architecture(model.architecture)
    if counter is not None:
        counter.add(1)
    if kind == ARCH_MLP:
        x = np.asarray(inputs, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != dims[0]:
            raise ad.ShapeError(f"expected inputs of shape (B, {dims[0]}), got {x.shape}")
        h = x
        n_layers = len(dims) - 1
        for i in range(n_layers):
            h = h @ model.get(f"layer{i}/weight").data + model.get(f"layer{i}/bias").data
            if i < n_layers - 1:
                h = np.maximum(h, 0.0)
        return h
    users = np.asarray(inputs, dtype=np.int64).reshape(-1)
    if users.min() < 0 or users.max() >= dims[0]:
        raise ad.ShapeError(f"user ids outside [0, {dims[0]})")
    return model.get("user_factors").data[users] @ model.get("item_factors").data.T


def _onehot(indices: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((len(indices), width))
    out[np.arange(len(indices)), indices] = 1.0
    return out


def mlp_logits_graph(weights: dict[str, DiffNode], architecture: str,
                     inputs: np.ndarray) -> DiffNode:
    """Differentiable MLP forward pass over weight nodes."""
    _, dims = parse_architecture(architecture)
    x = leaf(np.asarray(inputs, dtype=np.float64))
    ones = leaf(np.ones((x.shape[0], 1)))
    h = x
    n_layers = len(dims) - 1
    for i in range(n_layers):
        h = h @ weights[f"layer{i}/weight"] + ones @ weights[f"layer{i}/bias"]
        if i < n_layers - 1:
            h = h.relu()
    return h


def ce_loss_graph(logits: DiffNode, labels: np.ndarray) -> DiffNode:
    """Mean softmax cross-entropy. The rowwise max is detached before
    exponentiation; softmax values and gradients are unchanged by it."""
    n, n_classes = logits.shape
    row_max = logits.value.data.max(axis=1, keepdims=True)
    shifted = logits - leaf(np.repeat(row_max, n_classes, axis=1))
    col_ones = leaf(np.ones((n_classes, 1)))
    log_denom = (shifted.exp() @ col_ones).log()
    picked = (logits * leaf(_onehot(labels, n_classes))) @ col_ones
    return (log_denom - (picked - leaf(row_max))).mean()


def mf_loss_graph(user_node: DiffNode, item_node: DiffNode, users: np.ndarray,
                  positives: np.ndarray, negatives: np.ndarray) -> DiffNode:
    """Sampled-softmax ranking loss: the held positive against the drawn
    negatives, one candidate slot at a time (keeps everything 2-D)."""
    n_users = user_node.shape[0]
    n_items = item_node.shape[0]
    dim = user_node.shape[1]
    batch = len(users)
    user_emb = leaf(_onehot(users, n_users)) @ user_node
    col_ones = leaf(np.ones((dim, 1)))

    slot_items = [positives] + [negatives[:, j] for j in range(negatives.shape[1])]
    scores = []
    for items in slot_items:
        item_emb = leaf(_onehot(items, n_items)) @ item_node
        scores.append((user_emb * item_emb) @ col_ones)
    peak = leaf(np.maximum.reduce([s.value.data for s in scores]))
    exps = [(s - peak).exp() for s in scores]
    denom = exps[0]
    for e in exps[1:]:
        denom = denom + e
    return (denom.log() - (scores[0] - peak)).mean()


def batch_loss_graph(weights: dict[str, DiffNode], architecture: str, data: Dataset,
                     batch_idx: np.ndarray, negatives: np.ndarray | None = None) -> DiffNode:
    """Task loss of one batch through weight nodes (trainable or spliced)."""
    kind, _ = parse_architecture(architecture)
    if kind == ARCH_MLP:
        logits = mlp_logits_graph(weights, architecture, data.inputs[batch_idx])
        return ce_loss_graph(logits, data.labels[batch_idx])
    if negatives is None:
        raise ValueError("ranking loss needs sampled negatives")
    users = data.inputs[batch_idx, 0]
    positives = data.inputs[batch_idx, 1]
    return mf_loss_graph(weights["user_factors"], weights["item_factors"],
                         users, positives, negatives)


def loss_value(arrays: dict[str, np.ndarray], architecture: str, data: Dataset,
               idx: np.ndarray, negatives: np.ndarray | None = None) -> float:
    """Task loss of fixed weights on a split, via the same graph arithmetic."""
    weights = {name: leaf(arr) for name, arr in arrays.items()}
    return batch_loss_graph(weights, architecture, data, idx, negatives).value.item()


def sample_negatives(rng: np.random.Generator, positives: np.ndarray, n_items: int,
                     n_negatives: int) -> np.ndarray:
    """Uniform negatives excluding each row's positive item (shift trick)."""
    draws = rng.integers(0, n_items - 1, size=(len(positives), n_negatives))
    return draws + (draws >= positives[:, None])


class Adam:
    """Standard Adam over a dict of live parameter arrays."""

    def __init__(self, params: dict[str, np.ndarray], learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.params = params
        self.lr = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, grad in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            m_hat = m / (1.0 - self.beta1 ** self.t)
            v_hat = v / (1.0 - self.beta2 ** self.t)
            self.params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainingHistory:
    step_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)


@dataclass
class FitResult:
    model: ParameterSet
    history: TrainingHistory


def _batches(train_idx: np.ndarray, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(train_idx)
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


def _params_to_set(architecture: str, template: ParameterSet,
                   arrays: dict[str, np.ndarray]) -> ParameterSet:
    return ParameterSet(architecture, tuple((name, Tensor(arrays[name]))
                                            for name, _ in template.items()))


def fit_base(config: ModelConfig, data: Dataset, init: ParameterSet | None = None
             ) -> FitResult:
    """Train a base model; with ``init`` given, training continues from those
    weights and the config seed only drives batch order and negative draws."""
    seq = np.random.SeedSequence(config.seed)
    rng_init, rng_shuffle, rng_neg = (np.random.default_rng(s) for s in seq.spawn(3))
    start = init if init is not None else initial_params(config, data, rng_init)
    arch = start.architecture
    arrays = {name: np.array(tensor.data) for name, tensor in start.items()}
    history = TrainingHistory()
    if config.epochs == 0:
        return FitResult(_params_to_set(arch, start, arrays), history)

    kind, dims = parse_architecture(arch)
    optimizer = Adam(arrays, config.learning_rate)
    for epoch in range(config.epochs):
        epoch_losses = []
        for batch_idx in _batches(data.train_idx, config.batch_size, rng_shuffle):
            negatives = None
            if kind == ARCH_MF:
                negatives = sample_negatives(rng_neg, data.inputs[batch_idx, 1],
                                             dims[1], config.train_negatives)
            try:
                weights = {name: leaf(arr) for name, arr in arrays.items()}
                loss = batch_loss_graph(weights, arch, data, batch_idx, negatives)
                grads = backward(loss)
            except ad.NonFiniteError as err:
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} step {len(history.step_losses)}: {err}"
                ) from err
            optimizer.step({name: grads[node].data for name, node in weights.items()
                            if node in grads})
            value = loss.value.item()
            history.step_losses.append(value)
            epoch_losses.append(value)
        epoch_mean = float(np.mean(epoch_losses))
        history.epoch_losses.append(epoch_mean)
        logger.info("epoch %d: train loss %.6f", epoch, epoch_mean)
    return FitResult(_params_to_set(arch, start, arrays), history)


def train_base(config: ModelConfig, data: Dataset, init: ParameterSet | None = None
               ) -> ParameterSet:
    return fit_base(config, data, init).model


def finetune(spliced: ParameterSet, data: Dataset, epochs: int = 1,
             config: ModelConfig | None = None, seed: int = 0) -> ParameterSet:
    """Continue training a spliced model with every weight trainable for
    exactly ``epochs`` epochs (no early stopping)."""
    if config is None:
        config = default_config(data.task, seed=seed)
    cfg = ModelConfig(**{**config.__dict__, "epochs": epochs})
    return fit_base(cfg, data, init=spliced).model


@dataclass
class AssessmentFitResult:
    networks: AssessmentNetworks
    history: TrainingHistory


def _spliced_value_arrays(models, networks, spec, mode, variant) -> dict[str, np.ndarray]:
    graph = build_assessment_graph(models, networks, spec, variant)
    spliced = splice_for_training(models, graph, mode)
    return {name: spliced.nodes[name].value.data for name in spliced.names}


def fit_assessment(models: list[ParameterSet], data: Dataset, mode: str,
                   spec: HistogramSpec, epochs: int, seed: int = 0,
                   variant: str = "both", learning_rate: float = 0.001,
                   batch_size: int | None = None, hidden: int = 16,
                   train_negatives: int = 100) -> AssessmentFitResult:
    """Train the assessment networks through the splice.

    Every step rebuilds the tape: assess -> splice (hard mode uses the
    straight-through forward) -> run the spliced model on a batch -> task
    loss -> Adam step on the scalar networks' parameters only. Returns the
    networks at their best validation loss, which includes the untrained
    starting point, so the result never validates worse than the initial
    splice.
    """
    arch_kind, dims = parse_architecture(models[0].architecture)
    if batch_size is None:
        batch_size = 256 if arch_kind == ARCH_MLP else 1024
    seq = np.random.SeedSequence(seed)
    rng_net, rng_shuffle, rng_neg, rng_val = (np.random.default_rng(s) for s in seq.spawn(4))
    networks = AssessmentNetworks.initialize(
        int(rng_net.integers(0, 2 ** 63 - 1)), hidden=hidden)
    history = TrainingHistory()

    val_negatives = None
    if arch_kind == ARCH_MF:
        val_negatives = sample_negatives(rng_val, data.inputs[data.val_idx, 1],
                                         dims[1], train_negatives)

    def validation_loss() -> float:
        arrays = _spliced_value_arrays(models, networks, spec, mode, variant)
        return loss_value(arrays, models[0].architecture, data, data.val_idx, val_negatives)

    params = networks.trainable_params()
    best_val = validation_loss()
    history.val_losses.append(best_val)
    best_snapshot = {k: v.copy() for k, v in params.items()}
    if not params or epochs == 0 or variant == "neither":
        return AssessmentFitResult(networks, history)

    optimizer = Adam(params, learning_rate)
    for epoch in range(epochs):
        epoch_losses = []
        for batch_idx in _batches(data.train_idx, batch_size, rng_shuffle):
            negatives = None
            if arch_kind == ARCH_MF:
                negatives = sample_negatives(rng_neg, data.inputs[batch_idx, 1],
                                             dims[1], train_negatives)
            try:
                graph = build_assessment_graph(models, networks, spec, variant)
                spliced = splice_for_training(models, graph, mode)
                loss = batch_loss_graph(spliced.nodes, models[0].architecture,
                                        data, batch_idx, negatives)
                grads = backward(loss)
            except ad.NonFiniteError as err:
                raise TrainingDivergedError(
                    f"assessment training diverged at epoch {epoch}: {err}") from err
            optimizer.step({name: grads[node].data
                            for name, node in graph.param_leaves.items() if node in grads})
            value = loss.value.item()
            history.step_losses.append(value)
            epoch_losses.append(value)
        history.epoch_losses.append(float(np.mean(epoch_losses)))
        val = validation_loss()
        history.val_losses.append(val)
        logger.info("assessment epoch %d: train %.6f val %.6f",
                    epoch, history.epoch_losses[-1], val)
        if val < best_val:
            best_val = val
            best_snapshot = {k: v.copy() for k, v in params.items()}
    for name, arr in params.items():
        arr[...] = best_snapshot[name]
    return AssessmentFitResult(networks, history)


def train_assessment(models: list[ParameterSet], data: Dataset, mode: str,
                     spec: HistogramSpec, epochs: int, **kwargs) -> AssessmentNetworks:
    return fit_assessment(models, data, mode, spec, epochs, **kwargs).networks
