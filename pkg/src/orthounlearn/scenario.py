"""Pretraining, the incremental unlearning loop, metrics and forgetting probes."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset
from .errors import DidNotConverge, EmptySplit, EmptyTestSet
from .model import Model, ModelConfig, attach_lora, backward, forward, init_model, merge_lora, predict
from .subspace import DEFAULT_EPSILON, Subspace, decompose, expand
from .unlearn import SubspaceSet, TrainConfig, UnlearnTask, cross_entropy, unlearn_task

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    max_epochs: int = 200
    learning_rate: float = 0.05
    batch_size: int = 64
    momentum: float = 0.9
    target_accuracy: float = 95.0
    min_epochs: int = 0
    weight_decay: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 100
    learning_rate: float = 0.1
    batch_size: int = 64
    seed: int = 0


@dataclass(frozen=True)
class MetricsRecord:
    task: int
    acc_r: float
    acc_f: float
    acc_o: float | None
    drop: float
    h_mean: float


def h_mean(acc_r: float, drop: float) -> float:
    """Harmonic mean of remaining accuracy and forgetting drop (0 when both vanish)."""
    if acc_r + drop == 0:
        return 0.0
    return 2.0 * acc_r * drop / (acc_r + drop)


def accuracy(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    if x.shape[1] == 0:
        raise EmptyTestSet("accuracy over an empty set")
    return 100.0 * float(np.mean(predict(model, x) == y))


def _sgd_epochs(params, grad_fn, n, cfg_lr, cfg_bs, momentum, rng, epochs, after_epoch=None, decay=None):
    velocity = [np.zeros_like(p) for p in params]
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg_bs):
            idx = order[start : start + cfg_bs]
            grads = grad_fn(idx)
            for i, g in enumerate(grads):
                if decay is not None and decay[i]:
                    g = g + decay[i] * params[i]
                velocity[i] = momentum * velocity[i] + g
                params[i] -= cfg_lr * velocity[i]
        if after_epoch is not None and after_epoch(epoch):
            return epoch + 1
    return epochs


def pretrain(dataset: Dataset, model_cfg: ModelConfig, cfg: PretrainConfig = PretrainConfig(), seed: int = 0) -> Model:
    """Train backbone and head with minibatch SGD until train accuracy reaches the target."""
    if dataset.num_classes != model_cfg.num_classes:
        raise ValueError(f"dataset has {dataset.num_classes} classes, model {model_cfg.num_classes}")
    if dataset.dim != model_cfg.input_dim:
        raise ValueError(f"dataset has dim {dataset.dim}, model input_dim {model_cfg.input_dim}")
    model = init_model(model_cfg, seed)
    x, y = dataset.select("train")
    if cfg.max_epochs <= 0:
        raise DidNotConverge("max_epochs = 0")
    params = [l.weight for l in model.layers] + [l.bias for l in model.layers]
    params += [model.head.weight, model.head.bias]

    def grad_fn(idx):
        logits, trace = forward(model, x[:, idx])
        _, d_logits = cross_entropy(logits, y[idx])
        g = backward(model, trace, d_logits, wrt="all")
        return g.weights + g.biases + [g.head_weight, g.head_bias]

    def reached(epoch):
        return epoch + 1 >= cfg.min_epochs and accuracy(model, x, y) >= cfg.target_accuracy

    m = model.num_layers
    decay = [cfg.weight_decay] * m + [0.0] * m + [cfg.weight_decay, 0.0]
    rng = np.random.default_rng(cfg.seed)
    _sgd_epochs(
        params, grad_fn, x.shape[1], cfg.learning_rate, cfg.batch_size, cfg.momentum, rng,
        cfg.max_epochs, reached, decay,
    )
    final = accuracy(model, x, y)
    if not np.isfinite(params[0]).all() or final < cfg.target_accuracy:
        raise DidNotConverge(f"train accuracy {final:.2f}% below target {cfg.target_accuracy}%")
    return model


# -- subspaces -------------------------------------------------------------------


def layer_representations(model: Model, x: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    _, trace = forward(model, x)
    return trace.inputs, trace.outputs


def _safe_decompose(R: np.ndarray, epsilon: float, layer_id: str) -> Subspace:
    if not np.any(R):
        return Subspace.empty(R.shape[0], epsilon, layer_id)
    return decompose(R, epsilon, layer_id)


def build_subspaces(
    model: Model,
    task: UnlearnTask,
    epsilon: float = DEFAULT_EPSILON,
    previous: SubspaceSet | None = None,
    expansion_rule: str = "cumulative",
) -> SubspaceSet:
    """Forgetting subspaces are decomposed (first task) or expanded; remaining ones are recomputed."""
    if task.x_f_train.shape[1] == 0 or task.x_r_train.shape[1] == 0:
        raise EmptySplit(f"task {task.index} has an empty train split")
    f_in, f_out = layer_representations(model, task.x_f_train)
    r_in, r_out = layer_representations(model, task.x_r_train)
    m = model.num_layers
    if previous is None:
        forgetting_in = [_safe_decompose(f_in[l], epsilon, f"layer{l}/in") for l in range(m)]
        forgetting_out = [_safe_decompose(f_out[l], epsilon, f"layer{l}/out") for l in range(m)]
    else:
        forgetting_in = [expand(previous.forgetting_in[l], f_in[l], epsilon, expansion_rule) for l in range(m)]
        forgetting_out = [expand(previous.forgetting_out[l], f_out[l], epsilon, expansion_rule) for l in range(m)]
    remaining_in = [_safe_decompose(r_in[l], epsilon, f"layer{l}/in") for l in range(m)]
    remaining_out = [_safe_decompose(r_out[l], epsilon, f"layer{l}/out") for l in range(m)]
    return SubspaceSet(forgetting_in, remaining_in, forgetting_out, remaining_out)


# -- evaluation ------------------------------------------------------------------


def evaluate(model: Model, dataset: Dataset, task: UnlearnTask, acc_f_before: float) -> MetricsRecord:
    x_r, y_r = dataset.select("test", task.remaining_classes)
    x_f, y_f = dataset.select("test", task.forgetting_classes)
    if x_r.shape[1] == 0 or x_f.shape[1] == 0:
        raise EmptyTestSet(f"task {task.index} has an empty test split")
    acc_r = accuracy(model, x_r, y_r)
    acc_f = accuracy(model, x_f, y_f)
    acc_o = None
    if task.forgotten_before:
        x_o, y_o = dataset.select("test", task.forgotten_before)
        acc_o = accuracy(model, x_o, y_o)
    drop = acc_f_before - acc_f
    return MetricsRecord(task.index, acc_r, acc_f, acc_o, drop, h_mean(acc_r, drop))


def projection_energy_probe(model: Model, x_f: np.ndarray, subs: SubspaceSet) -> float:
    """Mean over samples and layers of ``||P_f h||^2 / ||h||^2`` (0/0 counts as 0)."""
    if x_f.shape[1] == 0:
        raise EmptySplit("projection probe on an empty split")
    _, trace = forward(model, x_f)
    ratios = []
    for h, s in zip(trace.outputs, subs.forgetting_out):
        num = np.sum((s.projector @ h) ** 2, axis=0)
        den = np.sum(h * h, axis=0)
        ratios.append(np.divide(num, den, out=np.zeros_like(num), where=den > 0))
    return float(np.mean(ratios))


def recovery_probe(model: Model, dataset: Dataset, forgotten, cfg: ProbeConfig = ProbeConfig()) -> dict:
    """Retrain a fresh linear head on frozen backbone features of all classes.

    Features are standardized with train statistics and scaled by
    ``1/sqrt(D)`` so the mean squared norm is 1, which keeps SGD at the probe
    learning rate stable. The map is affine and invertible, so linear
    separability is unchanged.
    """
    x_tr, y_tr = dataset.select("train")
    _, tr = forward(model, x_tr)
    feats = tr.features
    mu = feats.mean(axis=1, keepdims=True)
    sd = feats.std(axis=1, keepdims=True)
    sd[sd == 0] = 1.0
    sd *= np.sqrt(feats.shape[0])
    z = (feats - mu) / sd
    C = dataset.num_classes
    rng = np.random.default_rng(cfg.seed)
    w = rng.standard_normal((C, z.shape[0])) * np.sqrt(1.0 / z.shape[0])
    b = np.zeros(C)
    params = [w, b]

    def grad_fn(idx):
        logits = params[0] @ z[:, idx] + params[1][:, None]
        _, d = cross_entropy(logits, y_tr[idx])
        return [d @ z[:, idx].T, d.sum(axis=1)]

    _sgd_epochs(params, grad_fn, z.shape[1], cfg.learning_rate, cfg.batch_size, 0.0, rng, cfg.epochs)
    if not np.all(np.isfinite(params[0])):
        raise DidNotConverge("probe head diverged")

    def head_acc(classes):
        x, y = dataset.select("test", classes)
        _, t = forward(model, x)
        logits = params[0] @ ((t.features - mu) / sd) + params[1][:, None]
        return 100.0 * float(np.mean(np.argmax(logits, axis=0) == y))

    forgotten = sorted(set(forgotten))
    kept = sorted(set(range(C)) - set(forgotten))
    return {
        "recovered_acc_f": head_acc(forgotten) if forgotten else None,
        "recovered_acc_r": head_acc(kept) if kept else None,
    }


def retrain_oracle(dataset: Dataset, remaining, model_cfg: ModelConfig, cfg: PretrainConfig, seed: int = 0) -> Model:
    """Train a fresh model on the remaining classes only, for ``cfg.max_epochs`` epochs.

    The head keeps all classes; forgotten rows only ever see negative gradient.
    """
    remaining = sorted(set(remaining))
    x, y = dataset.select("train", remaining)
    if x.shape[1] == 0:
        raise EmptySplit("retrain oracle needs remaining-class samples")
    model = init_model(model_cfg, seed)
    params = [l.weight for l in model.layers] + [l.bias for l in model.layers]
    params += [model.head.weight, model.head.bias]

    def grad_fn(idx):
        logits, trace = forward(model, x[:, idx])
        _, d_logits = cross_entropy(logits, y[idx])
        g = backward(model, trace, d_logits, wrt="all")
        return g.weights + g.biases + [g.head_weight, g.head_bias]

    rng = np.random.default_rng(cfg.seed)
    _sgd_epochs(params, grad_fn, x.shape[1], cfg.learning_rate, cfg.batch_size, cfg.momentum, rng, cfg.max_epochs)
    if not all(np.all(np.isfinite(p)) for p in params):
        raise DidNotConverge("retrain oracle diverged")
    return model


# -- incremental loop ------------------------------------------------------------


@dataclass
class TaskOutcome:
    metrics: MetricsRecord
    pretrain_acc_r: float
    energy_before: float
    energy_after: float
    subspace_ranks: dict
    max_relative_delta: float


@dataclass
class IncrementalResult:
    model: Model
    outcomes: list[TaskOutcome] = field(default_factory=list)
    models: list[Model] = field(default_factory=list)
    subspaces: list[SubspaceSet] = field(default_factory=list)
    loss_curve: list[dict] = field(default_factory=list)


def remaining_leakage(model: Model, subs: SubspaceSet) -> float:
    """Largest ``||dW v|| / ||dW||_F`` over remaining-input basis vectors ``v``."""
    worst = 0.0
    for ad, s in zip(model.adapters, subs.remaining_in):
        delta = ad.up @ ad.down
        norm = np.linalg.norm(delta)
        if norm == 0 or s.k == 0:
            continue
        worst = max(worst, float(np.max(np.linalg.norm(delta @ s.basis, axis=0)) / norm))
    return worst


def run_incremental(
    model: Model,
    dataset: Dataset,
    tasks: list[UnlearnTask],
    train_cfg: TrainConfig,
    epsilon: float = DEFAULT_EPSILON,
    lora_rank: int | None = None,
    expansion_rule: str = "cumulative",
) -> IncrementalResult:
    """build subspaces -> attach -> unlearn -> merge -> evaluate, for each task in order."""
    pretrained = model
    result = IncrementalResult(model)
    current, subs = model, None
    for task in tasks:
        subs = build_subspaces(current, task, epsilon, subs, expansion_rule)
        x_f_te, y_f_te = dataset.select("test", task.forgetting_classes)
        acc_f_before = accuracy(current, x_f_te, y_f_te)
        energy_before = projection_energy_probe(current, x_f_te, subs)
        adapted = attach_lora(current, lora_rank, seed=train_cfg.seed + task.index)
        step_cfg = TrainConfig(**{**asdict(train_cfg), "seed": train_cfg.seed + task.index})
        adapted = unlearn_task(adapted, task, subs, step_cfg, on_step=result.loss_curve.append)
        violation = remaining_leakage(adapted, subs)
        current = merge_lora(adapted)
        record = evaluate(current, dataset, task, acc_f_before)
        x_r_te, y_r_te = dataset.select("test", task.remaining_classes)
        outcome = TaskOutcome(
            metrics=record,
            pretrain_acc_r=accuracy(pretrained, x_r_te, y_r_te),
            energy_before=energy_before,
            energy_after=projection_energy_probe(current, x_f_te, subs),
            subspace_ranks=subs.ranks(),
            max_relative_delta=violation,
        )
        log.info("task %d: %s", task.index, record)
        result.outcomes.append(outcome)
        result.models.append(current)
        result.subspaces.append(subs)
    result.model = current
    return result
