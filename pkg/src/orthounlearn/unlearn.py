"""Feature and gradient orthogonal projection on LoRA adapters.

Forgetting-class features are pushed out of the forgetting subspace, remaining
class features are held inside the remaining subspace, and every update to an
adapter's down factor is right-multiplied by ``P_f (I - P_r)`` so it never acts
on the remaining-class input subspace.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DimensionMismatch, EmptyBatch, EmptySplit, InvalidConfig, NoAdapters
from .model import ActivationTrace, Gradients, Model, backward, forward
from .subspace import Subspace

PROJECTION_MODES = ("sequential", "literal")
OPTIMIZERS = ("sgd", "sgd_momentum")
MOMENTUM = 0.9


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 0.2
    learning_rate: float = 1e-4
    epochs: int = 10
    batch_size: int = 64
    optimizer: str = "sgd_momentum"
    seed: int = 0
    gradient_projection: str = "sequential"

    def validate(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InvalidConfig("lambda1 and lambda2 must be >= 0")
        if self.learning_rate < 0:
            raise InvalidConfig("learning_rate must be >= 0")
        if self.epochs < 0:
            raise InvalidConfig("epochs must be >= 0")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise InvalidConfig(f"optimizer must be one of {OPTIMIZERS}")
        if self.gradient_projection not in PROJECTION_MODES:
            raise InvalidConfig(f"gradient_projection must be one of {PROJECTION_MODES}")


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    fop_f: float
    fop_r: float
    total: float


@dataclass
class SubspaceSet:
    """Per-layer subspaces; ``*_in`` come from layer inputs, ``*_out`` from layer outputs."""

    forgetting_in: list[Subspace]
    remaining_in: list[Subspace]
    forgetting_out: list[Subspace]
    remaining_out: list[Subspace]

    FAMILIES = ("forgetting_in", "remaining_in", "forgetting_out", "remaining_out")

    def __post_init__(self):
        sizes = {len(getattr(self, f)) for f in self.FAMILIES}
        if len(sizes) != 1:
            raise DimensionMismatch(f"subspace families have different layer counts: {sizes}")

    @property
    def num_layers(self) -> int:
        return len(self.forgetting_in)

    def check_model(self, model: Model) -> None:
        if self.num_layers != model.num_layers:
            raise DimensionMismatch(
                f"{self.num_layers} subspace layers for a {model.num_layers}-layer model"
            )
        for l, layer in enumerate(model.layers):
            if self.forgetting_in[l].dim != layer.fan_in or self.remaining_in[l].dim != layer.fan_in:
                raise DimensionMismatch(f"layer {l} input subspace dim != fan_in {layer.fan_in}")
            if self.forgetting_out[l].dim != layer.fan_out or self.remaining_out[l].dim != layer.fan_out:
                raise DimensionMismatch(f"layer {l} output subspace dim != fan_out {layer.fan_out}")

    def ranks(self) -> dict[str, list[int]]:
        return {f: [s.k for s in getattr(self, f)] for f in self.FAMILIES}

    def as_dict(self) -> dict[str, list[Subspace]]:
        return {f: list(getattr(self, f)) for f in self.FAMILIES}

    @classmethod
    def from_dict(cls, doc: dict[str, list[Subspace]]) -> SubspaceSet:
        return cls(*(list(doc[f]) for f in cls.FAMILIES))


# -- feature losses --------------------------------------------------------------


def _check_layers(trace: ActivationTrace, subs: list[Subspace]) -> None:
    if len(trace.outputs) != len(subs):
        raise DimensionMismatch(f"trace has {len(trace.outputs)} layers, subspaces {len(subs)}")
    for h, s in zip(trace.outputs, subs):
        if h.shape[0] != s.dim:
            raise DimensionMismatch(f"feature dim {h.shape[0]} vs subspace dim {s.dim}")


def fop_f_terms(trace: ActivationTrace, subs: SubspaceSet) -> tuple[float, list[np.ndarray]]:
    """Loss value and dL/dH^l for ``sum_l mean_b ||P_f h||^2``."""
    _check_layers(trace, subs.forgetting_out)
    n = trace.outputs[0].shape[1]
    loss, grads = 0.0, []
    for h, s in zip(trace.outputs, subs.forgetting_out):
        ph = s.projector @ h
        loss += float(np.sum(ph * ph)) / n
        grads.append(2.0 * ph / n)
    return loss, grads


def fop_r_terms(trace: ActivationTrace, subs: SubspaceSet) -> tuple[float, list[np.ndarray]]:
    """Loss value and dL/dH^l for ``sum_l mean_b ||h - P_r h||^2``."""
    _check_layers(trace, subs.remaining_out)
    n = trace.outputs[0].shape[1]
    loss, grads = 0.0, []
    for h, s in zip(trace.outputs, subs.remaining_out):
        rh = h - s.projector @ h
        loss += float(np.sum(rh * rh)) / n
        grads.append(2.0 * rh / n)
    return loss, grads


def fop_f_loss(trace: ActivationTrace, subs: SubspaceSet) -> float:
    return fop_f_terms(trace, subs)[0]


def fop_r_loss(trace: ActivationTrace, subs: SubspaceSet) -> float:
    return fop_r_terms(trace, subs)[0]


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over columns and its gradient w.r.t. the logits."""
    n = logits.shape[1]
    shifted = logits - logits.max(axis=0, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=0))
    log_p = shifted - log_z
    cols = np.arange(n)
    loss = -float(log_p[labels, cols].mean())
    grad = np.exp(log_p)
    grad[labels, cols] -= 1.0
    return loss, grad / n


def combine(ce: float, fop_f: float, fop_r: float, cfg: TrainConfig) -> LossBreakdown:
    return LossBreakdown(ce, fop_f, fop_r, ce + cfg.lambda1 * fop_f + cfg.lambda2 * fop_r)


def loss_and_grads(
    x_f: np.ndarray,
    x_r: np.ndarray,
    y_r: np.ndarray,
    model: Model,
    subs: SubspaceSet,
    cfg: TrainConfig,
) -> tuple[LossBreakdown, Gradients]:
    """Total loss and exact adapter gradients (projectors held constant)."""
    if x_f.shape[1] == 0 or x_r.shape[1] == 0:
        raise EmptyBatch("forgetting and remaining batches must be nonempty")
    _, tr_f = forward(model, x_f)
    logits_r, tr_r = forward(model, x_r)
    ce, d_logits = cross_entropy(logits_r, y_r)
    ff, g_f = fop_f_terms(tr_f, subs)
    fr, g_r = fop_r_terms(tr_r, subs)
    g_f = [cfg.lambda1 * g for g in g_f]
    g_r = [cfg.lambda2 * g for g in g_r]
    grads = backward(model, tr_f, None, g_f) + backward(model, tr_r, d_logits, g_r)
    return combine(ce, ff, fr, cfg), grads


def total_loss(x_f, x_r, y_r, model: Model, subs: SubspaceSet, cfg: TrainConfig) -> LossBreakdown:
    if np.shape(x_f)[-1] == 0 or np.shape(x_r)[-1] == 0:
        raise EmptyBatch("forgetting and remaining batches must be nonempty")
    _, tr_f = forward(model, x_f)
    logits_r, tr_r = forward(model, x_r)
    ce, _ = cross_entropy(logits_r, np.asarray(y_r))
    return combine(ce, fop_f_loss(tr_f, subs), fop_r_loss(tr_r, subs), cfg)


# -- gradient projection ---------------------------------------------------------


def project_gradient(
    g_down: np.ndarray, S_f_in: Subspace, S_r_in: Subspace, mode: str = "sequential"
) -> np.ndarray:
    """Restrict a down-factor gradient (``r x fan_in``) to the forgetting subspace
    and strip its action on the remaining subspace.

    ``sequential`` computes ``g P_f (I - P_r)``; ``literal`` computes
    ``g - g (I - P_f) - g P_r``, which only equals the former when the spans are
    orthogonal and the gradient has no remaining-subspace component.
    """
    g = np.asarray(g_down, dtype=float)
    fan_in = g.shape[-1]
    if S_f_in.dim != fan_in or S_r_in.dim != fan_in:
        raise DimensionMismatch(
            f"gradient fan_in {fan_in} vs subspace dims {S_f_in.dim}, {S_r_in.dim}"
        )
    g_f = (g @ S_f_in.basis) @ S_f_in.basis.T
    if mode == "sequential":
        return g_f - (g_f @ S_r_in.basis) @ S_r_in.basis.T
    if mode == "literal":
        return g_f - (g @ S_r_in.basis) @ S_r_in.basis.T
    raise InvalidConfig(f"unknown projection mode {mode!r}")


# -- training loop ---------------------------------------------------------------


@dataclass
class UnlearnTask:
    index: int
    forgetting_classes: frozenset[int]
    remaining_classes: frozenset[int]
    x_f_train: np.ndarray  # d x n
    x_r_train: np.ndarray
    y_r_train: np.ndarray
    x_f_test: np.ndarray | None = None
    y_f_test: np.ndarray | None = None
    x_r_test: np.ndarray | None = None
    y_r_test: np.ndarray | None = None
    forgotten_before: frozenset[int] = field(default_factory=frozenset)


class _Cycler:
    """Reshuffled minibatch index stream over one split."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.bs, self.rng = n, min(batch_size, n), rng
        self._order, self._pos = rng.permutation(n), 0

    def batches_per_epoch(self) -> int:
        return -(-self.n // self.bs)

    def next(self) -> np.ndarray:
        if self._pos >= self.n:
            self._order, self._pos = self.rng.permutation(self.n), 0
        idx = self._order[self._pos : self._pos + self.bs]
        self._pos += self.bs
        return idx


def unlearn_task(
    model: Model,
    task: UnlearnTask,
    subs: SubspaceSet,
    cfg: TrainConfig,
    on_step: Callable[[dict], None] | None = None,
    step_hook: Callable[[Gradients], None] | None = None,
) -> Model:
    """Train the adapters of a copy of ``model`` on one unlearning task.

    An epoch is as many paired steps as the longer split has minibatches; the
    shorter split cycles. Backbone and head are never touched. ``step_hook``
    may overwrite the gradients before projection (testing aid).
    """
    cfg.validate()
    if model.adapters is None:
        raise NoAdapters("attach adapters before unlearning")
    if task.x_f_train.shape[1] == 0 or task.x_r_train.shape[1] == 0:
        raise EmptySplit(f"task {task.index} has an empty forgetting or remaining train split")
    subs.check_model(model)
    out = model.copy()
    rng = np.random.default_rng(cfg.seed)
    cyc_f = _Cycler(task.x_f_train.shape[1], cfg.batch_size, rng)
    cyc_r = _Cycler(task.x_r_train.shape[1], cfg.batch_size, rng)
    steps = max(cyc_f.batches_per_epoch(), cyc_r.batches_per_epoch())
    velocity = [(np.zeros_like(a.down), np.zeros_like(a.up)) for a in out.adapters]
    mu = MOMENTUM if cfg.optimizer == "sgd_momentum" else 0.0
    for epoch in range(cfg.epochs):
        for step in range(steps):
            i_f, i_r = cyc_f.next(), cyc_r.next()
            losses, grads = loss_and_grads(
                task.x_f_train[:, i_f], task.x_r_train[:, i_r], task.y_r_train[i_r], out, subs, cfg
            )
            if step_hook is not None:
                step_hook(grads)
            for l, ad in enumerate(out.adapters):
                g_down = project_gradient(
                    grads.down[l], subs.forgetting_in[l], subs.remaining_in[l], cfg.gradient_projection
                )
                v_down, v_up = velocity[l]
                v_down = mu * v_down + g_down
                v_up = mu * v_up + grads.up[l]
                velocity[l] = (v_down, v_up)
                ad.down = ad.down - cfg.learning_rate * v_down
                ad.up = ad.up - cfg.learning_rate * v_up
            if on_step is not None:
                on_step(
                    {
                        "task": task.index,
                        "epoch": epoch,
                        "step": step,
                        "ce": losses.ce,
                        "fop_f": losses.fop_f,
                        "fop_r": losses.fop_r,
                        "total": losses.total,
                    }
                )
    return out
