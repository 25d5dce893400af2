"""Client-level evaluation: initial / personalized / template accuracy,
in/out-of-class splits, inter-client similarity, and centralized baselines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .algorithms import AlgorithmSpec
from .datasets import LabeledDataset
from .engine import (
    FederatedData,
    FederationState,
    LRSchedule,
    assemble_client_params,
    eval_stream,
    iterations_per_epoch,
    _train_epochs,
)
from .network import Network, backward, forward, representations, segment_cosines
from .optim import OptState, sgd_step
from .params import ParamVector


class EvalError(RuntimeError):
    pass


@dataclass
class EvalReport:
    """Per-client accuracies with their across-client mean and population
    std. Absent entries (empty subsets) are NaN and excluded from both."""

    client_ids: list[int]
    accuracies: np.ndarray
    finetune_epochs: int
    part: str | None
    mean: float
    std: float

    @classmethod
    def from_accuracies(
        cls,
        client_ids: list[int],
        accuracies,
        finetune_epochs: int = 0,
        part: str | None = None,
    ) -> "EvalReport":
        acc = np.asarray(accuracies, dtype=np.float64)
        present = acc[~np.isnan(acc)]
        mean = float(present.mean()) if len(present) else float("nan")
        std = float(present.std()) if len(present) else float("nan")
        return cls(list(client_ids), acc, finetune_epochs, part, mean, std)


def accuracy(net: Network, ds: LabeledDataset) -> float:
    """Share of correct argmax predictions; ties go to the lowest class."""
    if len(ds) == 0:
        raise EvalError("empty evaluation set")
    logits, _ = forward(net, ds.samples)
    return float((logits.argmax(axis=1) == ds.labels).mean())


def client_models(
    state: FederationState,
    template: Network,
    alg: AlgorithmSpec,
    n_clients: int,
) -> list[ParamVector]:
    """Broadcast-assembled per-client parameters: shared global parts plus
    whatever each client keeps resident."""
    return [
        assemble_client_params(state, template, alg, cid) for cid in range(n_clients)
    ]


def initial_accuracy(
    models: list[ParamVector], template: Network, data: FederatedData
) -> EvalReport:
    """Accuracy of each client's broadcast model on its own test split.
    Read-only: evaluating twice yields byte-identical reports."""
    accs = []
    for cid, params in enumerate(models):
        test_ds = data.client_test(cid)
        accs.append(accuracy(template.with_params(params), test_ds))
    return EvalReport.from_accuracies(list(range(len(models))), accs, 0, None)


def fine_tune(
    client_params: ParamVector,
    template: Network,
    part: str,
    finetune_epochs: int,
    lr: float,
    client_ds: LabeledDataset,
    rng: np.random.Generator,
    batch_size: int = 50,
    momentum: float = 0.9,
    rule: str = "joint",
) -> ParamVector:
    """Personalization epochs on the client's train data, updating ``part``.

    ``rule='sequential_head_then_body'`` trains the head for the full
    epoch count and then the body for one more epoch. Momentum buffers
    start fresh. finetune_epochs=0 returns the input unchanged.
    """
    params = client_params.copy()
    if finetune_epochs == 0:
        return params
    if rule == "sequential_head_then_body":
        _train_epochs(
            client_ds, params, template, "head", finetune_epochs,
            batch_size, momentum, lambda _u: lr, rng,
        )
        _train_epochs(
            client_ds, params, template, "body", 1,
            batch_size, momentum, lambda _u: lr, rng,
        )
    else:
        _train_epochs(
            client_ds, params, template, part, finetune_epochs,
            batch_size, momentum, lambda _u: lr, rng,
        )
    return params


def personalized_models(
    models: list[ParamVector],
    template: Network,
    data: FederatedData,
    part: str,
    finetune_epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 50,
    momentum: float = 0.9,
    rule: str = "joint",
) -> list[ParamVector]:
    out = []
    for cid, params in enumerate(models):
        rng = eval_stream(seed, cid)
        out.append(
            fine_tune(
                params, template, part, finetune_epochs, lr,
                data.client_train(cid), rng, batch_size, momentum, rule,
            )
        )
    return out


def personalized_accuracy(
    models: list[ParamVector],
    template: Network,
    data: FederatedData,
    part: str,
    finetune_epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 50,
    momentum: float = 0.9,
    rule: str = "joint",
) -> EvalReport:
    """Fine-tune each client independently, then evaluate on its test split."""
    tuned = personalized_models(
        models, template, data, part, finetune_epochs, lr, seed,
        batch_size, momentum, rule,
    )
    accs = [
        accuracy(template.with_params(p), data.client_test(cid))
        for cid, p in enumerate(tuned)
    ]
    return EvalReport.from_accuracies(
        list(range(len(models))), accs, finetune_epochs, part
    )


def terminal_lr(base_lr: float) -> float:
    """The rate the federated schedule ends on (two decays of 0.1)."""
    return base_lr * 0.01


# --- template (without-head) evaluation --------------------------------------


@dataclass
class TemplateSet:
    """Per-class mean representations built from one client's train data.
    Classes absent from the client are absent from the set."""

    classes: np.ndarray
    templates: np.ndarray  # (len(classes), d)

    @classmethod
    def build(cls, net: Network, client_ds: LabeledDataset) -> "TemplateSet":
        if len(client_ds) == 0:
            raise EvalError("cannot build templates from an empty train split")
        reps = representations(net, client_ds.samples).astype(np.float64)
        classes = np.unique(client_ds.labels)
        templates = np.stack(
            [reps[client_ds.labels == c].mean(axis=0) for c in classes]
        )
        return cls(classes, templates)

    def classify(self, reps: np.ndarray) -> np.ndarray:
        """Nearest template by cosine similarity; a zero-norm template is
        never selected; predictions are always within `classes`."""
        reps = reps.astype(np.float64)
        t_norm = np.linalg.norm(self.templates, axis=1)
        r_norm = np.linalg.norm(reps, axis=1)
        sims = reps @ self.templates.T
        with np.errstate(invalid="ignore", divide="ignore"):
            sims = sims / np.outer(np.where(r_norm == 0, 1.0, r_norm), t_norm)
        sims[:, t_norm == 0] = -np.inf
        if np.all(np.isneginf(sims)):
            raise EvalError("all templates are zero vectors")
        return self.classes[sims.argmax(axis=1)]


def template_accuracy(
    models: list[ParamVector], template: Network, data: FederatedData
) -> EvalReport:
    """Classify each client's test samples to its nearest per-class mean
    representation (cosine similarity); the trained head plays no part."""
    accs = []
    for cid, params in enumerate(models):
        net = template.with_params(params)
        tset = TemplateSet.build(net, data.client_train(cid))
        test_ds = data.client_test(cid)
        if len(test_ds) == 0:
            raise EvalError(f"client {cid}: empty test split")
        preds = tset.classify(representations(net, test_ds.samples))
        accs.append(float((preds == test_ds.labels).mean()))
    return EvalReport.from_accuracies(list(range(len(models))), accs, 0, "template")


# --- in-class / out-of-class -------------------------------------------------


def in_out_class_accuracy(
    models: list[ParamVector], template: Network, data: FederatedData
) -> tuple[EvalReport, EvalReport]:
    """Accuracy split by whether a test label appears in the client's train
    split. Meant for global-mode test splits; empty subsets become NaN."""
    in_accs, out_accs = [], []
    for cid, params in enumerate(models):
        net = template.with_params(params)
        test_ds = data.client_test(cid)
        train_classes = np.unique(data.client_train(cid).labels)
        logits, _ = forward(net, test_ds.samples)
        preds = logits.argmax(axis=1)
        in_mask = np.isin(test_ds.labels, train_classes)
        correct = preds == test_ds.labels
        in_accs.append(float(correct[in_mask].mean()) if in_mask.any() else float("nan"))
        out_accs.append(
            float(correct[~in_mask].mean()) if (~in_mask).any() else float("nan")
        )
    ids = list(range(len(models)))
    return (
        EvalReport.from_accuracies(ids, in_accs, 0, "in-class"),
        EvalReport.from_accuracies(ids, out_accs, 0, "out-of-class"),
    )


# --- inter-client similarity --------------------------------------------------


def interclient_cosine(models: list[ParamVector], per_layer: bool = True):
    """Mean pairwise cosine similarity per layer segment across client models."""
    if len(models) < 2:
        raise EvalError("need at least two models")
    n_seg = models[0].n_segments
    sums = np.zeros(n_seg)
    counts = np.zeros(n_seg, dtype=np.int64)
    for i in range(len(models)):
        for j in range(i + 1, len(models)):
            for s, cos in enumerate(segment_cosines(models[i], models[j])):
                if cos is not None:
                    sums[s] += cos
                    counts[s] += 1
    means = [
        float(sums[s] / counts[s]) if counts[s] else None for s in range(n_seg)
    ]
    if per_layer:
        return means
    present = [m for m in means if m is not None]
    return float(np.mean(present)) if present else None


# --- centralized baselines -----------------------------------------------------


def centralized_train(
    net: Network,
    train_ds: LabeledDataset,
    test_ds: LabeledDataset,
    part: str,
    epochs: int,
    base_lr: float,
    seed: int,
    batch_size: int = 50,
    momentum: float = 0.9,
) -> list[float]:
    """Plain pooled training updating only ``part``; step-decay schedule
    over the whole run; returns test accuracy after each epoch."""
    params = net.params.copy()
    working = net.with_params(params)
    ipe = iterations_per_epoch(len(train_ds), batch_size)
    sched = LRSchedule(base_lr, max(epochs * ipe, 1))
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(9,)))
    curve = []
    # momentum is carried across epochs here: one long run, not a federation
    opt = OptState.for_params(params, momentum)
    mask = net.mask_for(part)
    u = 0
    for _ in range(epochs):
        order = rng.permutation(len(train_ds))
        for t in range(ipe):
            batch = order[t * batch_size : (t + 1) * batch_size]
            _, cache = forward(working, train_ds.samples[batch])
            _, grads = backward(working, cache, train_ds.labels[batch])
            sgd_step(params, grads, opt, sched.lr_at(u), mask)
            u += 1
        curve.append(accuracy(working, test_ds))
    return curve
