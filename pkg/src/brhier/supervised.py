"""Batch specialization for classification and regression.

Utilities are negative losses; the selector is trained in the infinite-β1
limit (no selection KL), weighted by each expert's free energy
f̂ = -loss - (1/β2)·KL(posterior || expert prior).  Every sample is a
one-step episode, so the batch-normalized free energy itself plays the role
of the advantage and no critics are needed.  Experts are linear heads
updated by the exact gradient of their expected free energy on the samples
they were selected for.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .distributions import (LN2, PROB_FLOOR, VARIANCE_FLOOR, Categorical,
                            DiagonalGaussian, RngStream, floored_log)
from .engine import RNG_INIT, ema_categorical, ema_gaussian
from .errors import ContractViolation, NumericFault
from .nets import (GaussianHead, LinearPolicySpec, MlpSpec, OptimizerState,
                   ParamVector, SoftmaxHead, backward, categorical_logprob_grad,
                   forward, init_params, make_optimizer, optimizer_step, softmax)

RNG_DATA = 40
RNG_EPOCH = 41


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray            # (n, d)
    targets: np.ndarray           # class indices (n,) or real targets (n,)
    task_kind: str                # "classification" | "regression"
    n_classes: int | None = None

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=float)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ContractViolation("inputs must be a nonempty (n, d) matrix")
        object.__setattr__(self, "inputs", x)
        if self.task_kind == "classification":
            t = np.asarray(self.targets, dtype=int)
            if self.n_classes is None or self.n_classes < 2:
                raise ContractViolation("classification needs n_classes >= 2")
            if t.shape != (x.shape[0],) or t.min() < 0 or t.max() >= self.n_classes:
                raise ContractViolation("targets must be class indices below n_classes")
        elif self.task_kind == "regression":
            t = np.asarray(self.targets, dtype=float)
            if t.shape != (x.shape[0],):
                raise ContractViolation("regression targets must be (n,)")
        else:
            raise ContractViolation(f"unknown task_kind {self.task_kind!r}")
        object.__setattr__(self, "targets", t)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


@dataclass
class SupervisedConfig:
    """Hyperparameters; the selection stage always runs at β1 = ∞."""
    n_experts: int
    beta2: float = 10.0
    epochs: int = 200
    batch_size: int = 64
    lr_selector: float = 0.01
    lr_experts: float = 0.05
    lambda1: float = 0.99
    lambda2: float = 0.99
    seed: int = 0
    selector_hidden: tuple[int, ...] = (64, 64)
    init_log_std: float = math.log(0.5)

    def __post_init__(self):
        if self.n_experts < 1:
            raise ContractViolation("n_experts must be >= 1")
        if not self.beta2 > 0:
            raise ContractViolation("beta2 must be positive (inf allowed)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractViolation("epochs must be >= 0 and batch_size >= 1")
        self.selector_hidden = tuple(self.selector_hidden)


def loss(task_kind: str, prediction, target) -> float:
    """Cross-entropy against a predicted class distribution, or squared error.

    The utility used everywhere in training is exactly the negated loss.
    """
    if task_kind == "classification":
        probs = prediction.probs if isinstance(prediction, Categorical) \
            else np.asarray(prediction, dtype=float)
        idx = int(target)
        if not 0 <= idx < probs.size:
            raise ContractViolation("target class out of range")
        return float(-np.log(max(probs[idx], PROB_FLOOR)))
    if task_kind == "regression":
        pred = np.asarray(prediction, dtype=float).reshape(-1)
        tgt = np.asarray(target, dtype=float).reshape(-1)
        if pred.shape != tgt.shape:
            raise ContractViolation("prediction/target shape mismatch")
        d = pred - tgt
        return float(np.sum(d * d))
    raise ContractViolation(f"unknown task_kind {task_kind!r}")


# ---------------------------------------------------------------------------
# Synthetic datasets
# ---------------------------------------------------------------------------

REGRESSION_KNOTS = np.array([-3.0, -1.5, 0.0, 1.5, 3.0])
REGRESSION_VALUES = np.array([0.0, 3.0, 0.0, 3.0, 0.0])


def piecewise_target(x: np.ndarray) -> np.ndarray:
    """The four-segment piecewise-linear regression target on [-3, 3]."""
    return np.interp(np.asarray(x, dtype=float), REGRESSION_KNOTS, REGRESSION_VALUES)


def _balanced_halves(n: int) -> tuple[int, int]:
    return (n + 1) // 2, n // 2


def make_classification(task: str, n: int, noise: float, seed: int) -> LabeledDataset:
    """Two-class 2-D benchmarks: xor_blobs, concentric_circles, moons.

    Deterministic given the seed; class counts are balanced within one.  The
    moon arcs extend past a half circle so the crescents interlock deeply
    enough that no single linear separator does well.
    """
    if n < 4:
        raise ContractViolation("need n >= 4 samples")
    rng = RngStream(seed, (RNG_DATA, 0))
    n0, n1 = _balanced_halves(n)
    if task == "xor_blobs":
        centers = np.array([[1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]])
        labels = np.array([0, 0, 1, 1])
        reps = [(n0 + 1) // 2, n0 // 2, (n1 + 1) // 2, n1 // 2]
        xs, ys = [], []
        for c, lab, k in zip(centers, labels, reps):
            xs.append(c[None, :] + noise * rng.gen.standard_normal((k, 2)))
            ys.append(np.full(k, lab))
        x = np.concatenate(xs)
        y = np.concatenate(ys)
    elif task == "concentric_circles":
        t0 = rng.uniform(0.0, 2.0 * math.pi, n0)
        t1 = rng.uniform(0.0, 2.0 * math.pi, n1)
        inner = np.stack([np.cos(t0), np.sin(t0)], axis=1)
        outer = 1.4 * np.stack([np.cos(t1), np.sin(t1)], axis=1)
        x = np.concatenate([inner, outer]) + noise * rng.gen.standard_normal((n, 2))
        y = np.concatenate([np.zeros(n0, dtype=int), np.ones(n1, dtype=int)])
    elif task == "moons":
        arc = 1.9 * math.pi
        t0 = rng.uniform(-0.25 * math.pi, -0.25 * math.pi + arc, n0)
        t1 = rng.uniform(-0.25 * math.pi, -0.25 * math.pi + arc, n1)
        upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
        lower = np.stack([1.0 - np.cos(t1), 0.3 - np.sin(t1)], axis=1)
        x = np.concatenate([upper, lower]) + noise * rng.gen.standard_normal((n, 2))
        y = np.concatenate([np.zeros(n0, dtype=int), np.ones(n1, dtype=int)])
    else:
        raise ContractViolation(f"unknown classification task {task!r}")
    perm = rng.gen.permutation(n)
    return LabeledDataset(x[perm], y[perm], "classification", n_classes=2)


def make_regression(n: int, seed: int, noise: float = 0.05) -> LabeledDataset:
    """1-D inputs on [-3, 3]; targets on the piecewise-linear zigzag."""
    if n < 4:
        raise ContractViolation("need n >= 4 samples")
    rng = RngStream(seed, (RNG_DATA, 1))
    x = rng.uniform(-3.0, 3.0, n)
    y = piecewise_target(x) + noise * rng.gen.standard_normal(n)
    return LabeledDataset(x[:, None], y, "regression")


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class SupervisedState:
    config: SupervisedConfig
    task_kind: str
    selector_spec: MlpSpec
    selector_params: ParamVector
    expert_spec: LinearPolicySpec
    expert_params: list[ParamVector]
    selector_prior: Categorical
    expert_priors: list
    opt_selector: OptimizerState
    opt_experts: list[OptimizerState]
    epoch: int = 0


@dataclass
class SupervisedMetricsRow:
    iteration: int
    mean_reward: float            # mean utility (negated loss) of the mixture
    mean_free_energy: float
    mi_sx_bits: float
    selector_kl_nats: float
    expert_kl_nats: float
    entropy_selector_nats: float
    usage: tuple[float, ...]
    score: float                  # accuracy (classification) or mse (regression)


def supervised_metrics_header(n_experts: int, task_kind: str) -> str:
    usage = ",".join(f"usage_x{i}" for i in range(n_experts))
    score = "accuracy" if task_kind == "classification" else "mse"
    return ("iter,mean_reward,mean_free_energy,mi_sx_bits,selector_kl_nats,"
            f"expert_kl_nats,entropy_selector_nats,{usage},{score}")


def supervised_metrics_csv_row(row: SupervisedMetricsRow) -> str:
    vals = [str(row.iteration), repr(row.mean_reward), repr(row.mean_free_energy),
            repr(row.mi_sx_bits), repr(row.selector_kl_nats), repr(row.expert_kl_nats),
            repr(row.entropy_selector_nats)] + [repr(u) for u in row.usage] \
        + [repr(row.score)]
    return ",".join(vals)


def init_supervised_state(dataset: LabeledDataset, config: SupervisedConfig) -> SupervisedState:
    root = RngStream(config.seed)
    selector_spec = MlpSpec(dataset.dim, config.n_experts, config.selector_hidden)
    if dataset.task_kind == "classification":
        expert_spec = LinearPolicySpec(dataset.dim, SoftmaxHead(dataset.n_classes))
        expert_priors = [Categorical.uniform(dataset.n_classes)
                         for _ in range(config.n_experts)]
    else:
        expert_spec = LinearPolicySpec(dataset.dim, GaussianHead(1))
        init_var = max(math.exp(2.0 * config.init_log_std), VARIANCE_FLOOR)
        expert_priors = [DiagonalGaussian(np.zeros(1), np.full(1, init_var))
                         for _ in range(config.n_experts)]
    selector_params = init_params(selector_spec, root.child(RNG_INIT, 0))
    expert_params = [init_params(expert_spec, root.child(RNG_INIT, 1 + x),
                                 init_log_std=config.init_log_std)
                     for x in range(config.n_experts)]
    return SupervisedState(
        config=config,
        task_kind=dataset.task_kind,
        selector_spec=selector_spec,
        selector_params=selector_params,
        expert_spec=expert_spec,
        expert_params=expert_params,
        selector_prior=Categorical.uniform(config.n_experts),
        expert_priors=expert_priors,
        opt_selector=make_optimizer(selector_params, "adam", config.lr_selector),
        opt_experts=[make_optimizer(p, "adam", config.lr_experts) for p in expert_params],
    )


def _expert_free_energies(state: SupervisedState, inputs: np.ndarray,
                          targets: np.ndarray, expert: int) -> tuple[np.ndarray, dict]:
    """f̂ per sample for one expert, plus intermediates for the gradient."""
    beta2 = state.config.beta2
    out, cache = forward(state.expert_spec, state.expert_params[expert], inputs)
    if state.task_kind == "classification":
        probs = softmax(out)
        idx = targets.astype(int)
        utility = np.log(np.maximum(probs[np.arange(len(idx)), idx], PROB_FLOOR))
        q = state.expert_priors[expert].probs
        log_ratio = floored_log(probs) - floored_log(q)[None, :]
        kl = np.sum(probs * log_ratio, axis=1)
        extras = {"cache": cache, "probs": probs, "log_ratio": log_ratio, "kl": kl}
    else:
        mean, log_std = out
        var = np.maximum(np.exp(2.0 * log_std), VARIANCE_FLOOR)
        d = mean[:, 0] - targets
        utility = -(d * d + var[0])
        prior = state.expert_priors[expert]
        ratio = var[0] / prior.variance[0]
        dm = prior.mean[0] - mean[:, 0]
        kl = 0.5 * (ratio + dm * dm / prior.variance[0] - 1.0 - np.log(ratio))
        extras = {"cache": cache, "mean": mean, "var": var, "d": d, "kl": kl}
    f_hat = utility if math.isinf(beta2) else utility - kl / beta2
    return f_hat, extras


def _expert_ascent(state: SupervisedState, inputs: np.ndarray, targets: np.ndarray,
                   expert: int) -> None:
    """One exact-gradient ascent step of the expert free energy."""
    beta2 = state.config.beta2
    f_hat, ex = _expert_free_energies(state, inputs, targets, expert)
    n = inputs.shape[0]
    if state.task_kind == "classification":
        probs, log_ratio, kl = ex["probs"], ex["log_ratio"], ex["kl"]
        idx = targets.astype(int)
        d_logits = -probs
        d_logits[np.arange(n), idx] += 1.0
        if not math.isinf(beta2):
            d_logits -= probs * (log_ratio - kl[:, None]) / beta2
        grad = backward(ex["cache"], d_logits / n)
    else:
        mean, var, d = ex["mean"], ex["var"], ex["d"]
        prior = state.expert_priors[expert]
        d_mean = -2.0 * d[:, None]
        d_log_std = np.full_like(mean, -2.0 * var[0])
        if not math.isinf(beta2):
            d_mean = d_mean - ((mean - prior.mean[None, :]) / prior.variance[None, :]) / beta2
            d_log_std = d_log_std - (var[None, 0] / prior.variance[None, :] - 1.0) / beta2
        grad = backward(ex["cache"], (d_mean / n, d_log_std / n))
    optimizer_step(state.opt_experts[expert], state.expert_params[expert], grad, "ascend")


def mixture_predict(state: SupervisedState, inputs: np.ndarray) -> np.ndarray:
    """Class probabilities (n, k) or regression means (n,) under the mixture."""
    inputs = np.atleast_2d(inputs)
    logits, _ = forward(state.selector_spec, state.selector_params, inputs)
    weights = softmax(logits)
    if state.task_kind == "classification":
        total = np.zeros((inputs.shape[0], state.expert_spec.head.n_classes))
        for x in range(state.config.n_experts):
            out, _ = forward(state.expert_spec, state.expert_params[x], inputs)
            total += weights[:, x:x + 1] * softmax(out)
        return total
    total = np.zeros(inputs.shape[0])
    for x in range(state.config.n_experts):
        (mean, _), _ = forward(state.expert_spec, state.expert_params[x], inputs)
        total += weights[:, x] * mean[:, 0]
    return total


def evaluate_score(state: SupervisedState, dataset: LabeledDataset) -> float:
    """Accuracy of the mixture argmax, or mean squared error of the mixture mean."""
    pred = mixture_predict(state, dataset.inputs)
    if dataset.task_kind == "classification":
        return float(np.mean(np.argmax(pred, axis=1) == dataset.targets))
    d = pred - dataset.targets
    return float(np.mean(d * d))


def _epoch_metrics(state: SupervisedState, dataset: LabeledDataset, epoch: int,
                   mean_f: float) -> SupervisedMetricsRow:
    logits, _ = forward(state.selector_spec, state.selector_params, dataset.inputs)
    probs = softmax(logits)
    prior = state.selector_prior.probs
    log_ratio = floored_log(probs) - floored_log(prior)[None, :]
    sel_kl = float(np.sum(probs * log_ratio, axis=1).mean())
    ent = float(-np.sum(probs * floored_log(probs), axis=1).mean())

    expert_kl = 0.0
    for x in range(state.config.n_experts):
        fx, ex = _expert_free_energies(state, dataset.inputs, dataset.targets
                                       if dataset.task_kind == "regression"
                                       else dataset.targets.astype(float), x)
        expert_kl += float(np.mean(probs[:, x] * ex["kl"]))

    pred = mixture_predict(state, dataset.inputs)
    if dataset.task_kind == "classification":
        idx = dataset.targets
        point = np.log(np.maximum(pred[np.arange(dataset.n), idx], PROB_FLOOR))
        mean_reward = float(point.mean())
        score = float(np.mean(np.argmax(pred, axis=1) == idx))
    else:
        d = pred - dataset.targets
        mean_reward = float(-(d * d).mean())
        score = float((d * d).mean())
    return SupervisedMetricsRow(
        iteration=epoch,
        mean_reward=mean_reward,
        mean_free_energy=mean_f,
        mi_sx_bits=sel_kl / LN2,
        selector_kl_nats=sel_kl,
        expert_kl_nats=expert_kl,
        entropy_selector_nats=ent,
        usage=tuple(float(u) for u in prior),
        score=score,
    )


def train_supervised(dataset: LabeledDataset, config: SupervisedConfig,
                     on_epoch=None, initial_state: SupervisedState | None = None,
                     start_epoch: int = 0):
    """Mini-batch alternating optimization of selector and experts.

    Within each epoch the batches alternate: even batches update the
    selector by the score-function gradient weighted by the batch-normalized
    expert free energies, odd batches update the selected experts; both
    priors follow every batch by EMA.  Deterministic for a fixed seed.
    """
    state = initial_state if initial_state is not None else \
        init_supervised_state(dataset, config)
    root = RngStream(config.seed)
    rows: list[SupervisedMetricsRow] = []
    n = dataset.n
    targets_f = dataset.targets.astype(float)

    for epoch in range(start_epoch, config.epochs):
        erng = root.child(RNG_EPOCH, epoch)
        perm = erng.gen.permutation(n)
        f_sum, f_count = 0.0, 0
        for b, lo in enumerate(range(0, n, config.batch_size)):
            take = perm[lo:lo + config.batch_size]
            xb, yb = dataset.inputs[take], targets_f[take]
            m = len(take)

            logits, cache = forward(state.selector_spec, state.selector_params, xb)
            sel_probs = softmax(logits)
            chosen = np.array([erng.gen.choice(config.n_experts, p=sel_probs[i] / sel_probs[i].sum())
                               for i in range(m)], dtype=int)
            f_hat = np.empty(m)
            for x in range(config.n_experts):
                mask = chosen == x
                if np.any(mask):
                    f_hat[mask], _ = _expert_free_energies(state, xb[mask], yb[mask], x)
            f_sum += float(f_hat.sum())
            f_count += m

            if b % 2 == 0:
                w = f_hat - f_hat.mean()
                std = float(w.std())
                if std > 1e-8:
                    w = w / std
                _, dlogits = categorical_logprob_grad(logits, chosen)
                grad = backward(cache, dlogits * (w / m)[:, None])
                optimizer_step(state.opt_selector, state.selector_params, grad, "ascend")
            else:
                for x in range(config.n_experts):
                    mask = chosen == x
                    if np.any(mask):
                        _expert_ascent(state, xb[mask], yb[mask], x)

            state.selector_prior = ema_categorical(
                state.selector_prior, sel_probs.mean(axis=0), config.lambda2)
            for x in range(config.n_experts):
                mask = chosen == x
                if not np.any(mask):
                    continue
                out, _ = forward(state.expert_spec, state.expert_params[x], xb[mask])
                if state.task_kind == "classification":
                    state.expert_priors[x] = ema_categorical(
                        state.expert_priors[x], softmax(out).mean(axis=0), config.lambda1)
                else:
                    mean, log_std = out
                    var = np.maximum(np.exp(2.0 * log_std), VARIANCE_FLOOR)
                    m_hat = mean.mean(axis=0)
                    v_hat = (var + mean * mean).mean(axis=0) - m_hat * m_hat
                    state.expert_priors[x] = ema_gaussian(
                        state.expert_priors[x], m_hat, v_hat, config.lambda1)

        row = _epoch_metrics(state, dataset, epoch,
                             f_sum / f_count if f_count else math.nan)
        rows.append(row)
        state.epoch = epoch + 1
        if on_epoch is not None:
            on_epoch(row)
    return state, rows
