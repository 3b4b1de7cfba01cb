"""Exact solvers for bounded-rational decision problems on finite spaces.

Single-stage: alternate the posterior update p(a|s) ∝ p(a)·exp(β·U(s,a))
with the marginal prior update until the fixed point.  Two-stage: iterate
the coupled selector/expert equations, where the selector weighs experts by
their free energy F(s,x) = E[U] - (1/β2)·KL(posterior || expert prior).

All exponentials are accumulated in the log domain with per-row max
subtraction, so large β values are safe.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .distributions import LN2, Categorical, RngStream, floored_log
from .errors import ContractViolation

DEFAULT_TOL = 1e-9
DEFAULT_MAX_ITER = 10_000
_INIT_NOISE = 0.1  # multiplicative perturbation of the uniform start, in [0.9, 1.1]
_DEAD_MASS = 1e-12  # below this selector mass an expert keeps its previous prior


@dataclass(frozen=True)
class DiscreteProblem:
    """Tabular utility U(s,a) with a fixed state distribution."""

    utility: np.ndarray
    state_dist: Categorical
    n_experts: int = 1

    def __post_init__(self):
        u = np.asarray(self.utility, dtype=float)
        if u.ndim != 2 or u.size == 0:
            raise ContractViolation("utility must be a nonempty 2-D table")
        if not np.all(np.isfinite(u)):
            raise ContractViolation("utility must be finite everywhere")
        if self.state_dist.dim != u.shape[0]:
            raise ContractViolation("state_dist length must match utility rows")
        if self.n_experts < 1:
            raise ContractViolation("n_experts must be >= 1")
        object.__setattr__(self, "utility", u)

    @property
    def n_states(self) -> int:
        return self.utility.shape[0]

    @property
    def n_actions(self) -> int:
        return self.utility.shape[1]


@dataclass
class SingleSolution:
    posterior: np.ndarray          # (n_states, n_actions), rows sum to 1
    prior: Categorical             # marginal p(a)
    objective_value: float
    iterations_used: int
    converged: bool
    objective_history: np.ndarray


@dataclass
class HierSolution:
    selector: np.ndarray           # (n_states, n_experts)
    selector_prior: Categorical    # p(x)
    experts: np.ndarray            # (n_experts, n_states, n_actions)
    expert_priors: np.ndarray      # (n_experts, n_actions)
    free_energy: np.ndarray        # F(s,x), (n_states, n_experts), nats-weighted
    objective_value: float
    iterations_used: int
    converged: bool
    degenerate: bool
    objective_history: np.ndarray = field(default_factory=lambda: np.empty(0))


def _perturbed_uniform(shape: tuple[int, ...], rng: RngStream) -> np.ndarray:
    """Uniform rows times multiplicative noise in [0.9, 1.1], renormalized.

    Exact uniform initialization is a symmetric fixed point of the two-stage
    iteration and never breaks ties between experts.
    """
    w = 1.0 + _INIT_NOISE * (2.0 * rng.gen.random(shape) - 1.0)
    return w / w.sum(axis=-1, keepdims=True)


def _rows_from_log(logw: np.ndarray) -> np.ndarray:
    logw = logw - logw.max(axis=-1, keepdims=True)
    w = np.exp(logw)
    return w / w.sum(axis=-1, keepdims=True)


def _hard_rows(score: np.ndarray) -> np.ndarray:
    """One-hot rows on the per-row argmax, ties broken to the lowest index."""
    out = np.zeros_like(score)
    idx = np.argmax(score, axis=-1)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def _expected_kl(post: np.ndarray, prior: np.ndarray, weights: np.ndarray) -> float:
    """sum_i weights_i * KL(post_i || prior) in nats, vectorized with floors."""
    terms = post * (floored_log(post) - floored_log(prior))
    terms[post <= 0.0] = 0.0
    return float(np.sum(weights * terms.sum(axis=-1)))


def objective_single(problem: DiscreteProblem, posterior: np.ndarray,
                     prior: np.ndarray, beta: float) -> float:
    """E[U] - (1/β)·E_s[KL(p(a|s) || p(a))], in utility units (KL in nats)."""
    ps = problem.state_dist.probs
    eu = float(np.sum(ps[:, None] * posterior * problem.utility))
    if math.isinf(beta):
        return eu
    return eu - _expected_kl(posterior, prior[None, :], ps) / beta


def solve_single(problem: DiscreteProblem, beta: float, tol: float = DEFAULT_TOL,
                 max_iter: int = DEFAULT_MAX_ITER, seed: int = 0) -> SingleSolution:
    """Fixed point of the single-stage trade-off at inverse temperature β.

    β → ∞ recovers per-state utility maximization (ties to the lowest action
    index); β → 0 collapses the posterior onto the prior.  The objective is
    non-decreasing across iterations (asserted in debug runs).
    """
    if not beta > 0:
        raise ContractViolation("beta must be positive")
    ps = problem.state_dist.probs
    u = problem.utility

    if math.isinf(beta):
        post = _hard_rows(u)
        prior = ps @ post
        obj = objective_single(problem, post, prior, beta)
        return SingleSolution(post, Categorical(prior), obj, 0, True, np.array([obj]))

    post = _perturbed_uniform(u.shape, RngStream(seed, (90, 0)))
    prior = ps @ post
    history: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        log_post = floored_log(prior)[None, :] + beta * u
        new_post = _rows_from_log(log_post)
        new_prior = ps @ new_post
        delta = max(float(np.max(np.abs(new_post - post))),
                    float(np.max(np.abs(new_prior - prior))))
        post, prior = new_post, new_prior
        history.append(objective_single(problem, post, prior, beta))
        if __debug__ and len(history) > 1:
            assert history[-1] >= history[-2] - 1e-12, "objective decreased"
        if delta < tol:
            converged = True
            break
    obj = history[-1]
    return SingleSolution(post, Categorical(prior), obj, it, converged, np.asarray(history))


def _conditional_mi_nats(ps: np.ndarray, selector: np.ndarray,
                         experts: np.ndarray, expert_priors: np.ndarray) -> float:
    """sum_{s,x} p(s,x)·KL(p(a|s,x) || p(a|x)) in nats."""
    joint_sx = ps[:, None] * selector            # (S, X)
    total = 0.0
    for x in range(experts.shape[0]):
        total += _expected_kl(experts[x], expert_priors[x][None, :], joint_sx[:, x])
    return total


def objective_hier(problem: DiscreteProblem, selector: np.ndarray, experts: np.ndarray,
                   selector_prior: np.ndarray, expert_priors: np.ndarray,
                   beta1: float, beta2: float) -> float:
    """Two-stage objective E[U] - (1/β1)·KL_sel - (1/β2)·KL_exp.

    With the priors set to the induced marginals the two KL terms are exactly
    I(S;X) and I(S;A|X), so this evaluates the mutual-information objective;
    with arbitrary priors it is the corresponding Lagrangian.  Pure function,
    used by the oracle comparisons.
    """
    ps = problem.state_dist.probs
    u = problem.utility
    sel = np.asarray(selector, dtype=float)
    exp_post = np.asarray(experts, dtype=float)
    if sel.shape != (problem.n_states, exp_post.shape[0]):
        raise ContractViolation("selector shape inconsistent with problem")
    if exp_post.shape[1:] != (problem.n_states, problem.n_actions):
        raise ContractViolation("experts shape inconsistent with problem")

    eu = 0.0
    for x in range(exp_post.shape[0]):
        eu += float(np.sum(ps * sel[:, x] * (exp_post[x] * u).sum(axis=1)))
    val = eu
    if not math.isinf(beta1):
        val -= _expected_kl(sel, np.asarray(selector_prior)[None, :], ps) / beta1
    if not math.isinf(beta2):
        val -= _conditional_mi_nats(ps, sel, exp_post, np.asarray(expert_priors)) / beta2
    return val


def hier_information_bits(problem: DiscreteProblem, sol: HierSolution) -> tuple[float, float]:
    """(I(S;X), I(S;A|X)) of a solution, in bits, from the induced marginals."""
    ps = problem.state_dist.probs
    mi_sx = _expected_kl(sol.selector, sol.selector_prior.probs[None, :], ps) / LN2
    mi_sa = _conditional_mi_nats(ps, sol.selector, sol.experts, sol.expert_priors) / LN2
    return mi_sx, mi_sa


def _free_energy_table(u: np.ndarray, experts: np.ndarray,
                       expert_priors: np.ndarray, beta2: float) -> np.ndarray:
    """F(s,x) = E_{p(a|s,x)}[U(s,a)] - (1/β2)·KL(p(a|s,x) || p(a|x))."""
    n_experts = experts.shape[0]
    f = np.empty((u.shape[0], n_experts))
    for x in range(n_experts):
        eu = (experts[x] * u).sum(axis=1)
        if math.isinf(beta2):
            f[:, x] = eu
        else:
            terms = experts[x] * (floored_log(experts[x]) - floored_log(expert_priors[x])[None, :])
            terms[experts[x] <= 0.0] = 0.0
            f[:, x] = eu - terms.sum(axis=1) / beta2
    return f


def solve_hier(problem: DiscreteProblem, beta1: float, beta2: float,
               tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
               seed: int = 0, init: str | HierSolution = "perturbed") -> HierSolution:
    """Fixed point of the two-stage hierarchy via the coupled update cycle.

    One iteration updates, in order: selector posterior, selector prior,
    expert posteriors, expert priors.  `init` may be "perturbed" (default),
    "uniform" (the symmetric trap, kept for diagnosis), or a previous
    HierSolution to warm-start from.  A solution whose experts never
    differentiated is flagged degenerate.
    """
    if not (beta1 > 0 and beta2 > 0):
        raise ContractViolation("beta1 and beta2 must be positive")
    n_s, n_a, n_x = problem.n_states, problem.n_actions, problem.n_experts
    ps = problem.state_dist.probs
    u = problem.utility

    if isinstance(init, HierSolution):
        sel = init.selector.copy()
        sel_prior = init.selector_prior.probs.copy()
        experts = init.experts.copy()
        expert_priors = init.expert_priors.copy()
    elif init == "uniform":
        sel = np.full((n_s, n_x), 1.0 / n_x)
        experts = np.full((n_x, n_s, n_a), 1.0 / n_a)
        sel_prior = ps @ sel
        expert_priors = np.full((n_x, n_a), 1.0 / n_a)
    elif init == "perturbed":
        rng = RngStream(seed, (91, 0))
        sel = _perturbed_uniform((n_s, n_x), rng)
        experts = _perturbed_uniform((n_x, n_s, n_a), rng)
        sel_prior = ps @ sel
        expert_priors = np.einsum("s,sx,xsa->xa", ps, sel, experts)
        expert_priors /= expert_priors.sum(axis=1, keepdims=True)
    else:
        raise ContractViolation(f"unknown init {init!r}")

    history: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        f = _free_energy_table(u, experts, expert_priors, beta2)
        if math.isinf(beta1):
            new_sel = _hard_rows(f)
        else:
            new_sel = _rows_from_log(floored_log(sel_prior)[None, :] + beta1 * f)
        new_sel_prior = ps @ new_sel

        if math.isinf(beta2):
            new_experts = np.broadcast_to(_hard_rows(u), (n_x, n_s, n_a)).copy()
        else:
            log_e = floored_log(expert_priors)[:, None, :] + beta2 * u[None, :, :]
            new_experts = _rows_from_log(log_e)

        # p(a|x) = sum_s p(s|x) p(a|s,x); dead experts keep their prior.
        new_expert_priors = expert_priors.copy()
        joint_sx = ps[:, None] * new_sel
        for x in range(n_x):
            mass = float(joint_sx[:, x].sum())
            if mass > _DEAD_MASS:
                new_expert_priors[x] = (joint_sx[:, x] / mass) @ new_experts[x]

        delta = max(
            float(np.max(np.abs(new_sel - sel))),
            float(np.max(np.abs(new_sel_prior - sel_prior))),
            float(np.max(np.abs(new_experts - experts))),
            float(np.max(np.abs(new_expert_priors - expert_priors))),
        )
        sel, sel_prior = new_sel, new_sel_prior
        experts, expert_priors = new_experts, new_expert_priors
        history.append(objective_hier(problem, sel, experts, sel_prior, expert_priors,
                                      beta1, beta2))
        if delta < tol:
            converged = True
            break

    degenerate = False
    if n_x > 1:
        spread = max(
            float(np.max(np.abs(experts[x] - experts[y])))
            for x in range(n_x) for y in range(x + 1, n_x)
        )
        degenerate = spread < 1e-6

    f = _free_energy_table(u, experts, expert_priors, beta2)
    return HierSolution(
        selector=sel,
        selector_prior=Categorical(sel_prior),
        experts=experts,
        expert_priors=expert_priors,
        free_energy=f,
        objective_value=history[-1],
        iterations_used=it,
        converged=converged,
        degenerate=degenerate,
        objective_history=np.asarray(history),
    )


@dataclass(frozen=True)
class SweepPoint:
    beta1: float
    beta2: float
    expected_utility: float
    mi_sx_bits: float
    mi_sa_given_x_bits: float
    converged: bool


SWEEP_CSV_HEADER = "beta1,beta2,expected_utility,mi_sx_bits,mi_sa_given_x_bits,converged"


def beta_sweep(problem: DiscreteProblem, grid: list[tuple[float, float]],
               tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
               seed: int = 0, warm_start: bool = True) -> list[SweepPoint]:
    """One converged two-stage solution per (β1, β2) grid point.

    Each point warm-starts from the previous solution, tracing a
    rate-utility curve suitable for CSV export.
    """
    points: list[SweepPoint] = []
    prev: HierSolution | None = None
    for beta1, beta2 in grid:
        init = prev if (warm_start and prev is not None) else "perturbed"
        sol = solve_hier(problem, beta1, beta2, tol=tol, max_iter=max_iter,
                         seed=seed, init=init)
        ps = problem.state_dist.probs
        eu = 0.0
        for x in range(problem.n_experts):
            eu += float(np.sum(ps * sol.selector[:, x] * (sol.experts[x] * problem.utility).sum(axis=1)))
        mi_sx, mi_sa = hier_information_bits(problem, sol)
        points.append(SweepPoint(beta1, beta2, eu, mi_sx, mi_sa, sol.converged))
        prev = sol
    return points


def sweep_csv_rows(points: list[SweepPoint]) -> list[str]:
    rows = [SWEEP_CSV_HEADER]
    for p in points:
        rows.append(f"{p.beta1!r},{p.beta2!r},{p.expected_utility!r},"
                    f"{p.mi_sx_bits!r},{p.mi_sa_given_x_bits!r},{str(p.converged).lower()}")
    return rows
