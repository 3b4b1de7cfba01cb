"""On-line specialization of hierarchical policies.

Training alternates two phases over outer iterations: the selector network
π_θ(x|s) is improved while the experts rest, and vice versa.  Each iteration
collects N trajectories, computes rewards-to-go R_t and free-energies-to-go
F_t, fits twin critics by regression, applies score-function gradients
weighted by one-step advantages, and tracks the priors π(x) and π(a|x) as
exponential running means of the posteriors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .distributions import (LN2, VARIANCE_FLOOR, Categorical, DiagonalGaussian,
                            RngStream, floored_log)
from .errors import ContractViolation, NumericFault
from .nets import (GaussianHead, INIT_LOG_STD, LinearPolicySpec, MlpSpec,
                   OptimizerState, ParamVector, backward, categorical_logprob_grad,
                   forward, gaussian_logprob_grad, init_params, log_softmax,
                   make_optimizer, optimizer_step, softmax)

# RngStream child codes, one namespace per consumer of randomness.
RNG_INIT = 0
RNG_ENV = 1
RNG_POLICY = 2
RNG_EVAL_ENV = 3
RNG_EVAL_POLICY = 4


@dataclass
class SHSConfig:
    """Hyperparameters of the on-line hierarchy.

    `beta1`/`beta2` may be math.inf, which disables the corresponding KL
    term exactly.  `episodes` counts outer iterations; each collects
    `trajectories_per_update` rollouts of at most `horizon` steps.
    """

    n_experts: int
    beta1: float = math.inf
    beta2: float = 5.0
    gamma: float = 0.99
    lambda1: float = 0.99       # expert prior momentum
    lambda2: float = 0.99       # selector prior momentum
    lr_selector: float = 3e-4
    lr_experts: float = 1e-3
    lr_critics: float = 3e-4
    episodes: int = 1000
    trajectories_per_update: int = 4
    horizon: int = 1000
    phase_length: int = 1
    seed: int = 0
    advantage_source: str = "free_energy"   # or "reward": the literal pairing
    selector_hidden: tuple[int, ...] = (64, 64)
    critic_hidden: tuple[int, ...] = (64, 64)
    critic_epochs: int = 5
    normalize_advantages: bool = True
    init_log_std: float = INIT_LOG_STD
    expert_init_scale: float = 1.0  # widens the initial expert diversity

    def __post_init__(self):
        if self.n_experts < 1:
            raise ContractViolation("n_experts must be >= 1")
        if not (self.beta1 > 0 and self.beta2 > 0):
            raise ContractViolation("beta1 and beta2 must be positive (inf allowed)")
        if not 0.0 < self.gamma <= 1.0:
            raise ContractViolation("gamma must be in (0, 1]")
        if not (0.0 <= self.lambda1 < 1.0 and 0.0 <= self.lambda2 < 1.0):
            raise ContractViolation("lambda1 and lambda2 must be in [0, 1)")
        if self.phase_length < 1:
            raise ContractViolation("phase_length must be >= 1")
        if self.advantage_source not in ("free_energy", "reward"):
            raise ContractViolation("advantage_source must be free_energy or reward")
        self.selector_hidden = tuple(self.selector_hidden)
        self.critic_hidden = tuple(self.critic_hidden)


@dataclass
class Transition:
    state: np.ndarray
    expert: int
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminal: bool
    logp_selector: float
    logp_expert: float
    logp_expert_prior: float
    logp_selector_prior: float


@dataclass
class Trajectory:
    transitions: list[Transition] = field(default_factory=list)
    rewards_to_go: np.ndarray | None = None
    free_energies_to_go: np.ndarray | None = None
    adv_selector: np.ndarray | None = None
    adv_expert: np.ndarray | None = None
    free_energy_terms: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.transitions)

    def states(self) -> np.ndarray:
        return np.stack([t.state for t in self.transitions])

    def next_states(self) -> np.ndarray:
        return np.stack([t.next_state for t in self.transitions])

    def actions(self) -> np.ndarray:
        return np.stack([t.action for t in self.transitions])

    def experts(self) -> np.ndarray:
        return np.array([t.expert for t in self.transitions], dtype=int)

    def rewards(self) -> np.ndarray:
        return np.array([t.reward for t in self.transitions])


@dataclass
class PriorState:
    """EMA priors over experts and over each expert's actions."""
    selector_prior: Categorical
    expert_priors: list  # DiagonalGaussian or Categorical, matching head type


@dataclass
class TargetNorm:
    """Running mean/std of regression targets.

    Critics regress in the normalized space and are denormalized on read,
    so value targets of any magnitude stay within one Adam step's reach.
    """
    momentum: float = 0.99
    initialized: bool = False
    mean: float = 0.0
    std: float = 1.0

    def update(self, batch: np.ndarray) -> None:
        m = float(batch.mean())
        s = max(float(batch.std()), 1e-6)
        if not self.initialized:
            self.mean, self.std, self.initialized = m, s, True
        else:
            self.mean = self.momentum * self.mean + (1.0 - self.momentum) * m
            self.std = self.momentum * self.std + (1.0 - self.momentum) * s

    def normalize(self, y: np.ndarray) -> np.ndarray:
        return (y - self.mean) / self.std

    def denormalize(self, y: np.ndarray) -> np.ndarray:
        return y * self.std + self.mean


@dataclass
class SHSState:
    config: SHSConfig
    selector_spec: MlpSpec
    selector_params: ParamVector
    expert_spec: LinearPolicySpec
    expert_params: list[ParamVector]
    reward_critic_spec: MlpSpec
    reward_critic_params: ParamVector
    fe_critic_spec: MlpSpec
    fe_critic_params: ParamVector
    priors: PriorState
    opt_selector: OptimizerState
    opt_experts: list[OptimizerState]
    opt_reward_critic: OptimizerState
    opt_fe_critic: OptimizerState
    reward_norm: TargetNorm = field(default_factory=TargetNorm)
    fe_norm: TargetNorm = field(default_factory=TargetNorm)
    phase: str = "selector"
    iteration: int = 0

    def value_reward(self, states: np.ndarray) -> np.ndarray:
        out, _ = forward(self.reward_critic_spec, self.reward_critic_params,
                         np.atleast_2d(states))
        return self.reward_norm.denormalize(out[:, 0])

    def value_free_energy(self, states: np.ndarray) -> np.ndarray:
        out, _ = forward(self.fe_critic_spec, self.fe_critic_params,
                         np.atleast_2d(states))
        return self.fe_norm.denormalize(out[:, 0])


@dataclass
class MetricsRow:
    iteration: int
    mean_reward: float
    mean_free_energy: float
    mi_sx_bits: float
    selector_kl_nats: float
    expert_kl_nats: float
    entropy_selector_nats: float
    usage: tuple[float, ...]


def metrics_header(n_experts: int) -> str:
    usage = ",".join(f"usage_x{i}" for i in range(n_experts))
    return ("iter,mean_reward,mean_free_energy,mi_sx_bits,selector_kl_nats,"
            f"expert_kl_nats,entropy_selector_nats,{usage}")


def metrics_csv_row(row: MetricsRow) -> str:
    vals = [str(row.iteration), repr(row.mean_reward), repr(row.mean_free_energy),
            repr(row.mi_sx_bits), repr(row.selector_kl_nats), repr(row.expert_kl_nats),
            repr(row.entropy_selector_nats)] + [repr(u) for u in row.usage]
    return ",".join(vals)


def init_state(config: SHSConfig, state_dim: int, action_dim: int) -> SHSState:
    root = RngStream(config.seed)
    selector_spec = MlpSpec(state_dim, config.n_experts, config.selector_hidden)
    expert_spec = LinearPolicySpec(state_dim, GaussianHead(action_dim))
    critic_spec = MlpSpec(state_dim, 1, config.critic_hidden)

    selector_params = init_params(selector_spec, root.child(RNG_INIT, 0))
    expert_params = []
    for x in range(config.n_experts):
        p = init_params(expert_spec, root.child(RNG_INIT, 1 + x),
                        init_log_std=config.init_log_std)
        if config.expert_init_scale != 1.0:
            p.view("W")[:] *= config.expert_init_scale
        expert_params.append(p)
    rc_params = init_params(critic_spec, root.child(RNG_INIT, 1 + config.n_experts))
    fc_params = init_params(critic_spec, root.child(RNG_INIT, 2 + config.n_experts))

    init_var = max(math.exp(2.0 * config.init_log_std), VARIANCE_FLOOR)
    priors = PriorState(
        selector_prior=Categorical.uniform(config.n_experts),
        expert_priors=[DiagonalGaussian(np.zeros(action_dim), np.full(action_dim, init_var))
                       for _ in range(config.n_experts)],
    )
    return SHSState(
        config=config,
        selector_spec=selector_spec,
        selector_params=selector_params,
        expert_spec=expert_spec,
        expert_params=expert_params,
        reward_critic_spec=critic_spec,
        reward_critic_params=rc_params,
        fe_critic_spec=critic_spec,
        fe_critic_params=fc_params,
        priors=priors,
        opt_selector=make_optimizer(selector_params, "adam", config.lr_selector),
        opt_experts=[make_optimizer(p, "adam", config.lr_experts) for p in expert_params],
        opt_reward_critic=make_optimizer(rc_params, "adam", config.lr_critics),
        opt_fe_critic=make_optimizer(fc_params, "adam", config.lr_critics),
    )


def act(state: np.ndarray, shs: SHSState, rng: RngStream):
    """Sample x ~ π_θ(·|s) then a ~ π_ϑ(·|s,x).

    Returns (expert, action, logp_selector, logp_expert, logp_expert_prior,
    logp_selector_prior), the log-densities taken under the posteriors and
    the current priors.
    """
    logits, _ = forward(shs.selector_spec, shs.selector_params, state, need_cache=False)
    if not np.all(np.isfinite(logits)):
        raise NumericFault("non-finite selector output")
    ls = log_softmax(logits)
    x = int(rng.gen.choice(logits.size, p=np.exp(ls)))
    logp_sel = float(ls[x])
    logp_sel_prior = shs.priors.selector_prior.log_prob(x)

    (mean, log_std), _ = forward(shs.expert_spec, shs.expert_params[x], state,
                                 need_cache=False)
    if not np.all(np.isfinite(mean)):
        raise NumericFault("non-finite expert output")
    var = np.maximum(np.exp(2.0 * log_std), VARIANCE_FLOOR)
    a = mean + np.sqrt(var) * rng.gen.standard_normal(mean.size)
    d = a - mean
    logp_exp = float(-0.5 * np.sum(d * d / var + np.log(2.0 * np.pi * var)))
    logp_exp_prior = shs.priors.expert_priors[x].log_prob(a)
    return x, a, logp_sel, logp_exp, logp_exp_prior, logp_sel_prior


def free_energy_term(transition: Transition, beta2: float) -> float:
    """f(s,x,a) = r - (1/β2)·log π_ϑ(a|s,x)/π(a|x); β2 = inf gives r."""
    if math.isinf(beta2):
        return transition.reward
    return transition.reward - (transition.logp_expert - transition.logp_expert_prior) / beta2


def collect_trajectory(env, shs: SHSState, env_rng: RngStream, policy_rng: RngStream,
                       horizon: int) -> Trajectory:
    traj = Trajectory()
    state = env.reset(env_rng)
    for _ in range(horizon):
        x, a, lp_s, lp_e, lp_ep, lp_sp = act(state, shs, policy_rng)
        next_state, reward, terminal = env.step(a)
        traj.transitions.append(Transition(
            state=np.asarray(state, dtype=float),
            expert=x,
            action=np.asarray(a, dtype=float),
            reward=float(reward),
            next_state=np.asarray(next_state, dtype=float),
            terminal=bool(terminal),
            logp_selector=lp_s,
            logp_expert=lp_e,
            logp_expert_prior=lp_ep,
            logp_selector_prior=lp_sp,
        ))
        state = next_state
        if terminal:
            break
    return traj


def discounted_to_go(values: np.ndarray, gamma: float) -> np.ndarray:
    """Backward recursion G_t = v_t + γ·G_{t+1}, with G beyond the end = 0."""
    out = np.empty_like(values, dtype=float)
    acc = 0.0
    for t in range(len(values) - 1, -1, -1):
        acc = values[t] + gamma * acc
        out[t] = acc
    return out


def returns_and_advantages(traj: Trajectory, value_reward, value_free_energy,
                           gamma: float, beta2: float,
                           advantage_source: str = "free_energy") -> Trajectory:
    """Fill R_t, F_t and both one-step advantages in place.

    `value_reward` / `value_free_energy` are callables mapping a batch of
    states to critic values.  The bootstrap value of the state after the
    last transition is zero on terminal trajectories, otherwise taken from
    the critic.  The default pairing drives both advantages from f and the
    free-energy critic; `advantage_source="reward"` uses the reward critic
    and raw rewards for the selector instead.
    """
    if not traj.transitions:
        raise ContractViolation("trajectory is empty")
    r = traj.rewards()
    f = np.array([free_energy_term(t, beta2) for t in traj.transitions])
    traj.free_energy_terms = f
    traj.rewards_to_go = discounted_to_go(r, gamma)
    traj.free_energies_to_go = discounted_to_go(f, gamma)

    states = traj.states()
    last = traj.transitions[-1]

    def one_step(values_fn, signal):
        v = np.asarray(values_fn(states), dtype=float).reshape(-1)
        v_last = 0.0 if last.terminal else float(np.asarray(
            values_fn(last.next_state[None, :]), dtype=float).reshape(-1)[0])
        v_next = np.append(v[1:], v_last)
        return signal + gamma * v_next - v

    adv_f = one_step(value_free_energy, f)
    if advantage_source == "free_energy":
        traj.adv_selector = adv_f
        traj.adv_expert = adv_f.copy()
    else:
        traj.adv_selector = one_step(value_reward, r)
        traj.adv_expert = adv_f
    return traj


def _normalized(w: np.ndarray, enabled: bool) -> np.ndarray:
    if not enabled or w.size < 2:
        return w
    std = float(w.std())
    return (w - w.mean()) / (std if std > 1e-8 else 1.0)


def selector_update(trajectories: list[Trajectory], shs: SHSState) -> ParamVector:
    """Ascend the score-function estimate of the selection objective.

    The weight on each score term is the (normalized) selector advantage
    minus (1/β1)·log π_θ(x|s)/π(x); β1 = inf drops the correction.
    Returns the applied gradient.
    """
    if not trajectories:
        raise ContractViolation("empty batch")
    cfg = shs.config
    states = np.concatenate([t.states() for t in trajectories])
    experts = np.concatenate([t.experts() for t in trajectories])
    adv = np.concatenate([t.adv_selector for t in trajectories])
    w = _normalized(adv, cfg.normalize_advantages)
    if not math.isinf(cfg.beta1):
        lp = np.concatenate([[tr.logp_selector for tr in t.transitions] for t in trajectories])
        lp_prior = np.concatenate([[tr.logp_selector_prior for tr in t.transitions]
                                   for t in trajectories])
        w = w - (lp - lp_prior) / cfg.beta1

    logits, cache = forward(shs.selector_spec, shs.selector_params, states)
    _, dlogits = categorical_logprob_grad(logits, experts)
    upstream = dlogits * (w / len(trajectories))[:, None]
    grad = backward(cache, upstream)
    optimizer_step(shs.opt_selector, shs.selector_params, grad, "ascend")
    return grad


def expert_update(trajectories: list[Trajectory], shs: SHSState) -> dict[int, ParamVector]:
    """Ascend each expert's score-function gradient on its own transitions.

    Experts never share gradient signal; an expert with no assigned
    transitions in the batch is skipped.  Returns the applied gradients.
    """
    if not trajectories:
        raise ContractViolation("empty batch")
    cfg = shs.config
    states = np.concatenate([t.states() for t in trajectories])
    actions = np.concatenate([t.actions() for t in trajectories])
    experts = np.concatenate([t.experts() for t in trajectories])
    adv = _normalized(np.concatenate([t.adv_expert for t in trajectories]),
                      cfg.normalize_advantages)
    applied: dict[int, ParamVector] = {}
    for x in range(cfg.n_experts):
        mask = experts == x
        if not np.any(mask):
            continue
        (mean, log_std), cache = forward(shs.expert_spec, shs.expert_params[x], states[mask])
        _, d_mean, d_log_std = gaussian_logprob_grad(mean, log_std, actions[mask])
        scale = (adv[mask] / len(trajectories))[:, None]
        grad = backward(cache, (d_mean * scale, d_log_std * scale))
        optimizer_step(shs.opt_experts[x], shs.expert_params[x], grad, "ascend")
        applied[x] = grad
    return applied


def critic_update(trajectories: list[Trajectory], shs: SHSState,
                  target: str = "rewards_to_go") -> float:
    """Gradient-descent epochs on the MSE between a critic and its targets.

    `target` selects rewards-to-go (reward critic) or free-energies-to-go
    (free-energy critic).  Returns the mean-squared error after the last
    epoch's step.
    """
    if target == "rewards_to_go":
        spec, params, opt = shs.reward_critic_spec, shs.reward_critic_params, shs.opt_reward_critic
        norm = shs.reward_norm
        y = np.concatenate([t.rewards_to_go for t in trajectories])
    elif target == "free_energies_to_go":
        spec, params, opt = shs.fe_critic_spec, shs.fe_critic_params, shs.opt_fe_critic
        norm = shs.fe_norm
        y = np.concatenate([t.free_energies_to_go for t in trajectories])
    else:
        raise ContractViolation(f"unknown critic target {target!r}")
    states = np.concatenate([t.states() for t in trajectories])
    norm.update(y)
    y_n = norm.normalize(y)
    mse = math.nan
    for _ in range(shs.config.critic_epochs):
        out, cache = forward(spec, params, states)
        resid = out[:, 0] - y_n
        mse = float(np.mean(resid * resid))
        if mse == 0.0:
            break
        upstream = (2.0 / resid.size) * resid[:, None]
        grad = backward(cache, upstream)
        optimizer_step(opt, params, grad, "descend")
    return mse


def ema_categorical(prior: Categorical, batch_mean: np.ndarray, lam: float) -> Categorical:
    mixed = lam * prior.probs + (1.0 - lam) * np.asarray(batch_mean, dtype=float)
    return Categorical.from_weights(np.maximum(mixed, 0.0))


def ema_gaussian(prior: DiagonalGaussian, mean: np.ndarray, var: np.ndarray,
                 lam: float) -> DiagonalGaussian:
    new_mean = lam * prior.mean + (1.0 - lam) * mean
    new_var = lam * prior.variance + (1.0 - lam) * np.maximum(var, VARIANCE_FLOOR)
    return DiagonalGaussian(new_mean, new_var)


def prior_update(shs: SHSState, trajectories: list[Trajectory]) -> PriorState:
    """Exponential running means of the posteriors.

    The selector prior mixes toward the batch mean of π_θ(·|s) over visited
    states; each Gaussian expert prior mixes toward the moment-matched
    (mean, variance) of that expert's posterior over the states where it
    acted.  Experts unused in the batch are left untouched.
    """
    if not trajectories:
        raise ContractViolation("empty batch")
    cfg = shs.config
    states = np.concatenate([t.states() for t in trajectories])
    experts = np.concatenate([t.experts() for t in trajectories])

    logits, _ = forward(shs.selector_spec, shs.selector_params, states)
    shs.priors.selector_prior = ema_categorical(
        shs.priors.selector_prior, softmax(logits).mean(axis=0), cfg.lambda2)

    for x in range(cfg.n_experts):
        mask = experts == x
        if not np.any(mask):
            continue
        (mean, log_std), _ = forward(shs.expert_spec, shs.expert_params[x], states[mask])
        var = np.maximum(np.exp(2.0 * log_std), VARIANCE_FLOOR)
        m_hat = mean.mean(axis=0)
        v_hat = (var + mean * mean).mean(axis=0) - m_hat * m_hat
        shs.priors.expert_priors[x] = ema_gaussian(
            shs.priors.expert_priors[x], m_hat, v_hat, cfg.lambda1)
    return shs.priors


def _phase_for(iteration: int, phase_length: int) -> str:
    return "selector" if (iteration // phase_length) % 2 == 0 else "expert"


def compute_metrics(shs: SHSState, trajectories: list[Trajectory], iteration: int) -> MetricsRow:
    cfg = shs.config
    states = np.concatenate([t.states() for t in trajectories])
    experts = np.concatenate([t.experts() for t in trajectories])

    logits, _ = forward(shs.selector_spec, shs.selector_params, states)
    probs = softmax(np.atleast_2d(logits))
    prior = shs.priors.selector_prior.probs
    log_ratio = floored_log(probs) - floored_log(prior)[None, :]
    kl_rows = np.sum(probs * log_ratio, axis=1)
    ent_rows = -np.sum(probs * floored_log(probs), axis=1)

    expert_kls = []
    for x in range(cfg.n_experts):
        mask = experts == x
        if not np.any(mask):
            continue
        (mean, log_std), _ = forward(shs.expert_spec, shs.expert_params[x], states[mask])
        var = np.maximum(np.exp(2.0 * log_std), VARIANCE_FLOOR)
        q = shs.priors.expert_priors[x]
        ratio = var / q.variance[None, :]
        dm = q.mean[None, :] - mean
        kl = 0.5 * np.sum(ratio + dm * dm / q.variance[None, :] - 1.0 - np.log(ratio), axis=1)
        expert_kls.append(kl)
    expert_kl = float(np.mean(np.concatenate(expert_kls))) if expert_kls else 0.0

    sel_kl = float(kl_rows.mean())
    return MetricsRow(
        iteration=iteration,
        mean_reward=float(np.mean([t.rewards().sum() for t in trajectories])),
        mean_free_energy=float(np.mean([t.free_energy_terms.sum() for t in trajectories])),
        mi_sx_bits=sel_kl / LN2,
        selector_kl_nats=sel_kl,
        expert_kl_nats=expert_kl,
        entropy_selector_nats=float(ent_rows.mean()),
        usage=tuple(float(u) for u in prior),
    )


def train(config: SHSConfig, env, on_iteration=None, initial_state: SHSState | None = None,
          start_iteration: int = 0) -> tuple[SHSState, list[MetricsRow]]:
    """Run the full on-line loop for `config.episodes` outer iterations.

    A fixed seed makes the metrics stream a pure function of the config:
    every source of randomness is a child stream keyed by (seed, iteration,
    rollout).  `initial_state`/`start_iteration` allow checkpoint resume;
    the continuation is identical to an uninterrupted run.
    """
    shs = initial_state if initial_state is not None else init_state(
        config, env.state_dim, env.action_dim)
    root = RngStream(config.seed)
    rows: list[MetricsRow] = []

    for it in range(start_iteration, config.episodes):
        trajectories = []
        for j in range(config.trajectories_per_update):
            traj = collect_trajectory(
                env, shs,
                env_rng=root.child(RNG_ENV, it, j),
                policy_rng=root.child(RNG_POLICY, it, j),
                horizon=config.horizon,
            )
            trajectories.append(traj)
        for traj in trajectories:
            returns_and_advantages(
                traj, shs.value_reward, shs.value_free_energy,
                config.gamma, config.beta2, config.advantage_source,
            )
        shs.phase = _phase_for(it, config.phase_length)
        if shs.phase == "selector":
            selector_update(trajectories, shs)
        else:
            expert_update(trajectories, shs)
        critic_update(trajectories, shs, "rewards_to_go")
        critic_update(trajectories, shs, "free_energies_to_go")
        prior_update(shs, trajectories)

        row = compute_metrics(shs, trajectories, it)
        rows.append(row)
        shs.iteration = it + 1
        if on_iteration is not None:
            on_iteration(row)
    return shs, rows


def make_policy(shs: SHSState):
    """Wrap a trained state as a sampling policy handle for evaluation."""
    def policy(state, rng: RngStream):
        _, a, *_ = act(np.asarray(state, dtype=float), shs, rng)
        return a
    return policy


def selector_probs(shs: SHSState, states: np.ndarray) -> np.ndarray:
    logits, _ = forward(shs.selector_spec, shs.selector_params, np.atleast_2d(states))
    return softmax(logits)


def mixture_action_mean(shs: SHSState, states: np.ndarray) -> np.ndarray:
    """E[a|s] under the mixture-of-experts policy, batched."""
    states = np.atleast_2d(states)
    probs = selector_probs(shs, states)
    total = np.zeros((states.shape[0], shs.expert_spec.head.action_dim))
    for x in range(shs.config.n_experts):
        (mean, _), _ = forward(shs.expert_spec, shs.expert_params[x], states)
        total += probs[:, x:x + 1] * mean
    return total
