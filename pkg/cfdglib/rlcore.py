# -*- coding: utf-8 -*-
"""
Base offline-to-online learner.

Critic TD learning with a per-sample gated CQL regularizer, expectile value
learning, advantage-weighted policy extraction and Polyak target tracking.
Batches carry a SourceTag per row; the tag selects whether the conservative
term applies to that row.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from cfdglib.envsuite import EnvSpec, TransitionBatch, rollout
from cfdglib.lab_def import ConfigError, InvalidInputError, SourceTag
from cfdglib.numkernel import (AdamState, MlpParams, adam_step, build_mlp, mlp_backward,
                               mlp_forward, mlp_forward_cached)

logger = logging.getLogger('CFDGLab.rlcore')

AWR_WEIGHT_MAX = 100.0
_LOG_AWR_WEIGHT_MAX = math.log(AWR_WEIGHT_MAX)

# lambda per SourceTag: online-labelled data is not regularized
_LAMBDA_BY_TAG = np.array([0.0, 1.0, 0.0, 1.0])


@dataclass(frozen=True)
class AgentConfig:
    gamma: float = 0.95
    tau_expectile: float = 0.7
    awr_beta: float = 3.0
    polyak_rho: float = 0.005
    lambda_cql_weight: float = 1.0
    lr_q: float = 3e-4
    lr_v: float = 3e-4
    lr_pi: float = 3e-4
    hidden_width: int = 64
    hidden_depth: int = 3
    n_policy_actions: int = 4
    cql_noise: float = 0.2
    explore_noise: float = 0.1

    def __post_init__(self):
        checks = [
            ('gamma', 0.0 < self.gamma < 1.0, '(0, 1)'),
            ('tau_expectile', 0.0 < self.tau_expectile < 1.0, '(0, 1)'),
            ('awr_beta', self.awr_beta > 0.0, '> 0'),
            ('polyak_rho', 0.0 < self.polyak_rho <= 1.0, '(0, 1]'),
            ('lambda_cql_weight', self.lambda_cql_weight >= 0.0, '>= 0'),
            ('lr_q', self.lr_q > 0.0, '> 0'),
            ('lr_v', self.lr_v > 0.0, '> 0'),
            ('lr_pi', self.lr_pi > 0.0, '> 0'),
            ('hidden_width', self.hidden_width >= 1, '>= 1'),
            ('hidden_depth', self.hidden_depth >= 1, '>= 1'),
            ('n_policy_actions', self.n_policy_actions >= 1, '>= 1'),
            ('cql_noise', self.cql_noise >= 0.0, '>= 0'),
            ('explore_noise', self.explore_noise >= 0.0, '>= 0'),
        ]
        for name, ok, expected in checks:
            if not ok:
                raise ConfigError(name, f"value {getattr(self, name)!r} not in {expected}")


@dataclass
class AgentParams:
    critic: MlpParams
    target_critic: MlpParams
    value: MlpParams
    policy: MlpParams

    def __post_init__(self):
        if [t.shape for t in self.critic.tensors()] != [t.shape for t in self.target_critic.tensors()]:
            raise InvalidInputError("critic and target critic shapes differ")

    def networks(self) -> Dict[str, MlpParams]:
        return {'critic': self.critic, 'target_critic': self.target_critic,
                'value': self.value, 'policy': self.policy}

    @classmethod
    def from_networks(cls, nets: Dict[str, MlpParams]) -> 'AgentParams':
        try:
            return cls(nets['critic'], nets['target_critic'], nets['value'], nets['policy'])
        except KeyError as e:
            raise InvalidInputError(f"checkpoint is missing network {e}")


@dataclass
class Agent:
    """Parameters plus the optimizer state of each trained network."""
    params: AgentParams
    opt_critic: AdamState
    opt_value: AdamState
    opt_policy: AdamState
    updates: int = 0

    @classmethod
    def fresh(cls, params: AgentParams) -> 'Agent':
        return cls(params, AdamState.for_params(params.critic), AdamState.for_params(params.value),
                   AdamState.for_params(params.policy))


def init_agent(state_dim: int, action_dim: int, config: AgentConfig, rng: np.random.Generator) -> Agent:
    w, d = config.hidden_width, config.hidden_depth
    critic = build_mlp(state_dim + action_dim, 1, w, d, rng)
    value = build_mlp(state_dim, 1, w, d, rng)
    policy = build_mlp(state_dim, action_dim, w, d, rng, final_scale=0.1)
    return Agent.fresh(AgentParams(critic, critic.copy(), value, policy))


def policy_action(policy: MlpParams, states: np.ndarray) -> np.ndarray:
    """Deterministic policy head, tanh-squashed into [-1, 1]."""
    return np.tanh(mlp_forward(policy, states))


def q_values(critic: MlpParams, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return mlp_forward(critic, np.concatenate([states, actions], axis=-1))[..., 0]


def _check_batch(batch: TransitionBatch, params: AgentParams):
    if len(batch) == 0:
        raise InvalidInputError("batch is empty")
    if batch.state_dim + batch.action_dim != params.critic.in_dim or batch.state_dim != params.policy.in_dim:
        raise InvalidInputError(
            f"batch dims ({batch.state_dim}, {batch.action_dim}) do not fit the agent networks")


def td_targets(batch: TransitionBatch, params: AgentParams, gamma: float) -> np.ndarray:
    """r + gamma * (1 - terminal) * Q_target(s', pi(s'))."""
    next_actions = policy_action(params.policy, batch.next_states)
    bootstrap = q_values(params.target_critic, batch.next_states, next_actions)
    return batch.rewards + gamma * (1.0 - batch.terminals) * bootstrap


def td_loss(batch: TransitionBatch, params: AgentParams, gamma: float) -> Tuple[float, MlpParams]:
    """
    Mean squared TD error; gradients flow only into the critic.

    Returns:
        Tuple of (loss, critic gradients)
    """
    _check_batch(batch, params)
    targets = td_targets(batch, params, gamma)
    q, cache = mlp_forward_cached(params.critic, np.concatenate([batch.states, batch.actions], axis=1))
    residual = targets - q[:, 0]
    n = len(batch)
    loss = float(np.mean(residual ** 2))
    grads, _ = mlp_backward(params.critic, cache, (-2.0 * residual / n)[:, None])
    return loss, grads


def sample_policy_actions(policy: MlpParams, states: np.ndarray, n_policy_actions: int, noise: float,
                          rng: np.random.Generator) -> np.ndarray:
    """
    Noisy policy actions for the conservative term, shape (n, n_policy_actions, action_dim).
    """
    if n_policy_actions < 1:
        raise InvalidInputError(f"n_policy_actions must be >= 1, got {n_policy_actions}")
    base = policy_action(policy, states)
    eps = rng.normal(0.0, noise, size=(base.shape[0], n_policy_actions, base.shape[1]))
    return np.clip(base[:, None, :] + eps, -1.0, 1.0)


def select_lambda(source: SourceTag) -> float:
    """CQL gate: 0 for online and synthetic-online data, 1 otherwise."""
    return float(_LAMBDA_BY_TAG[int(SourceTag(source))])


def lambdas_for_tags(tags: np.ndarray) -> np.ndarray:
    return _LAMBDA_BY_TAG[np.asarray(tags, dtype=np.int64)]


def _critic_inputs(batch: TransitionBatch, policy_actions: np.ndarray) -> np.ndarray:
    n, m, k = policy_actions.shape
    data_sa = np.concatenate([batch.states, batch.actions], axis=1)
    rep_states = np.repeat(batch.states, m, axis=0)
    pi_sa = np.concatenate([rep_states, policy_actions.reshape(n * m, k)], axis=1)
    return np.concatenate([data_sa, pi_sa], axis=0)


def cql_regularizer(batch: TransitionBatch, params: AgentParams, n_policy_actions: int = 4,
                    rng: Optional[np.random.Generator] = None, noise: float = 0.2,
                    policy_actions: Optional[np.ndarray] = None) -> Tuple[float, MlpParams]:
    """
    R = mean_i [ mean_j Q(s_i, a_ij) - Q(s_i, a_i) ] with a_ij policy actions.

    Args:
        batch: Transitions
        params: Agent parameters
        n_policy_actions: Policy actions per state
        rng: Generator for the action noise (unused when policy_actions is given)
        noise: Std of the Gaussian action noise
        policy_actions: Explicit (n, m, action_dim) actions instead of sampling

    Returns:
        Tuple of (R, critic gradients)
    """
    _check_batch(batch, params)
    if policy_actions is None:
        if rng is None:
            raise InvalidInputError("either rng or policy_actions is required")
        policy_actions = sample_policy_actions(params.policy, batch.states, n_policy_actions, noise, rng)
    n, m, _ = policy_actions.shape
    q, cache = mlp_forward_cached(params.critic, _critic_inputs(batch, policy_actions))
    q = q[:, 0]
    q_data, q_pi = q[:n], q[n:].reshape(n, m)
    value = float(np.mean(q_pi.mean(axis=1) - q_data))
    grad_out = np.concatenate([np.full(n, -1.0 / n), np.full(n * m, 1.0 / (n * m))])
    grads, _ = mlp_backward(params.critic, cache, grad_out[:, None])
    return value, grads


def critic_objective(batch: TransitionBatch, params: AgentParams, config: AgentConfig,
                     lambdas: np.ndarray, policy_actions: np.ndarray) -> Tuple[float, float, MlpParams]:
    """
    Composite critic loss 1/2 * TD + weight * mean_i(lambda_i * R_i).

    Returns:
        Tuple of (td loss, gated CQL term, critic gradients)
    """
    _check_batch(batch, params)
    n, m, _ = policy_actions.shape
    targets = td_targets(batch, params, config.gamma)
    q, cache = mlp_forward_cached(params.critic, _critic_inputs(batch, policy_actions))
    q = q[:, 0]
    q_data, q_pi = q[:n], q[n:].reshape(n, m)
    residual = targets - q_data
    td = float(np.mean(residual ** 2))
    per_sample = q_pi.mean(axis=1) - q_data
    gated = float(np.mean(lambdas * per_sample))

    c = config.lambda_cql_weight
    g_data = -residual / n - c * lambdas / n
    g_pi = np.repeat(c * lambdas / (n * m), m)
    grads, _ = mlp_backward(params.critic, cache, np.concatenate([g_data, g_pi])[:, None])
    return td, gated, grads


def expectile_loss(u, tau: float):
    """|tau - 1{u < 0}| * u^2, elementwise."""
    if not 0.0 < tau < 1.0:
        raise InvalidInputError(f"tau must be in (0, 1), got {tau}")
    u = np.asarray(u, dtype=np.float64)
    loss = np.abs(tau - (u < 0.0)) * u ** 2
    return float(loss) if loss.ndim == 0 else loss


def value_loss(batch: TransitionBatch, params: AgentParams, tau: float) -> Tuple[float, MlpParams]:
    """Expectile regression of V(s) towards Q_target(s, a)."""
    q_target = q_values(params.target_critic, batch.states, batch.actions)
    v, cache = mlp_forward_cached(params.value, batch.states)
    u = q_target - v[:, 0]
    n = len(batch)
    weight = np.abs(tau - (u < 0.0))
    loss = float(np.mean(weight * u ** 2))
    grads, _ = mlp_backward(params.value, cache, (-2.0 * weight * u / n)[:, None])
    return loss, grads


def awr_weights(batch: TransitionBatch, params: AgentParams, beta: float) -> np.ndarray:
    adv = q_values(params.target_critic, batch.states, batch.actions) - mlp_forward(params.value, batch.states)[:, 0]
    return np.minimum(np.exp(np.minimum(beta * adv, _LOG_AWR_WEIGHT_MAX)), AWR_WEIGHT_MAX)


def awr_policy_loss(batch: TransitionBatch, params: AgentParams, beta: float) -> Tuple[float, MlpParams]:
    """
    Advantage-weighted regression of the policy onto dataset actions.

    Returns:
        Tuple of (loss, policy gradients)
    """
    if not beta > 0:
        raise InvalidInputError(f"awr beta must be > 0, got {beta}")
    _check_batch(batch, params)
    weights = awr_weights(batch, params, beta)
    pre, cache = mlp_forward_cached(params.policy, batch.states)
    pi = np.tanh(pre)
    diff = pi - batch.actions
    n = len(batch)
    loss = float(np.mean(weights * np.sum(diff ** 2, axis=1)))
    grad_pi = 2.0 * weights[:, None] * diff / n
    grads, _ = mlp_backward(params.policy, cache, grad_pi * (1.0 - pi ** 2))
    return loss, grads


def polyak_update(target: MlpParams, online: MlpParams, rho: float) -> MlpParams:
    """target <- (1 - rho) * target + rho * online."""
    if not 0.0 < rho <= 1.0:
        raise InvalidInputError(f"rho must be in (0, 1], got {rho}")
    t_list, o_list = target.tensors(), online.tensors()
    if [t.shape for t in t_list] != [o.shape for o in o_list]:
        raise InvalidInputError("target and online network shapes differ")
    return target.replace_tensors([(1.0 - rho) * t + rho * o for t, o in zip(t_list, o_list)])


def train_step(agent: Agent, batch: TransitionBatch, config: AgentConfig,
               rng: np.random.Generator) -> Tuple[Agent, Dict[str, float]]:
    """
    One update of value, critic and policy followed by a Polyak step.

    Args:
        agent: Current agent
        batch: Tagged training batch
        config: Learner settings
        rng: Generator for the conservative term's action noise

    Returns:
        Tuple of (updated agent, diagnostics with loss_q, loss_v, loss_pi, cql)
    """
    params = agent.params
    _check_batch(batch, params)

    loss_v, grads_v = value_loss(batch, params, config.tau_expectile)
    value, opt_value = adam_step(params.value, grads_v, agent.opt_value, config.lr_v)
    params = AgentParams(params.critic, params.target_critic, value, params.policy)

    lambdas = lambdas_for_tags(batch.tags)
    policy_actions = sample_policy_actions(params.policy, batch.states, config.n_policy_actions,
                                           config.cql_noise, rng)
    td, gated, grads_q = critic_objective(batch, params, config, lambdas, policy_actions)
    critic, opt_critic = adam_step(params.critic, grads_q, agent.opt_critic, config.lr_q)
    params = AgentParams(critic, params.target_critic, params.value, params.policy)

    loss_pi, grads_pi = awr_policy_loss(batch, params, config.awr_beta)
    policy, opt_policy = adam_step(params.policy, grads_pi, agent.opt_policy, config.lr_pi)

    target = polyak_update(params.target_critic, critic, config.polyak_rho)
    new_params = AgentParams(critic, target, params.value, policy)
    diagnostics = {'loss_q': 0.5 * td + config.lambda_cql_weight * gated, 'loss_v': loss_v,
                   'loss_pi': loss_pi, 'cql': gated}
    return Agent(new_params, opt_critic, opt_value, opt_policy, agent.updates + 1), diagnostics


def act(policy: MlpParams, state: np.ndarray) -> np.ndarray:
    return policy_action(policy, np.asarray(state, dtype=np.float64))


def evaluate(spec: EnvSpec, policy: MlpParams, n_episodes: int, seed) -> float:
    """Mean return of the deterministic policy."""
    _, mean_return = rollout(spec, lambda s, _rng: act(policy, s), seed, n_episodes)
    return mean_return
