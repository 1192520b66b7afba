# -*- coding: utf-8 -*-
"""
Toy continuous-control environments and offline data collection.

Two environments are built in:

PointMass-2D
    Dense reward. next = clip(state + step_scale * action), reward is the
    negative distance to the goal.
FourRoom-2D
    Sparse reward. Unit square split into four rooms by walls at x = 0.5 and
    y = 0.5, each wall with two doorways. Reward 1 on reaching the goal.

Both terminate when the goal radius is reached or the horizon runs out.
"""
import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from cfdglib.lab_def import ConfigError, InvalidInputError, LabIOError, SourceTag

logger = logging.getLogger('CFDGLab.envsuite')

POINTMASS = 'PointMass-2D'
FOURROOM = 'FourRoom-2D'
ENV_NAMES = (POINTMASS, FOURROOM)

REFERENCE_SEED = 20240
REFERENCE_EPISODES = 20

# doorway intervals along each wall, in the coordinate running along the wall
DOORWAYS = ((0.2, 0.3), (0.7, 0.8))
WALL = 0.5


@dataclass(frozen=True)
class Transition:
    """One environment step."""
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminal: bool


@dataclass
class TransitionBatch:
    """
    Column-oriented batch of transitions with a source tag per row.
    """
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    tags: np.ndarray = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64).reshape(-1)
        self.next_states = np.asarray(self.next_states, dtype=np.float64)
        self.terminals = np.asarray(self.terminals, dtype=bool).reshape(-1)
        n = self.rewards.shape[0]
        if self.tags is None:
            self.tags = np.full(n, int(SourceTag.OFFLINE), dtype=np.int64)
        self.tags = np.asarray(self.tags, dtype=np.int64).reshape(-1)
        if self.states.ndim != 2 or self.actions.ndim != 2 or self.next_states.shape != self.states.shape:
            raise InvalidInputError("states/next_states must be (n, state_dim) and actions (n, action_dim)")
        if not (self.states.shape[0] == self.actions.shape[0] == n == self.terminals.shape[0] == self.tags.shape[0]):
            raise InvalidInputError("transition batch columns have different lengths")

    def __len__(self):
        return self.rewards.shape[0]

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    @classmethod
    def empty(cls, state_dim: int, action_dim: int) -> 'TransitionBatch':
        return cls(np.zeros((0, state_dim)), np.zeros((0, action_dim)), np.zeros(0),
                   np.zeros((0, state_dim)), np.zeros(0, dtype=bool), np.zeros(0, dtype=np.int64))

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition], tag: SourceTag = SourceTag.OFFLINE) -> 'TransitionBatch':
        if len(transitions) == 0:
            raise InvalidInputError("cannot build a batch from zero transitions without dimensions")
        return cls(np.stack([t.state for t in transitions]),
                   np.stack([t.action for t in transitions]),
                   np.array([t.reward for t in transitions]),
                   np.stack([t.next_state for t in transitions]),
                   np.array([t.terminal for t in transitions]),
                   np.full(len(transitions), int(tag), dtype=np.int64))

    @classmethod
    def concatenate(cls, batches: Sequence['TransitionBatch']) -> 'TransitionBatch':
        return cls(np.concatenate([b.states for b in batches]),
                   np.concatenate([b.actions for b in batches]),
                   np.concatenate([b.rewards for b in batches]),
                   np.concatenate([b.next_states for b in batches]),
                   np.concatenate([b.terminals for b in batches]),
                   np.concatenate([b.tags for b in batches]))

    def take(self, indices) -> 'TransitionBatch':
        return TransitionBatch(self.states[indices], self.actions[indices], self.rewards[indices],
                               self.next_states[indices], self.terminals[indices], self.tags[indices])

    def with_tag(self, tag: SourceTag) -> 'TransitionBatch':
        return TransitionBatch(self.states, self.actions, self.rewards, self.next_states, self.terminals,
                               np.full(len(self), int(tag), dtype=np.int64))

    def to_transitions(self) -> List[Transition]:
        return [Transition(self.states[i].copy(), self.actions[i].copy(), float(self.rewards[i]),
                           self.next_states[i].copy(), bool(self.terminals[i])) for i in range(len(self))]


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    horizon: int
    goal: Tuple[float, ...]
    step_scale: float
    low: Tuple[float, ...]
    high: Tuple[float, ...]
    start_low: Tuple[float, ...]
    start_high: Tuple[float, ...]
    goal_radius: float = 0.1
    sparse_reward: bool = False
    walls: bool = False

    def __post_init__(self):
        if self.horizon < 1:
            raise InvalidInputError(f"horizon must be >= 1, got {self.horizon}")
        if not self.step_scale > 0:
            raise InvalidInputError(f"step_scale must be > 0, got {self.step_scale}")
        for g, lo, hi in zip(self.goal, self.low, self.high):
            if not lo <= g <= hi:
                raise InvalidInputError(f"goal {self.goal} outside bounds")

    @property
    def goal_array(self) -> np.ndarray:
        return np.array(self.goal, dtype=np.float64)

    @property
    def low_array(self) -> np.ndarray:
        return np.array(self.low, dtype=np.float64)

    @property
    def high_array(self) -> np.ndarray:
        return np.array(self.high, dtype=np.float64)


@dataclass
class Trajectory:
    transitions: List[Transition] = field(default_factory=list)
    ret: float = 0.0

    def __len__(self):
        return len(self.transitions)


@dataclass
class DatasetMetadata:
    env: str
    mix: str
    seed: int
    size: int
    tier_counts: Dict[str, int] = field(default_factory=dict)


@dataclass
class OfflineDataset:
    transitions: TransitionBatch
    metadata: DatasetMetadata

    def __len__(self):
        return len(self.transitions)


def make_env(name: str) -> EnvSpec:
    """
    Look up a built-in environment by name.

    Raises:
        ConfigError: Unknown environment name
    """
    if name == POINTMASS:
        return EnvSpec(POINTMASS, 2, 2, horizon=30, goal=(1.0, 0.0), step_scale=0.1,
                       low=(-1.5, -1.5), high=(1.5, 1.5),
                       start_low=(-0.2, -0.2), start_high=(0.2, 0.2))
    if name == FOURROOM:
        return EnvSpec(FOURROOM, 2, 2, horizon=100, goal=(0.85, 0.85), step_scale=0.05,
                       low=(0.0, 0.0), high=(1.0, 1.0),
                       start_low=(0.05, 0.05), start_high=(0.25, 0.25),
                       sparse_reward=True, walls=True)
    raise ConfigError('env', f"unknown environment '{name}' (choose from {', '.join(ENV_NAMES)})")


def reset_state(spec: EnvSpec, rng: np.random.Generator) -> np.ndarray:
    """Initial state, uniform over the environment's start region."""
    return rng.uniform(np.array(spec.start_low), np.array(spec.start_high))


def _in_doorway(coord: float) -> bool:
    return any(lo <= coord <= hi for lo, hi in DOORWAYS)


def _apply_walls(state: np.ndarray, proposed: np.ndarray) -> np.ndarray:
    """Cancel the axis component of a move that crosses a wall outside a doorway."""
    nxt = proposed.copy()
    # vertical wall x = 0.5, doorways along y
    if (state[0] < WALL) != (nxt[0] < WALL):
        frac = (WALL - state[0]) / (nxt[0] - state[0])
        y_cross = state[1] + frac * (nxt[1] - state[1])
        if not _in_doorway(y_cross):
            nxt[0] = state[0]
    # horizontal wall y = 0.5, doorways along x
    if (state[1] < WALL) != (nxt[1] < WALL):
        frac = (WALL - state[1]) / (nxt[1] - state[1])
        x_cross = state[0] + frac * (nxt[0] - state[0])
        if not _in_doorway(x_cross):
            nxt[1] = state[1]
    return nxt


def env_step(spec: EnvSpec, state, action, step_index: int) -> Tuple[np.ndarray, float, bool]:
    """
    Advance the environment by one step.

    Args:
        spec: Environment description
        state: Current state, within bounds
        action: Action in [-1, 1]^action_dim
        step_index: 1-based index of this step within the episode

    Returns:
        Tuple of (next_state, reward, terminal)
    """
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (spec.action_dim,) or state.shape != (spec.state_dim,):
        raise InvalidInputError(f"expected state dim {spec.state_dim} and action dim {spec.action_dim}")
    if not np.all(np.isfinite(action)) or np.any(np.abs(action) > 1.0):
        raise InvalidInputError(f"action {action} outside [-1, 1]")
    if np.any(state < spec.low_array) or np.any(state > spec.high_array):
        raise InvalidInputError(f"state {state} outside environment bounds")

    proposed = state + spec.step_scale * action
    if spec.walls:
        proposed = _apply_walls(state, proposed)
    next_state = np.clip(proposed, spec.low_array, spec.high_array)

    dist = float(np.linalg.norm(next_state - spec.goal_array))
    reached = dist < spec.goal_radius
    if spec.sparse_reward:
        reward = 1.0 if reached else 0.0
    else:
        reward = -dist
    terminal = reached or step_index >= spec.horizon
    return next_state, reward, terminal


# -----------------------------------------------------
# Behavior policies
# -----------------------------------------------------

Policy = Callable[[np.ndarray, np.random.Generator], np.ndarray]


class ExpertPolicy:
    """
    Scripted controller. Greedy-to-goal on open terrain; on FourRoom-2D it
    heads for the doorway that leads towards the goal room first.
    """

    def __init__(self, spec: EnvSpec):
        self.spec = spec

    def _waypoint(self, state: np.ndarray) -> np.ndarray:
        if not self.spec.walls:
            return self.spec.goal_array
        x, y = state
        if x < WALL and y < WALL:
            if abs(y - 0.25) < 0.04:
                return np.array([0.55, 0.25])
            return np.array([min(x, 0.4), 0.25])
        if x >= WALL and y < WALL:
            if abs(x - 0.75) < 0.04:
                return np.array([0.75, 0.55])
            return np.array([0.75, min(y, 0.4)])
        if x < WALL and y >= WALL:
            if abs(y - 0.75) < 0.04:
                return np.array([0.55, 0.75])
            return np.array([min(x, 0.4), 0.75])
        return self.spec.goal_array

    def __call__(self, state: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        target = self._waypoint(np.asarray(state, dtype=np.float64))
        return np.clip((target - state) / self.spec.step_scale, -1.0, 1.0)


class MediumPolicy:
    """Expert action plus Gaussian noise, clipped."""

    def __init__(self, spec: EnvSpec, noise_scale: float = 0.3):
        self.expert = ExpertPolicy(spec)
        self.noise_scale = noise_scale

    def __call__(self, state: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        a = self.expert(state, rng)
        return np.clip(a + rng.normal(0.0, self.noise_scale, size=a.shape), -1.0, 1.0)


class RandomPolicy:

    def __init__(self, spec: EnvSpec):
        self.action_dim = spec.action_dim

    def __call__(self, state: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=self.action_dim)


TIER_NAMES = ('random', 'medium', 'expert')


def make_policy(spec: EnvSpec, tier: str, noise_scale: Optional[float] = None) -> Policy:
    if tier == 'expert':
        return ExpertPolicy(spec)
    if tier == 'medium':
        return MediumPolicy(spec, 0.3 if noise_scale is None else noise_scale)
    if tier == 'random':
        return RandomPolicy(spec)
    raise ConfigError('dataset_mix', f"unknown behavior tier '{tier}' (choose from {', '.join(TIER_NAMES)})")


# -----------------------------------------------------
# Rollouts and datasets
# -----------------------------------------------------

def rollout(spec: EnvSpec, policy: Policy, seed, n_episodes: int,
            initial_state=None) -> Tuple[List[Trajectory], float]:
    """
    Run complete episodes.

    Args:
        spec: Environment
        policy: Callable (state, rng) -> action
        seed: Seed (int or sequence of ints) for start states and policy noise
        n_episodes: Number of episodes
        initial_state: Fixed start state; drawn from the start region if None

    Returns:
        Tuple of (trajectories, mean undiscounted return)
    """
    if n_episodes < 1:
        raise InvalidInputError(f"n_episodes must be >= 1, got {n_episodes}")
    rng = np.random.default_rng(seed)
    trajectories = []
    for _ in range(n_episodes):
        if initial_state is None:
            state = reset_state(spec, rng)
        else:
            state = np.array(initial_state, dtype=np.float64)
        traj = Trajectory()
        for t in range(1, spec.horizon + 1):
            action = np.asarray(policy(state, rng), dtype=np.float64)
            next_state, reward, terminal = env_step(spec, state, action, t)
            traj.transitions.append(Transition(state, action, reward, next_state, terminal))
            traj.ret += reward
            state = next_state
            if terminal:
                break
        trajectories.append(traj)
    mean_return = float(np.mean([tr.ret for tr in trajectories]))
    return trajectories, mean_return


@dataclass(frozen=True)
class BehaviorTier:
    name: str
    fraction: float
    noise_scale: Optional[float] = None


def parse_mix(text: str) -> List[BehaviorTier]:
    """
    Parse a mix description such as 'random:0.3,medium:0.4:0.5,expert:0.3'.

    Each tier is name:fraction with an optional third field overriding the
    medium tier's action noise scale.
    """
    tiers = []
    for part in text.split(','):
        part = part.strip()
        if not part:
            continue
        fields = [f.strip() for f in part.split(':')]
        if len(fields) not in (2, 3):
            raise ConfigError('dataset_mix', f"malformed tier '{part}' (expected name:fraction[:noise])")
        try:
            noise = float(fields[2]) if len(fields) == 3 else None
            tier = BehaviorTier(fields[0], float(fields[1]), noise)
        except ValueError:
            raise ConfigError('dataset_mix', f"malformed tier '{part}' (expected name:fraction[:noise])")
        if noise is not None and not (noise >= 0.0 and math.isfinite(noise)):
            raise ConfigError('dataset_mix', f"noise scale of tier '{tier.name}' must be finite and >= 0")
        tiers.append(tier)
    return tiers


def format_mix(mix: Sequence[BehaviorTier]) -> str:
    return ','.join(f"{t.name}:{t.fraction!r}" + ('' if t.noise_scale is None else f":{t.noise_scale!r}")
                    for t in mix)


def tier_counts(mix: Sequence[BehaviorTier], n: int) -> List[int]:
    """Floor counts, the remainder going to the largest fractional parts."""
    raw = [t.fraction * n for t in mix]
    counts = [int(math.floor(x)) for x in raw]
    remainder = n - sum(counts)
    order = sorted(range(len(mix)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:remainder]:
        counts[i] += 1
    return counts


def build_offline_dataset(spec: EnvSpec, mix: Sequence[BehaviorTier], n: int, seed: int) -> OfflineDataset:
    """
    Collect n transitions from a mixture of behavior tiers.

    Args:
        spec: Environment
        mix: Behavior tiers with fractions summing to 1
        n: Number of transitions
        seed: Dataset seed

    Returns:
        OfflineDataset with exactly n transitions, tiers in mix order
    """
    if not mix:
        raise InvalidInputError("behavior mix is empty")
    if n < 1:
        raise InvalidInputError(f"dataset size must be >= 1, got {n}")
    if any(t.fraction < 0 for t in mix) or abs(sum(t.fraction for t in mix) - 1.0) > 1e-9:
        raise InvalidInputError(f"tier fractions must be nonnegative and sum to 1 ({format_mix(mix)})")

    rng = np.random.default_rng(seed)
    counts = tier_counts(mix, n)
    collected: List[Transition] = []
    for tier, count in zip(mix, counts):
        policy = make_policy(spec, tier.name, tier.noise_scale)
        taken = 0
        while taken < count:
            state = reset_state(spec, rng)
            for t in range(1, spec.horizon + 1):
                action = policy(state, rng)
                next_state, reward, terminal = env_step(spec, state, action, t)
                collected.append(Transition(state, action, reward, next_state, terminal))
                taken += 1
                state = next_state
                if terminal or taken == count:
                    break
        logger.debug(f"tier {tier.name}: {count} transitions")

    metadata = DatasetMetadata(spec.name, format_mix(mix), seed, n,
                               {t.name: c for t, c in zip(mix, counts)})
    logger.info(f"Built {spec.name} dataset: {n} transitions, mix {metadata.mix}, seed {seed}")
    return OfflineDataset(TransitionBatch.from_transitions(collected, SourceTag.OFFLINE), metadata)


def normalized_score(raw: float, random_ref: float, expert_ref: float) -> float:
    """100 * (raw - random_ref) / (expert_ref - random_ref)."""
    if not expert_ref > random_ref:
        raise InvalidInputError(f"expert reference {expert_ref} must exceed random reference {random_ref}")
    return 100.0 * (raw - random_ref) / (expert_ref - random_ref)


@lru_cache(maxsize=None)
def reference_returns(env_name: str) -> Tuple[float, float]:
    """
    Mean returns of the random and expert tiers, used for score normalization.

    Returns:
        Tuple of (random_ref, expert_ref)
    """
    spec = make_env(env_name)
    _, random_ref = rollout(spec, RandomPolicy(spec), REFERENCE_SEED, REFERENCE_EPISODES)
    _, expert_ref = rollout(spec, ExpertPolicy(spec), REFERENCE_SEED, REFERENCE_EPISODES)
    return random_ref, expert_ref


# -----------------------------------------------------
# Dataset files
# -----------------------------------------------------

def dataset_header(state_dim: int, action_dim: int) -> List[str]:
    return ([f's{i}' for i in range(state_dim)] + [f'a{i}' for i in range(action_dim)] + ['r']
            + [f'ns{i}' for i in range(state_dim)] + ['terminal'])


def write_dataset(path: str, dataset: OfflineDataset):
    """
    Write the dataset CSV and its `<path>.meta.json` sidecar.
    """
    batch = dataset.transitions
    try:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(dataset_header(batch.state_dim, batch.action_dim))
            for i in range(len(batch)):
                row = [repr(float(v)) for v in batch.states[i]]
                row += [repr(float(v)) for v in batch.actions[i]]
                row.append(repr(float(batch.rewards[i])))
                row += [repr(float(v)) for v in batch.next_states[i]]
                row.append('1' if batch.terminals[i] else '0')
                writer.writerow(row)
        meta = dataset.metadata
        with open(path + '.meta.json', 'w', encoding='utf-8', newline='\n') as f:
            json.dump({'env': meta.env, 'mix': meta.mix, 'seed': meta.seed, 'size': meta.size,
                       'tier_counts': meta.tier_counts}, f, indent=4, sort_keys=True)
    except OSError as e:
        raise LabIOError(f"cannot write dataset {path}: {e}")


def read_dataset(path: str) -> OfflineDataset:
    try:
        with open(path + '.meta.json', 'r', encoding='utf-8') as f:
            meta = json.load(f)
        with open(path, 'r', newline='', encoding='utf-8') as f:
            reader = csv.reader(f)
            header = next(reader)
            rows = [[float(v) for v in row] for row in reader if row]
    except (OSError, StopIteration) as e:
        raise LabIOError(f"cannot read dataset {path}: {e}")

    state_dim = sum(1 for h in header if h.startswith('s'))
    action_dim = sum(1 for h in header if h.startswith('a'))
    if header != dataset_header(state_dim, action_dim):
        raise InvalidInputError(f"{path}: unexpected header {header}")
    if not rows:
        raise InvalidInputError(f"{path}: dataset is empty")
    data = np.array(rows, dtype=np.float64)
    d, k = state_dim, action_dim
    batch = TransitionBatch(data[:, :d], data[:, d:d + k], data[:, d + k],
                            data[:, d + k + 1:2 * d + k + 1], data[:, -1] > 0.5)
    metadata = DatasetMetadata(meta['env'], meta['mix'], int(meta['seed']), int(meta['size']),
                               {k_: int(v) for k_, v in meta.get('tier_counts', {}).items()})
    if metadata.size != len(batch):
        raise InvalidInputError(f"{path}: metadata says {metadata.size} rows, file has {len(batch)}")
    return OfflineDataset(batch, metadata)
