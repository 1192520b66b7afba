# -*- coding: utf-8 -*-
"""
Online-phase orchestration with diffusion-generated replay.

Four replay buffers (online, offline, synthetic-online, synthetic-offline),
periodic refresh of the conditional denoiser followed by generation into the
synthetic buffers, and the two batch-composition paradigms: 50/50 concat and
OORB (one Bernoulli draw per batch picks the real source).
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from cfdglib.diagnostics import CurveRow, LossTracker
from cfdglib.diffusion import (DenoiserConfig, DiffusionSettings, TransitionCodec, generate_transitions,
                               init_denoiser, train_denoiser)
from cfdglib.envsuite import EnvSpec, Transition, TransitionBatch, env_step, normalized_score, reset_state
from cfdglib.lab_def import (CompositionError, ConditionLabel, ConfigError, DiffusionSource, FinetuneMode,
                             Generation, InvalidInputError, NumericError, Paradigm, SourceTag)
from cfdglib.numkernel import AdamState
from cfdglib.rlcore import Agent, AgentConfig, act, evaluate, lambdas_for_tags, train_step

logger = logging.getLogger('CFDGLab.augmentor')

# named RNG streams derived from the master seed
STREAMS = {
    'env': 1,
    'explore': 2,
    'agent': 3,
    'composition': 4,
    'diffusion_train': 5,
    'diffusion_sample': 6,
    'eval': 7,
    'init': 8,
}


def derive_rng(seed: int, stream: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(stream_seed(seed, stream, *extra))


def stream_seed(seed: int, stream: str, *extra: int) -> List[int]:
    return [int(seed), STREAMS[stream]] + [int(e) for e in extra]


class ReplayBuffer:
    """
    Fixed-capacity FIFO ring of transitions sharing one source tag.
    """

    def __init__(self, name: str, capacity: int, state_dim: int, action_dim: int, tag: SourceTag):
        if capacity < 1:
            raise ConfigError(f'capacity_{name}', f"must be >= 1, got {capacity}")
        self.name = name
        self.capacity = capacity
        self.tag = SourceTag(tag)
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.terminals = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.insertion_count = 0
        self._ptr = 0

    def __len__(self):
        return self.size

    def add(self, transition: Transition):
        i = self._ptr
        self.states[i] = transition.state
        self.actions[i] = transition.action
        self.rewards[i] = transition.reward
        self.next_states[i] = transition.next_state
        self.terminals[i] = transition.terminal
        self._advance(1)

    def add_batch(self, batch: TransitionBatch):
        m = len(batch)
        if m == 0:
            return
        # only the newest `capacity` rows survive
        skip = max(0, m - self.capacity)
        kept = batch.take(np.arange(skip, m))
        idx = (self._ptr + skip + np.arange(len(kept))) % self.capacity
        self.states[idx] = kept.states
        self.actions[idx] = kept.actions
        self.rewards[idx] = kept.rewards
        self.next_states[idx] = kept.next_states
        self.terminals[idx] = kept.terminals
        self._advance(m)

    def _advance(self, m: int):
        self._ptr = (self._ptr + m) % self.capacity
        self.size = min(self.capacity, self.size + m)
        self.insertion_count += m

    def clear(self):
        self.size = 0
        self._ptr = 0

    def _batch(self, idx) -> TransitionBatch:
        return TransitionBatch(self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx],
                               self.terminals[idx], np.full(len(idx), int(self.tag), dtype=np.int64))

    def contents(self) -> TransitionBatch:
        """Stored transitions, oldest first."""
        if self.size < self.capacity:
            idx = np.arange(self.size)
        else:
            idx = (self._ptr + np.arange(self.capacity)) % self.capacity
        return self._batch(idx)

    def sample(self, n: int, rng: np.random.Generator) -> TransitionBatch:
        """Uniform sampling with replacement."""
        if self.size == 0:
            raise CompositionError(self.name)
        return self._batch(rng.integers(0, self.size, size=n))


@dataclass
class BufferSet:
    d_on: ReplayBuffer
    d_off: ReplayBuffer
    d_on_syn: ReplayBuffer
    d_off_syn: ReplayBuffer

    @classmethod
    def create(cls, state_dim: int, action_dim: int, capacity_online: int, capacity_offline: int,
               capacity_syn_online: int, capacity_syn_offline: int) -> 'BufferSet':
        return cls(ReplayBuffer('online', capacity_online, state_dim, action_dim, SourceTag.ONLINE),
                   ReplayBuffer('offline', capacity_offline, state_dim, action_dim, SourceTag.OFFLINE),
                   ReplayBuffer('syn_online', capacity_syn_online, state_dim, action_dim, SourceTag.SYN_ONLINE),
                   ReplayBuffer('syn_offline', capacity_syn_offline, state_dim, action_dim, SourceTag.SYN_OFFLINE))

    def by_tag(self, tag: SourceTag) -> ReplayBuffer:
        return {SourceTag.ONLINE: self.d_on, SourceTag.OFFLINE: self.d_off,
                SourceTag.SYN_ONLINE: self.d_on_syn, SourceTag.SYN_OFFLINE: self.d_off_syn}[SourceTag(tag)]


@dataclass(frozen=True)
class MixConfig:
    r: float = 1.0 / 3.0
    syn_online_fraction: float = 0.8
    oorb_p: float = 0.5
    refresh_every: int = 500
    refresh_enabled: bool = True
    gen_count_per_refresh: int = 5000
    paradigm: Paradigm = Paradigm.CONCAT_5050
    guidance_w: float = 1.0
    diffusion_source: DiffusionSource = DiffusionSource.BOTH
    generation: Generation = Generation.GUIDED
    clear_synthetic_on_refresh: bool = True
    diffusion_updates_per_refresh: int = 2000
    retrain_from_scratch: bool = False
    chunk_size: int = 1000
    sample_workers: int = 1

    def __post_init__(self):
        if not 0.0 <= self.r < 1.0:
            raise ConfigError('r', f"must be in [0, 1), got {self.r}")
        if not 0.0 <= self.syn_online_fraction <= 1.0:
            raise ConfigError('syn_online_fraction', f"must be in [0, 1], got {self.syn_online_fraction}")
        if not 0.0 <= self.oorb_p <= 1.0:
            raise ConfigError('oorb_p', f"must be in [0, 1], got {self.oorb_p}")
        if self.refresh_every < 1:
            raise ConfigError('refresh_every', f"must be >= 1, got {self.refresh_every}")
        if self.gen_count_per_refresh < 1:
            raise ConfigError('gen_count_per_refresh', f"must be >= 1, got {self.gen_count_per_refresh}")
        if self.diffusion_updates_per_refresh < 0:
            raise ConfigError('diffusion_updates_per_refresh', f"must be >= 0, got {self.diffusion_updates_per_refresh}")
        if self.chunk_size < 1:
            raise ConfigError('chunk_size', f"must be >= 1, got {self.chunk_size}")
        if self.sample_workers < 1:
            raise ConfigError('sample_workers', f"must be >= 1, got {self.sample_workers}")


def mode_to_mix(mode: FinetuneMode, base: MixConfig) -> MixConfig:
    """Map a fine-tuning mode onto the configured mix settings."""
    mode = FinetuneMode(mode)
    if mode == FinetuneMode.BASELINE:
        return replace(base, r=0.0, refresh_enabled=False)
    if mode == FinetuneMode.CFDG:
        return replace(base, diffusion_source=DiffusionSource.BOTH, generation=Generation.GUIDED)
    if mode == FinetuneMode.CFDG_NO_GUIDANCE:
        return replace(base, diffusion_source=DiffusionSource.BOTH, generation=Generation.UNCONDITIONAL)
    if mode == FinetuneMode.CFDG_NO_OFFLINE_DA:
        return replace(base, diffusion_source=DiffusionSource.BOTH, generation=Generation.GUIDED,
                       syn_online_fraction=1.0)
    return replace(base, diffusion_source=DiffusionSource.ONLINE_ONLY, generation=Generation.UNCONDITIONAL,
                   syn_online_fraction=1.0)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def maybe_refresh(step: int, cfg: MixConfig) -> bool:
    if step < 0:
        raise InvalidInputError(f"step must be >= 0, got {step}")
    return cfg.refresh_enabled and step > 0 and step % cfg.refresh_every == 0


# -----------------------------------------------------
# Batch composition
# -----------------------------------------------------

def synthetic_split(n_syn: int, cfg: MixConfig) -> Tuple[int, int]:
    n_syn_on = round_half_up(cfg.syn_online_fraction * n_syn)
    return n_syn_on, n_syn - n_syn_on


def concat_counts(batch_size: int, cfg: MixConfig) -> Dict[SourceTag, int]:
    """Per-source counts of a 50/50 concat batch."""
    n_syn = round_half_up(cfg.r * batch_size)
    n_syn_on, n_syn_off = synthetic_split(n_syn, cfg)
    remainder = batch_size - n_syn
    n_on = remainder // 2
    return {SourceTag.ONLINE: n_on, SourceTag.OFFLINE: remainder - n_on,
            SourceTag.SYN_ONLINE: n_syn_on, SourceTag.SYN_OFFLINE: n_syn_off}


def oorb_counts(batch_size: int, cfg: MixConfig, online: bool) -> Dict[SourceTag, int]:
    """Per-source counts of an OORB batch whose real source is online or offline."""
    n_syn = round_half_up(cfg.r * batch_size)
    real, syn = (SourceTag.ONLINE, SourceTag.SYN_ONLINE) if online else (SourceTag.OFFLINE, SourceTag.SYN_OFFLINE)
    counts = {tag: 0 for tag in SourceTag}
    counts[real] = batch_size - n_syn
    counts[syn] = n_syn
    return counts


def _draw(buffers: BufferSet, counts: Dict[SourceTag, int], rng: np.random.Generator) -> TransitionBatch:
    parts = []
    for tag in (SourceTag.ONLINE, SourceTag.OFFLINE, SourceTag.SYN_ONLINE, SourceTag.SYN_OFFLINE):
        n = counts[tag]
        if n > 0:
            parts.append(buffers.by_tag(tag).sample(n, rng))
    batch = TransitionBatch.concatenate(parts)
    return batch.take(rng.permutation(len(batch)))


def _check_batch_size(batch_size: int):
    if batch_size < 3:
        raise InvalidInputError(f"batch size must be >= 3, got {batch_size}")


def compose_batch_concat(buffers: BufferSet, batch_size: int, cfg: MixConfig,
                         rng: np.random.Generator) -> TransitionBatch:
    """
    Online and offline halves plus a synthetic fraction r, shuffled.
    """
    _check_batch_size(batch_size)
    return _draw(buffers, concat_counts(batch_size, cfg), rng)


def compose_batch_oorb(buffers: BufferSet, batch_size: int, cfg: MixConfig, rng: np.random.Generator,
                       online: Optional[bool] = None) -> Tuple[TransitionBatch, np.ndarray]:
    """
    Real data from one source chosen with probability oorb_p for online,
    synthetic data with the matching label.

    Args:
        buffers: Replay buffers
        batch_size: Batch size B (>= 3)
        cfg: Mix settings
        rng: Composition generator
        online: Real source already drawn by the caller; drawn here if None

    Returns:
        Tuple of (batch, per-sample lambda)
    """
    _check_batch_size(batch_size)
    if online is None:
        online = bool(rng.random() < cfg.oorb_p)
    batch = _draw(buffers, oorb_counts(batch_size, cfg, online), rng)
    return batch, lambdas_for_tags(batch.tags)


class BatchComposer:
    """
    Composes training batches for the online loop.

    A synthetic buffer that is still empty (before the first refresh, or
    after a refresh too small to reach it) contributes nothing. Under the
    concat paradigm its share goes to the other synthetic buffer when that
    one holds data; otherwise, and always under OORB where the synthetic
    label must match the real source, the batch is composed as if r were 0.
    A warning is logged once per buffer and destination.
    """

    def __init__(self, buffers: BufferSet, batch_size: int, cfg: MixConfig, rng: np.random.Generator):
        self.buffers = buffers
        self.batch_size = batch_size
        self.cfg = cfg
        self.rng = rng
        self._warned = set()

    def _usable(self, cfg: MixConfig, counts: Dict[SourceTag, int]) -> MixConfig:
        empty = [tag for tag in (SourceTag.SYN_ONLINE, SourceTag.SYN_OFFLINE)
                 if counts[tag] > 0 and len(self.buffers.by_tag(tag)) == 0]
        if not empty:
            return cfg
        usable = cfg
        if cfg.paradigm == Paradigm.CONCAT_5050 and len(empty) == 1:
            other = SourceTag.SYN_OFFLINE if empty[0] == SourceTag.SYN_ONLINE else SourceTag.SYN_ONLINE
            if len(self.buffers.by_tag(other)) > 0:
                usable = replace(cfg, syn_online_fraction=1.0 if other == SourceTag.SYN_ONLINE else 0.0)
        if usable is cfg:
            usable = replace(cfg, r=0.0)
        for tag in empty:
            name = self.buffers.by_tag(tag).name
            target = 'real data' if usable.r == 0.0 else 'the other synthetic buffer'
            if (name, target) not in self._warned:
                logger.warning(f"synthetic buffer '{name}' is empty, its batch share goes to {target}")
                self._warned.add((name, target))
        return usable

    def next_batch(self) -> TransitionBatch:
        cfg, b = self.cfg, self.batch_size
        if cfg.paradigm == Paradigm.OORB:
            online = bool(self.rng.random() < cfg.oorb_p)
            cfg = self._usable(cfg, oorb_counts(b, cfg, online))
            batch, _ = compose_batch_oorb(self.buffers, b, cfg, self.rng, online)
            return batch
        cfg = self._usable(cfg, concat_counts(b, cfg))
        return compose_batch_concat(self.buffers, b, cfg, self.rng)


# -----------------------------------------------------
# Diffusion refresh
# -----------------------------------------------------

@dataclass
class CfdgModel:
    """The conditional generator together with its optimizer state."""
    denoiser: DenoiserConfig
    opt_state: AdamState
    settings: DiffusionSettings
    refresh_count: int = 0

    @classmethod
    def create(cls, data_dim: int, settings: DiffusionSettings, rng: np.random.Generator) -> 'CfdgModel':
        denoiser = init_denoiser(data_dim, settings, rng)
        return cls(denoiser, AdamState.for_params(denoiser), settings)


def _refresh_batches(buffers: BufferSet, codec: TransitionCodec, cfg: MixConfig, batch_size: int):
    half = batch_size // 2

    def draw_both(rng: np.random.Generator):
        on = codec.encode(buffers.d_on.sample(half, rng))
        off = codec.encode(buffers.d_off.sample(batch_size - half, rng))
        labels = np.concatenate([np.full(half, int(ConditionLabel.ONLINE)),
                                 np.full(batch_size - half, int(ConditionLabel.OFFLINE))])
        return np.concatenate([on, off]), labels

    def draw_online(rng: np.random.Generator):
        x = codec.encode(buffers.d_on.sample(batch_size, rng))
        return x, np.full(batch_size, int(ConditionLabel.ONLINE))

    return draw_both if cfg.diffusion_source == DiffusionSource.BOTH else draw_online


def _chunk_jobs(count: int, chunk_size: int) -> List[int]:
    sizes = [chunk_size] * (count // chunk_size)
    if count % chunk_size:
        sizes.append(count % chunk_size)
    return sizes


def refresh_and_generate(buffers: BufferSet, model: CfdgModel, codec: TransitionCodec, cfg: MixConfig,
                         seed: Sequence[int], spec: EnvSpec) -> CfdgModel:
    """
    Fine-tune the denoiser on the real buffers, then refill the synthetic buffers.

    Args:
        buffers: Replay buffers; the synthetic ones are written in place
        model: Current generator
        codec: Transition codec fitted on the offline data
        cfg: Mix settings
        seed: Seed sequence of this refresh
        spec: Environment, for clipping generated states

    Returns:
        The updated CfdgModel
    """
    seed = [int(s) for s in np.atleast_1d(seed)]
    if len(buffers.d_on) == 0:
        raise InvalidInputError("online buffer is empty; cannot refresh the diffusion model")
    if cfg.diffusion_source == DiffusionSource.BOTH and len(buffers.d_off) == 0:
        raise InvalidInputError("offline buffer is empty; cannot refresh the diffusion model")

    settings = model.settings
    train_rng = np.random.default_rng(seed + [STREAMS['diffusion_train']])
    denoiser, opt_state = model.denoiser, model.opt_state
    if cfg.retrain_from_scratch:
        denoiser = init_denoiser(codec.width, settings, train_rng)
        opt_state = AdamState.for_params(denoiser)
    p_uncond = denoiser.p_uncond
    if cfg.diffusion_source == DiffusionSource.ONLINE_ONLY:
        # unconditional model: every training label is dropped to NULL
        denoiser = replace(denoiser, p_uncond=1.0)
    draw = _refresh_batches(buffers, codec, cfg, settings.batch_size)
    denoiser, opt_state, mean_loss = train_denoiser(denoiser, opt_state, draw, cfg.diffusion_updates_per_refresh,
                                                    settings, train_rng)
    denoiser = replace(denoiser, p_uncond=p_uncond)

    n_on = round_half_up(cfg.syn_online_fraction * cfg.gen_count_per_refresh)
    n_off = cfg.gen_count_per_refresh - n_on
    if cfg.generation == Generation.GUIDED:
        on_label, off_label, w = ConditionLabel.ONLINE, ConditionLabel.OFFLINE, cfg.guidance_w
    else:
        on_label, off_label, w = ConditionLabel.NULL, ConditionLabel.NULL, 0.0

    jobs = []
    for slot, (count, label, tag) in enumerate(((n_on, on_label, SourceTag.SYN_ONLINE),
                                                (n_off, off_label, SourceTag.SYN_OFFLINE))):
        for chunk_index, size in enumerate(_chunk_jobs(count, cfg.chunk_size)):
            jobs.append((tag, label, size, seed + [STREAMS['diffusion_sample'], slot, chunk_index]))

    def run(job):
        tag, label, size, job_seed = job
        return tag, generate_transitions(denoiser, codec, label, w, size, job_seed, settings.schedule, spec, tag)

    if cfg.sample_workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=cfg.sample_workers) as executor:
            results = list(executor.map(run, jobs))
    else:
        results = [run(job) for job in jobs]

    if cfg.clear_synthetic_on_refresh:
        buffers.d_on_syn.clear()
        buffers.d_off_syn.clear()
    for tag, batch in results:
        buffers.by_tag(tag).add_batch(batch)

    logger.info(f"Diffusion refresh {model.refresh_count + 1}: {cfg.diffusion_updates_per_refresh} updates, "
                f"mean loss {mean_loss:.4f}, generated {n_on} online / {n_off} offline")
    return CfdgModel(denoiser, opt_state, settings, model.refresh_count + 1)


# -----------------------------------------------------
# Online phase
# -----------------------------------------------------

@dataclass(frozen=True)
class PhaseSettings:
    total_steps: int
    batch_size: int = 256
    eval_every: int = 250
    eval_episodes: int = 10

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError('total_steps', f"must be >= 1, got {self.total_steps}")
        if self.batch_size < 3:
            raise ConfigError('batch_size', f"must be >= 3, got {self.batch_size}")
        if self.eval_every < 1:
            raise ConfigError('eval_every', f"must be >= 1, got {self.eval_every}")
        if self.eval_episodes < 1:
            raise ConfigError('eval_episodes', f"must be >= 1, got {self.eval_episodes}")


def evaluation_row(spec: EnvSpec, agent: Agent, step: int, settings: PhaseSettings, seed: int,
                   refs: Tuple[float, float], tracker: LossTracker) -> CurveRow:
    ret = evaluate(spec, agent.params.policy, settings.eval_episodes, stream_seed(seed, 'eval'))
    losses = tracker.flush()
    row = CurveRow(step, ret, normalized_score(ret, *refs), losses['loss_q'], losses['loss_pi'], losses['loss_v'])
    logger.info(f"step {step}: return {ret:.3f}, normalized {row.normalized_score:.1f}")
    return row


def run_online_phase(agent: Agent, buffers: BufferSet, model: Optional[CfdgModel], spec: EnvSpec, cfg: MixConfig,
                     agent_cfg: AgentConfig, settings: PhaseSettings, seed: int, codec: Optional[TransitionCodec],
                     refs: Tuple[float, float]) -> Tuple[Agent, List[CurveRow], Optional[CfdgModel]]:
    """
    Interact, refresh the generator on schedule and train on composed batches.

    Args:
        agent: Offline-pretrained agent
        buffers: Buffers with d_off populated
        model: Generator, or None when refresh is disabled
        spec: Environment
        cfg: Mix settings of the fine-tuning mode
        agent_cfg: Learner settings
        settings: Step budget, batch size and evaluation cadence
        seed: Master seed of the run
        codec: Codec fitted on the offline data, or None when refresh is disabled
        refs: (random_ref, expert_ref) for score normalization

    Returns:
        Tuple of (trained agent, learning curve rows, final generator)
    """
    if len(buffers.d_off) == 0:
        raise InvalidInputError("offline buffer must be populated before the online phase")
    if cfg.refresh_enabled and (model is None or codec is None):
        raise InvalidInputError("refresh is enabled but no diffusion model or codec was given")

    env_rng = derive_rng(seed, 'env')
    explore_rng = derive_rng(seed, 'explore')
    agent_rng = derive_rng(seed, 'agent')
    comp_rng = derive_rng(seed, 'composition')

    composer = BatchComposer(buffers, settings.batch_size, cfg, comp_rng)
    tracker = LossTracker()
    rows = [evaluation_row(spec, agent, 0, settings, seed, refs, tracker)]
    state = reset_state(spec, env_rng)
    episode_step = 0
    refresh_index = 0

    for step in range(1, settings.total_steps + 1):
        episode_step += 1
        action = act(agent.params.policy, state)
        action = np.clip(action + explore_rng.normal(0.0, agent_cfg.explore_noise, size=action.shape), -1.0, 1.0)
        next_state, reward, terminal = env_step(spec, state, action, episode_step)
        buffers.d_on.add(Transition(state, action, reward, next_state, terminal))
        if terminal:
            state = reset_state(spec, env_rng)
            episode_step = 0
        else:
            state = next_state

        if maybe_refresh(step, cfg):
            model = refresh_and_generate(buffers, model, codec, cfg,
                                         [seed, refresh_index], spec)
            refresh_index += 1

        batch = composer.next_batch()
        try:
            agent, diagnostics = train_step(agent, batch, agent_cfg, agent_rng)
        except NumericError as e:
            raise NumericError(f"online step {step}: {e.args[0]}") from e
        tracker.add(diagnostics)

        if step % settings.eval_every == 0:
            rows.append(evaluation_row(spec, agent, step, settings, seed, refs, tracker))
    return agent, rows, model


def pretrain_offline(agent: Agent, dataset: TransitionBatch, spec: EnvSpec, agent_cfg: AgentConfig,
                     settings: PhaseSettings, seed: int, refs: Tuple[float, float]) -> Tuple[Agent, List[CurveRow]]:
    """
    Offline pre-training on uniformly sampled dataset batches.

    Returns:
        Tuple of (trained agent, learning curve rows)
    """
    if len(dataset) == 0:
        raise InvalidInputError("offline dataset is empty")
    batch_rng = derive_rng(seed, 'composition')
    agent_rng = derive_rng(seed, 'agent')
    data = dataset.with_tag(SourceTag.OFFLINE)
    tracker = LossTracker()
    rows = [evaluation_row(spec, agent, 0, settings, seed, refs, tracker)]
    for step in range(1, settings.total_steps + 1):
        batch = data.take(batch_rng.integers(0, len(data), size=settings.batch_size))
        try:
            agent, diagnostics = train_step(agent, batch, agent_cfg, agent_rng)
        except NumericError as e:
            raise NumericError(f"offline step {step}: {e.args[0]}") from e
        tracker.add(diagnostics)
        if step % settings.eval_every == 0:
            rows.append(evaluation_row(spec, agent, step, settings, seed, refs, tracker))
    logger.info(f"Offline pre-training finished after {settings.total_steps} steps")
    return agent, rows
