# -*- coding: utf-8 -*-
"""
Label-conditioned diffusion over encoded transition vectors.

EDM parameterization: the noisy input is x0 + sigma * noise and the network
F is wrapped as D(x, sigma, c) = c_skip * x + c_out * F(c_in * x, emb(sigma) + emb(c)),
with sigma_data = 1 because the codec standardizes every channel.
Classifier-free guidance combines the conditional and unconditional noise
estimates; the NULL label selects the unconditional pathway.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Tuple

import numpy as np

from cfdglib.envsuite import EnvSpec, TransitionBatch
from cfdglib.lab_def import ConditionLabel, ConfigError, InvalidInputError, NumericError, SourceTag
from cfdglib.numkernel import (AdamState, LrSchedule, MlpParams, adam_step, build_mlp, cosine_lr,
                               init_mlp, mlp_backward, mlp_forward, mlp_forward_cached)

logger = logging.getLogger('CFDGLab.diffusion')

STD_FLOOR = 1e-6
P_MEAN = -1.2
P_STD = 1.2
N_LABELS = len(ConditionLabel)

TAG_BY_LABEL = {ConditionLabel.ONLINE: SourceTag.SYN_ONLINE, ConditionLabel.OFFLINE: SourceTag.SYN_OFFLINE}


# -----------------------------------------------------
# Codec
# -----------------------------------------------------

@dataclass
class TransitionCodec:
    """
    Per-channel standardization of (state | action | reward | next_state | terminal).
    """
    mean: np.ndarray
    std: np.ndarray
    state_dim: int
    action_dim: int

    @property
    def width(self) -> int:
        return 2 * self.state_dim + self.action_dim + 2

    def raw_vectors(self, batch: TransitionBatch) -> np.ndarray:
        return np.concatenate([batch.states, batch.actions, batch.rewards[:, None], batch.next_states,
                               batch.terminals.astype(np.float64)[:, None]], axis=1)

    def encode(self, batch: TransitionBatch) -> np.ndarray:
        if batch.state_dim != self.state_dim or batch.action_dim != self.action_dim:
            raise InvalidInputError("batch dimensions do not match the codec")
        return (self.raw_vectors(batch) - self.mean) / self.std

    def decode(self, x: np.ndarray, tag: SourceTag = SourceTag.OFFLINE) -> TransitionBatch:
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.width)
        raw = x * self.std + self.mean
        d, k = self.state_dim, self.action_dim
        return TransitionBatch(raw[:, :d], raw[:, d:d + k], raw[:, d + k], raw[:, d + k + 1:2 * d + k + 1],
                               raw[:, -1] > 0.5, np.full(x.shape[0], int(tag), dtype=np.int64))

    def to_dict(self) -> Dict:
        return {'state_dim': self.state_dim, 'action_dim': self.action_dim,
                'mean': [float(v) for v in self.mean], 'std': [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, data: Dict) -> 'TransitionCodec':
        return cls(np.array(data['mean'], dtype=np.float64), np.array(data['std'], dtype=np.float64),
                   int(data['state_dim']), int(data['action_dim']))


def fit_codec(corpus: TransitionBatch) -> TransitionCodec:
    """Per-channel mean and population std, std floored at 1e-6."""
    if len(corpus) == 0:
        raise InvalidInputError("cannot fit a codec on an empty corpus")
    codec = TransitionCodec(np.zeros(0), np.zeros(0), corpus.state_dim, corpus.action_dim)
    raw = codec.raw_vectors(corpus)
    codec.mean = raw.mean(axis=0)
    codec.std = np.maximum(raw.std(axis=0), STD_FLOOR)
    return codec


# -----------------------------------------------------
# Schedule and denoiser
# -----------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Karras sigma ladder plus stochastic-sampler churn settings."""
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    n_steps: int = 32
    rho: float = 7.0
    s_churn: float = 40.0
    s_tmin: float = 0.05
    s_tmax: float = 50.0
    s_noise: float = 1.003

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ConfigError('sigma_min', f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}")
        if self.n_steps < 2:
            raise ConfigError('n_sample_steps', f"need at least 2 steps, got {self.n_steps}")

    @property
    def sigmas(self) -> np.ndarray:
        ramp = np.arange(self.n_steps) / (self.n_steps - 1)
        inv_max = self.sigma_max ** (1.0 / self.rho)
        inv_min = self.sigma_min ** (1.0 / self.rho)
        return (inv_max + ramp * (inv_min - inv_max)) ** self.rho


@dataclass(frozen=True)
class DiffusionSettings:
    width: int = 256
    depth: int = 4
    embed_dim: int = 16
    p_uncond: float = 0.1
    lr: float = 3e-4
    lr_min: float = 0.0
    batch_size: int = 256
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)

    def __post_init__(self):
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ConfigError('embed_dim', f"must be an even number >= 2, got {self.embed_dim}")
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ConfigError('p_uncond', f"must be in [0, 1], got {self.p_uncond}")
        if self.width < 1 or self.depth < 2:
            raise ConfigError('denoiser_depth', f"need width >= 1 and depth >= 2, got {self.width}x{self.depth}")
        if self.batch_size < 2:
            raise ConfigError('diffusion_batch_size', f"must be >= 2, got {self.batch_size}")
        if not self.lr > 0 or not 0 <= self.lr_min <= self.lr:
            raise ConfigError('diffusion_lr', f"need lr > 0 and 0 <= lr_min <= lr, got {self.lr}, {self.lr_min}")


@dataclass
class DenoiserConfig:
    """
    Trainable denoiser: the residual MLP and a one-layer label embedding.

    label_net maps a one-hot label (OFFLINE, ONLINE, NULL) to an embedding
    that is added to the sinusoidal sigma features.
    """
    net: MlpParams
    label_net: MlpParams
    p_uncond: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.p_uncond <= 1.0:
            raise InvalidInputError(f"p_uncond must be in [0, 1], got {self.p_uncond}")
        if self.label_net.in_dim != N_LABELS or self.label_net.depth != 1:
            raise InvalidInputError("label embedding must be a single layer over the three labels")
        if self.net.in_dim != self.data_dim + self.embed_dim:
            raise InvalidInputError("denoiser input width does not match data and embedding widths")

    @property
    def embed_dim(self) -> int:
        return self.label_net.out_dim

    @property
    def data_dim(self) -> int:
        return self.net.out_dim

    def tensors(self):
        return self.net.tensors() + self.label_net.tensors()

    def replace_tensors(self, tensors) -> 'DenoiserConfig':
        n = len(self.net.tensors())
        return DenoiserConfig(self.net.replace_tensors(tensors[:n]), self.label_net.replace_tensors(tensors[n:]),
                              self.p_uncond)

    def networks(self) -> Dict[str, MlpParams]:
        return {'denoiser': self.net, 'label_embedding': self.label_net}


def init_denoiser(data_dim: int, settings: DiffusionSettings, rng: np.random.Generator) -> DenoiserConfig:
    net = build_mlp(data_dim + settings.embed_dim, data_dim, settings.width, settings.depth, rng)
    label_net = init_mlp([N_LABELS, settings.embed_dim], rng, residual=False, final_scale=0.5)
    return DenoiserConfig(net, label_net, settings.p_uncond)


def preconditioning(sigma) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """EDM c_skip, c_out, c_in, c_noise for sigma_data = 1."""
    sigma = np.asarray(sigma, dtype=np.float64)
    c_skip = 1.0 / (sigma ** 2 + 1.0)
    c_out = sigma / np.sqrt(sigma ** 2 + 1.0)
    c_in = 1.0 / np.sqrt(sigma ** 2 + 1.0)
    c_noise = 0.25 * np.log(sigma)
    return c_skip, c_out, c_in, c_noise


def sigma_embedding(c_noise: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of c_noise, shape (n, dim)."""
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, math.log(100.0), half))
    angles = np.asarray(c_noise, dtype=np.float64).reshape(-1, 1) * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def _one_hot(labels: np.ndarray) -> np.ndarray:
    return np.eye(N_LABELS)[np.asarray(labels, dtype=np.int64)]


def _net_input(config: DenoiserConfig, x: np.ndarray, sigma: np.ndarray, labels: np.ndarray):
    _, _, c_in, c_noise = preconditioning(sigma)
    label_emb, label_cache = mlp_forward_cached(config.label_net, _one_hot(labels))
    cond = sigma_embedding(c_noise, config.embed_dim) + label_emb
    return np.concatenate([c_in[:, None] * x, cond], axis=1), label_cache


def denoise(config: DenoiserConfig, x: np.ndarray, sigma, labels) -> np.ndarray:
    """
    Denoised estimate D(x, sigma, label) for a batch.

    Args:
        config: Denoiser
        x: Noisy vectors, shape (n, data_dim)
        sigma: Scalar or per-row noise level (> 0)
        labels: Scalar or per-row ConditionLabel values

    Returns:
        Array of shape (n, data_dim)
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n,))
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (n,))
    c_skip, c_out, _, _ = preconditioning(sigma)
    inp, _ = _net_input(config, x, sigma, labels)
    f = mlp_forward(config.net, inp)
    return c_skip[:, None] * x + c_out[:, None] * f


def forward_noise(x0: np.ndarray, sigma: float, noise: np.ndarray) -> np.ndarray:
    """x0 + sigma * noise."""
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise InvalidInputError(f"x0 shape {x0.shape} != noise shape {noise.shape}")
    if sigma < 0:
        raise InvalidInputError(f"sigma must be >= 0, got {sigma}")
    return x0 + sigma * noise


def drop_labels(labels: np.ndarray, p_uncond: float, rng: np.random.Generator) -> np.ndarray:
    """Replace each label by NULL independently with probability p_uncond."""
    labels = np.asarray(labels, dtype=np.int64)
    dropped = rng.random(labels.shape[0]) < p_uncond
    return np.where(dropped, int(ConditionLabel.NULL), labels)


def edm_weighted_loss(denoised: np.ndarray, x0: np.ndarray, sigma) -> float:
    """mean of lambda(sigma) * (D - x0)^2 with lambda = (sigma^2 + 1) / sigma^2."""
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1, 1)
    weight = (sigma ** 2 + 1.0) / sigma ** 2
    return float(np.mean(weight * (np.asarray(denoised) - np.asarray(x0)) ** 2))


def denoiser_loss_and_grads(config: DenoiserConfig, x0: np.ndarray, labels: np.ndarray,
                            sigma: np.ndarray, noise: np.ndarray) -> Tuple[float, DenoiserConfig]:
    """
    Preconditioned denoising loss and exact gradients for net and label embedding.

    The loss is mean ||F - F_target||^2, equal to edm_weighted_loss of the
    wrapped output.
    """
    n, dim = x0.shape
    y = x0 + sigma[:, None] * noise
    c_skip, c_out, _, _ = preconditioning(sigma)
    inp, label_cache = _net_input(config, y, sigma, labels)
    f, cache = mlp_forward_cached(config.net, inp)
    f_target = (x0 - c_skip[:, None] * y) / c_out[:, None]
    diff = f - f_target
    loss = float(np.mean(diff ** 2))
    grads_net, grad_in = mlp_backward(config.net, cache, 2.0 * diff / (n * dim))
    grads_label, _ = mlp_backward(config.label_net, label_cache, grad_in[:, dim:])
    return loss, DenoiserConfig(grads_net, grads_label, config.p_uncond)


def denoise_train_step(config: DenoiserConfig, x0: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
                       opt_state: AdamState, lr: float) -> Tuple[DenoiserConfig, AdamState, float]:
    """
    One Adam step on a labelled batch with classifier-free label dropout.

    Args:
        config: Denoiser
        x0: Encoded clean vectors, shape (n, data_dim)
        labels: OFFLINE/ONLINE labels; NULL only arises from dropout
        rng: Generator for dropout, sigma and noise draws
        opt_state: Adam state of config
        lr: Learning rate

    Returns:
        Tuple of (updated config, updated optimizer state, loss)
    """
    x0 = np.asarray(x0, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if x0.ndim != 2 or x0.shape[0] == 0 or labels.shape != (x0.shape[0],):
        raise InvalidInputError("denoiser batch must be a nonempty (n, d) array with n labels")
    if np.any(labels == int(ConditionLabel.NULL)):
        raise InvalidInputError("NULL labels are not allowed in a training batch")
    effective = drop_labels(labels, config.p_uncond, rng)
    sigma = np.exp(P_MEAN + P_STD * rng.normal(size=x0.shape[0]))
    noise = rng.normal(size=x0.shape)
    loss, grads = denoiser_loss_and_grads(config, x0, effective, sigma, noise)
    new_config, new_state = adam_step(config, grads, opt_state, lr)
    return new_config, new_state, loss


BatchSource = Callable[[np.random.Generator], Tuple[np.ndarray, np.ndarray]]


def train_denoiser(config: DenoiserConfig, opt_state: AdamState, draw_batch: BatchSource, n_updates: int,
                   settings: DiffusionSettings, rng: np.random.Generator) -> Tuple[DenoiserConfig, AdamState, float]:
    """
    Run n_updates cosine-annealed training steps.

    Returns:
        Tuple of (config, optimizer state, mean loss over the run)
    """
    if n_updates < 1:
        return config, opt_state, float('nan')
    schedule = LrSchedule(settings.lr, settings.lr_min, n_updates)
    total = 0.0
    for step in range(n_updates):
        x0, labels = draw_batch(rng)
        lr = max(cosine_lr(step, schedule), 1e-12)
        config, opt_state, loss = denoise_train_step(config, x0, labels, rng, opt_state, lr)
        total += loss
        if step % 500 == 0:
            logger.debug(f"denoiser update {step}/{n_updates}: loss {loss:.5f}, lr {lr:.2e}")
    return config, opt_state, total / n_updates


# -----------------------------------------------------
# Guidance and sampling
# -----------------------------------------------------

def cfg_score(eps_cond: np.ndarray, eps_uncond: np.ndarray, w: float) -> np.ndarray:
    """(1 + w) * eps_cond - w * eps_uncond."""
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    if eps_cond.shape != eps_uncond.shape:
        raise InvalidInputError(f"score shapes differ: {eps_cond.shape} vs {eps_uncond.shape}")
    return (1.0 + w) * eps_cond - w * eps_uncond


def classifier_grad_estimate(eps_cond: np.ndarray, eps_uncond: np.ndarray, sigma: float) -> np.ndarray:
    """Implicit classifier gradient -(eps_cond - eps_uncond) / sigma."""
    if not sigma > 0:
        raise InvalidInputError(f"sigma must be > 0, got {sigma}")
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    if eps_cond.shape != eps_uncond.shape:
        raise InvalidInputError(f"score shapes differ: {eps_cond.shape} vs {eps_uncond.shape}")
    return -(eps_cond - eps_uncond) / sigma


def guided_eps(config: DenoiserConfig, x: np.ndarray, sigma: float, label: ConditionLabel, w: float) -> np.ndarray:
    """Noise estimate (x - D) / sigma, guided unless the label is NULL or w = 0."""
    eps_cond = (x - denoise(config, x, sigma, int(label))) / sigma
    if label == ConditionLabel.NULL or w == 0:
        return eps_cond
    eps_uncond = (x - denoise(config, x, sigma, int(ConditionLabel.NULL))) / sigma
    return cfg_score(eps_cond, eps_uncond, w)


def sample(config: DenoiserConfig, label: ConditionLabel, w: float, schedule: NoiseSchedule, n: int,
           seed) -> np.ndarray:
    """
    Stochastic second-order sampler.

    Args:
        config: Trained denoiser
        label: OFFLINE or ONLINE; NULL runs the unconditional pathway
        w: Guidance weight
        schedule: Sigma ladder and churn settings
        n: Number of samples
        seed: Seed (int or sequence of ints)

    Returns:
        Encoded vectors, shape (n, data_dim)
    """
    label = ConditionLabel(label)
    if n < 1:
        raise InvalidInputError(f"n must be >= 1, got {n}")
    if not config.net.is_finite() or not config.label_net.is_finite():
        raise NumericError("denoiser parameters are not finite")
    rng = np.random.default_rng(seed)
    sigmas = np.append(schedule.sigmas, 0.0)
    n_steps = schedule.n_steps
    gamma_max = min(schedule.s_churn / n_steps, math.sqrt(2.0) - 1.0)

    x = rng.normal(size=(n, config.data_dim)) * sigmas[0]
    for i in range(n_steps):
        sigma_cur, sigma_next = sigmas[i], sigmas[i + 1]
        gamma = gamma_max if schedule.s_tmin <= sigma_cur <= schedule.s_tmax else 0.0
        sigma_hat = sigma_cur * (1.0 + gamma)
        if gamma > 0:
            extra = math.sqrt(sigma_hat ** 2 - sigma_cur ** 2)
            x = x + extra * schedule.s_noise * rng.normal(size=x.shape)
        d_cur = guided_eps(config, x, sigma_hat, label, w)
        x_next = x + (sigma_next - sigma_hat) * d_cur
        if sigma_next > 0:
            d_next = guided_eps(config, x_next, sigma_next, label, w)
            x_next = x + (sigma_next - sigma_hat) * (0.5 * d_cur + 0.5 * d_next)
        x = x_next
    if not np.all(np.isfinite(x)):
        raise NumericError("sampler produced non-finite values")
    return x


def generate_transitions(config: DenoiserConfig, codec: TransitionCodec, label: ConditionLabel, w: float,
                         n: int, seed, schedule: NoiseSchedule, spec: EnvSpec,
                         tag: SourceTag = None) -> TransitionBatch:
    """
    Sample n transitions and decode them into environment units.

    Actions are clipped to [-1, 1], states to the environment bounds and the
    terminal flag is thresholded at 0.5.
    """
    if tag is None:
        tag = TAG_BY_LABEL.get(ConditionLabel(label), SourceTag.SYN_ONLINE)
    if n == 0:
        return TransitionBatch.empty(codec.state_dim, codec.action_dim).with_tag(tag)
    decoded = codec.decode(sample(config, label, w, schedule, n, seed), tag)
    low, high = spec.low_array, spec.high_array
    return TransitionBatch(np.clip(decoded.states, low, high), np.clip(decoded.actions, -1.0, 1.0),
                           decoded.rewards, np.clip(decoded.next_states, low, high), decoded.terminals,
                           decoded.tags)
