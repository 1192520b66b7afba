# -*- coding: utf-8 -*-
"""
Minimal dense numeric kernel.

A residual ReLU MLP with exact reverse-mode gradients, the Adam optimizer,
a cosine learning-rate schedule and a plain-text parameter container. Every
trained network in cfdglib (critic, value, policy, denoiser) is built on it.
All arithmetic is float64.
"""
import math
import os
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from cfdglib.lab_def import InvalidInputError, LabIOError, NumericError

PARAMS_HEADER = '# cfdg-params v1'


@dataclass
class MlpParams:
    """
    Weights and biases of a ReLU MLP.

    Layer k computes z = W_k h + b_k. Hidden layers apply ReLU; the last
    layer is linear. With residual=True, hidden layers other than the first
    add their input to their activation when the shapes match.
    """
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    residual: bool = True

    def __post_init__(self):
        if len(self.weights) == 0 or len(self.weights) != len(self.biases):
            raise InvalidInputError("MLP needs one bias per weight matrix and at least one layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise InvalidInputError(f"layer {k}: weight {w.shape} and bias {b.shape} do not agree")
            if k > 0 and w.shape[1] != self.weights[k - 1].shape[0]:
                raise InvalidInputError(
                    f"layer {k}: input dim {w.shape[1]} != output dim {self.weights[k - 1].shape[0]} of layer {k - 1}")

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def hidden_width(self) -> int:
        return self.weights[0].shape[0]

    def tensors(self) -> List[np.ndarray]:
        """Flat tensor list in layer order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def replace_tensors(self, tensors: Sequence[np.ndarray]) -> 'MlpParams':
        return MlpParams(list(tensors[0::2]), list(tensors[1::2]), self.residual)

    def copy(self) -> 'MlpParams':
        return self.replace_tensors([t.copy() for t in self.tensors()])

    def zeros_like(self) -> 'MlpParams':
        return self.replace_tensors([np.zeros_like(t) for t in self.tensors()])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors())


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, residual: bool = True,
             final_scale: float = 1.0) -> MlpParams:
    """
    Create an MLP with He-initialised hidden layers and zero biases.

    Args:
        sizes: Layer widths [in, hidden..., out]
        rng: Random generator
        residual: Enable skip connections between equal-width hidden layers
        final_scale: Multiplier on the last layer's initial weights

    Returns:
        Freshly initialised MlpParams
    """
    if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
        raise InvalidInputError(f"invalid layer sizes {list(sizes)}")
    weights, biases = [], []
    n_layers = len(sizes) - 1
    for k in range(n_layers):
        fan_in, fan_out = int(sizes[k]), int(sizes[k + 1])
        if k < n_layers - 1:
            std = math.sqrt(2.0 / fan_in)
        else:
            std = final_scale * math.sqrt(1.0 / fan_in)
        weights.append(rng.normal(0.0, std, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, residual)


def build_mlp(in_dim: int, out_dim: int, hidden_width: int, depth: int, rng: np.random.Generator,
              residual: bool = True, final_scale: float = 1.0) -> MlpParams:
    """MLP with `depth` linear layers, all hidden layers `hidden_width` wide."""
    if depth < 1:
        raise InvalidInputError(f"depth must be >= 1, got {depth}")
    sizes = [in_dim] + [hidden_width] * (depth - 1) + [out_dim]
    return init_mlp(sizes, rng, residual, final_scale)


def _skips(params: MlpParams, k: int, h: np.ndarray, a: np.ndarray) -> bool:
    # first and last layers never skip
    return params.residual and 0 < k < params.depth - 1 and h.shape == a.shape


def _as_batch(params: MlpParams, x) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise InvalidInputError(f"input dim {x.shape[-1]} != network input dim {params.in_dim}")
    return x, single


def mlp_forward_cached(params: MlpParams, x) -> Tuple[np.ndarray, list]:
    """
    Forward pass that keeps what the backward pass needs.

    Args:
        params: Network parameters
        x: Input vector or (n, in_dim) batch

    Returns:
        Tuple of (output batch (n, out_dim), cache)
    """
    h, _ = _as_batch(params, x)
    cache = []
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        if not np.all(np.isfinite(z)):
            raise NumericError("non-finite pre-activation", layer=k)
        cache.append((h, z))
        if k == params.depth - 1:
            h = z
        else:
            a = np.maximum(z, 0.0)
            if _skips(params, k, h, a):
                a = a + h
            h = a
    return h, cache


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """
    Evaluate the network. A 1-D input gives a 1-D output, a batch a batch.
    """
    _, single = _as_batch(params, x)
    y, _ = mlp_forward_cached(params, x)
    return y[0] if single else y


def mlp_backward(params: MlpParams, cache: list, grad_out: np.ndarray) -> Tuple[MlpParams, np.ndarray]:
    """
    Reverse-mode pass.

    Args:
        params: Network parameters used in the forward pass
        cache: Cache returned by mlp_forward_cached
        grad_out: dL/dy, shape (n, out_dim)

    Returns:
        Tuple of (parameter gradients shaped like params, dL/dx of shape (n, in_dim))
    """
    g = np.asarray(grad_out, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    grad_w: List[np.ndarray] = [None] * params.depth
    grad_b: List[np.ndarray] = [None] * params.depth
    for k in range(params.depth - 1, -1, -1):
        h, z = cache[k]
        w = params.weights[k]
        last = k == params.depth - 1
        g_z = g if last else g * (z > 0.0)
        grad_w[k] = g_z.T @ h
        grad_b[k] = g_z.sum(axis=0)
        g_h = g_z @ w
        if not last and _skips(params, k, h, z):
            g_h = g_h + g
        if not np.all(np.isfinite(g_h)) or not np.all(np.isfinite(grad_w[k])):
            raise NumericError("non-finite gradient", layer=k)
        g = g_h
    return MlpParams(grad_w, grad_b, params.residual), g


def mlp_grad(params: MlpParams, loss: Callable[[np.ndarray], Tuple[float, np.ndarray]],
             x) -> Tuple[float, MlpParams]:
    """
    Exact gradients of a scalar loss of the network output.

    Args:
        params: Network parameters
        loss: Callable mapping the (n, out_dim) output to (value, dvalue/doutput)
        x: Input vector or batch

    Returns:
        Tuple of (loss value, gradients shaped like params)
    """
    y, cache = mlp_forward_cached(params, x)
    value, grad_out = loss(y)
    grad_out = np.broadcast_to(np.asarray(grad_out, dtype=np.float64), y.shape)
    grads, _ = mlp_backward(params, cache, grad_out)
    return float(value), grads


# -----------------------------------------------------
# Adam
# -----------------------------------------------------

@dataclass
class AdamState:
    """Adam moments, one array per parameter tensor."""
    first_moment: List[np.ndarray]
    second_moment: List[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params, beta1: float = 0.9, beta2: float = 0.999,
                   epsilon: float = 1e-8) -> 'AdamState':
        tensors = params.tensors()
        return cls([np.zeros_like(t) for t in tensors], [np.zeros_like(t) for t in tensors],
                   0, beta1, beta2, epsilon)


def adam_step(params, grads, state: AdamState, lr: float):
    """
    One bias-corrected Adam update.

    Works on any parameter container exposing tensors()/replace_tensors()
    (MlpParams, DenoiserConfig). Inputs are left untouched.

    Args:
        params: Current parameters
        grads: Gradients, same container type and shapes
        state: Optimizer state tracking params
        lr: Learning rate (> 0)

    Returns:
        Tuple of (updated params, updated AdamState)
    """
    if not lr > 0:
        raise InvalidInputError(f"learning rate must be > 0, got {lr}")
    p_list, g_list = params.tensors(), grads.tensors()
    if len(p_list) != len(g_list) or len(p_list) != len(state.first_moment):
        raise InvalidInputError("parameter, gradient and optimizer state tensor counts differ")
    for i, (p, g, m) in enumerate(zip(p_list, g_list, state.first_moment)):
        if p.shape != g.shape or p.shape != m.shape:
            raise InvalidInputError(f"tensor {i}: shapes {p.shape}, {g.shape}, {m.shape} differ")

    t = state.step_count + 1
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_list, g_list, state.first_moment, state.second_moment):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        step = lr * (m / corr1) / (np.sqrt(v / corr2) + eps)
        new_p.append(p - step)
        new_m.append(m)
        new_v.append(v)
    if not all(np.all(np.isfinite(p)) for p in new_p):
        raise NumericError("Adam update produced non-finite parameters")
    new_state = AdamState(new_m, new_v, t, b1, b2, eps)
    return params.replace_tensors(new_p), new_state


# -----------------------------------------------------
# Learning-rate schedule
# -----------------------------------------------------

@dataclass(frozen=True)
class LrSchedule:
    lr_max: float
    lr_min: float
    total_steps: int

    def __post_init__(self):
        if not self.lr_max > 0:
            raise InvalidInputError(f"lr_max must be > 0, got {self.lr_max}")
        if self.lr_min < 0 or self.lr_min > self.lr_max:
            raise InvalidInputError(f"lr_min must be in [0, lr_max], got {self.lr_min}")
        if self.total_steps < 1:
            raise InvalidInputError(f"total_steps must be >= 1, got {self.total_steps}")


def cosine_lr(step: int, schedule: LrSchedule) -> float:
    """
    Cosine-annealed learning rate: lr_max at step 0, lr_min at total_steps.
    """
    if step < 0 or step > schedule.total_steps:
        raise InvalidInputError(f"step {step} outside [0, {schedule.total_steps}]")
    frac = step / schedule.total_steps
    return schedule.lr_min + 0.5 * (schedule.lr_max - schedule.lr_min) * (1.0 + math.cos(math.pi * frac))


# -----------------------------------------------------
# Serialization
# -----------------------------------------------------

def _format_values(arr: np.ndarray) -> str:
    return ' '.join(repr(float(v)) for v in arr.ravel(order='C'))


def networks_to_text(networks: Dict[str, MlpParams]) -> str:
    """
    Serialize named networks into the flat text container.

    One `@net <name> residual=<0|1>` line per network, followed by one line
    per tensor: `<layer> <weight|bias> <shape> <row-major values>`.
    """
    lines = [PARAMS_HEADER]
    for name, params in networks.items():
        if any(c.isspace() for c in name):
            raise InvalidInputError(f"network name '{name}' contains whitespace")
        lines.append(f"@net {name} residual={int(params.residual)}")
        for k, (w, b) in enumerate(zip(params.weights, params.biases)):
            lines.append(f"{k} weight {w.shape[0]}x{w.shape[1]} {_format_values(w)}")
            lines.append(f"{k} bias {b.shape[0]} {_format_values(b)}")
    return '\n'.join(lines) + '\n'


def networks_from_text(text: str) -> Dict[str, MlpParams]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != PARAMS_HEADER:
        raise InvalidInputError("not a cfdg parameter file (missing header)")
    networks: Dict[str, MlpParams] = {}
    name, residual, weights, biases = None, True, [], []

    def _flush():
        if name is not None:
            networks[name] = MlpParams(weights, biases, residual)

    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] == '@net':
            _flush()
            name = parts[1]
            residual = parts[2] == 'residual=1'
            weights, biases = [], []
            continue
        if name is None:
            raise InvalidInputError("tensor line before any @net line")
        layer, role, shape = int(parts[0]), parts[1], parts[2]
        dims = tuple(int(d) for d in shape.split('x'))
        values = np.array([float(v) for v in parts[3:]], dtype=np.float64)
        if values.size != int(np.prod(dims)):
            raise InvalidInputError(f"{name} layer {layer} {role}: expected {np.prod(dims)} values, got {values.size}")
        target = weights if role == 'weight' else biases
        if layer != len(target):
            raise InvalidInputError(f"{name}: {role} of layer {layer} out of order")
        target.append(values.reshape(dims))
    _flush()
    return networks


def save_networks(path: str, networks: Dict[str, MlpParams]):
    try:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(networks_to_text(networks))
    except OSError as e:
        raise LabIOError(f"cannot write parameters to {path}: {e}")


def load_networks(path: str) -> Dict[str, MlpParams]:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        raise LabIOError(f"cannot read parameters from {path}: {e}")
    return networks_from_text(text)
