"""Minimal feed-forward network engine with manual backpropagation.

Tanh MLPs with a linear output layer, a diagonal-Gaussian policy head with a
state-independent learnable log standard deviation, SGD and Adam optimizers,
multiplicative learning-rate decay, and a versioned binary checkpoint format.
Everything is plain numpy; gradients are exact reverse-mode, validated against
finite differences in the test suite.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, DataIntegrityError, ShapeError, TrainingFault

LOG_2PI = float(np.log(2.0 * np.pi))
# log_std is clipped to this range wherever it enters a density or gradient
LOG_STD_MIN = -7.0
LOG_STD_MAX = 2.0
DEFAULT_LOG_STD_INIT = float(np.log(0.1))

# named architectures for the contextual meta-policy
PRESETS = {
    "4x256": (256, 256, 256, 256),
    "11x128": (128,) * 11,
}


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_layers: tuple
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if self.input_dim <= 0 or self.output_dim <= 0:
            raise ConfigError("input_dim and output_dim must be positive")
        if any(h <= 0 for h in self.hidden_layers):
            raise ConfigError("hidden layer sizes must be positive")
        if self.activation != "tanh":
            raise ConfigError(f"unsupported activation {self.activation!r}")

    @property
    def layer_dims(self) -> list:
        return [self.input_dim, *self.hidden_layers, self.output_dim]


def preset_hidden_layers(name: str) -> tuple:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
    return PRESETS[name]


@dataclass
class NetworkParams:
    spec: MlpSpec
    weights: list
    biases: list
    # state-independent log standard deviation; policies only
    log_std: Optional[np.ndarray] = None

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            spec=self.spec,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            log_std=None if self.log_std is None else self.log_std.copy(),
        )

    def arrays(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        if self.log_std is not None:
            out.append(self.log_std)
        return out


@dataclass
class Gradients:
    weights: list
    biases: list
    log_std: Optional[np.ndarray] = None

    def arrays(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        if self.log_std is not None:
            out.append(self.log_std)
        return out

    def scale(self, factor: float) -> "Gradients":
        return Gradients(
            weights=[w * factor for w in self.weights],
            biases=[b * factor for b in self.biases],
            log_std=None if self.log_std is None else self.log_std * factor,
        )

    def add(self, other: "Gradients") -> "Gradients":
        log_std = None
        if self.log_std is not None or other.log_std is not None:
            a = self.log_std if self.log_std is not None else 0.0
            b = other.log_std if other.log_std is not None else 0.0
            log_std = a + b
        return Gradients(
            weights=[x + y for x, y in zip(self.weights, other.weights)],
            biases=[x + y for x, y in zip(self.biases, other.biases)],
            log_std=log_std,
        )


def init_params(spec: MlpSpec, rng: np.random.Generator, with_log_std: bool = False,
                log_std_init: float = DEFAULT_LOG_STD_INIT) -> NetworkParams:
    """Glorot-uniform weights, zero biases, optional constant log_std head."""
    dims = spec.layer_dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    log_std = np.full(spec.output_dim, log_std_init) if with_log_std else None
    return NetworkParams(spec=spec, weights=weights, biases=biases, log_std=log_std)


def _as_batch(x, input_dim: int):
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != input_dim:
        raise ShapeError(f"input shape {x.shape} incompatible with input_dim {input_dim}")
    return x, squeeze


def forward(params: NetworkParams, x):
    y, _ = forward_cache(params, x)
    return y


def forward_cache(params: NetworkParams, x):
    """Evaluate the MLP and keep per-layer inputs for the backward pass.

    Accepts a single input vector or a batch; the output matches. The cache
    stores the (batched) input of every layer; hidden-layer inputs are tanh
    outputs, which is all the backward pass needs.
    """
    batch, squeeze = _as_batch(x, params.spec.input_dim)
    inputs = [batch]
    h = batch
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        h = z if i == last else np.tanh(z)
        if i != last:
            inputs.append(h)
    y = h[0] if squeeze else h
    return y, {"inputs": inputs, "squeeze": squeeze}


def backward(params: NetworkParams, cache: dict, grad_out) -> Gradients:
    """Reverse-mode gradients of sum(grad_out * output) w.r.t. weights/biases.

    ``grad_out`` is the upstream gradient at the network output, shaped like
    the forward output. log_std does not flow through the MLP; its gradient
    slot is left None for the caller to fill.
    """
    inputs = cache["inputs"]
    g = np.asarray(grad_out, dtype=np.float64)
    if cache["squeeze"]:
        g = g[None, :]
    g_weights = [None] * len(params.weights)
    g_biases = [None] * len(params.biases)
    for i in range(len(params.weights) - 1, -1, -1):
        a_in = inputs[i]
        g_weights[i] = a_in.T @ g
        g_biases[i] = g.sum(axis=0)
        if i > 0:
            # a_in is a tanh output, so d tanh = 1 - a_in^2
            g = (g @ params.weights[i].T) * (1.0 - a_in * a_in)
    return Gradients(weights=g_weights, biases=g_biases)


def effective_log_std(params: NetworkParams) -> np.ndarray:
    if params.log_std is None:
        raise ConfigError("network has no log_std head")
    return np.clip(params.log_std, LOG_STD_MIN, LOG_STD_MAX)


def gaussian_log_prob(params: NetworkParams, obs, action):
    """Diagonal-Gaussian log density of ``action`` given mean = forward(obs)."""
    mean = forward(params, obs)
    log_std = effective_log_std(params)
    return gaussian_log_prob_from_mean(mean, log_std, action)


def gaussian_log_prob_from_mean(mean, log_std, action):
    mean = np.asarray(mean, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    z = (action - mean) * np.exp(-log_std)
    return -0.5 * (z * z).sum(axis=-1) - log_std.sum() - 0.5 * len(log_std) * LOG_2PI


def gaussian_entropy(log_std) -> float:
    """Entropy of the diagonal Gaussian: sum(log_std) + k/2 * log(2*pi*e)."""
    log_std = np.asarray(log_std, dtype=np.float64)
    return float(log_std.sum() + 0.5 * len(log_std) * (LOG_2PI + 1.0))


def gaussian_log_prob_backward(params: NetworkParams, obs, action):
    """Log probs plus exact gradients of their SUM over the batch.

    Returns (log_probs, Gradients). Callers weighting per-sample terms use
    ``gaussian_weighted_log_prob_backward`` instead.
    """
    n = np.asarray(obs).shape[0] if np.asarray(obs).ndim == 2 else 1
    return gaussian_weighted_log_prob_backward(params, obs, action, np.ones(n))


def gaussian_weighted_log_prob_backward(params: NetworkParams, obs, action, weights):
    """Per-sample log probs and gradients of sum_i weights_i * log_prob_i.

    The clip on log_std is honored: coordinates pinned at the clip boundary
    get zero gradient.
    """
    obs_b, squeeze = _as_batch(obs, params.spec.input_dim)
    action_b, _ = _as_batch(action, params.spec.output_dim)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if weights.shape[0] != obs_b.shape[0]:
        raise ShapeError("one weight per sample required")
    mean, cache = forward_cache(params, obs_b)
    log_std = effective_log_std(params)
    inv_var = np.exp(-2.0 * log_std)
    diff = action_b - mean
    z2 = diff * diff * inv_var
    log_probs = -0.5 * z2.sum(axis=1) - log_std.sum() - 0.5 * len(log_std) * LOG_2PI
    # d logp / d mean = (a - mu) / sigma^2
    grad_mean = weights[:, None] * diff * inv_var
    grads = backward(params, cache, grad_mean)
    # d logp / d log_std_j = z_j^2 - 1, frozen where the clip binds
    active = (params.log_std > LOG_STD_MIN) & (params.log_std < LOG_STD_MAX)
    grads.log_std = (weights[:, None] * (z2 - 1.0)).sum(axis=0) * active
    if squeeze:
        return float(log_probs[0]), grads
    return log_probs, grads


# ---------------------------------------------------------------------------
# optimizers

@dataclass
class OptimizerState:
    algorithm: str
    learning_rate: float
    decay_factor: float = 0.8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: Optional[list] = None
    v: Optional[list] = None


def init_optimizer(params: NetworkParams, algorithm: str = "adam",
                   learning_rate: float = 1e-3, decay_factor: float = 0.8) -> OptimizerState:
    if algorithm not in ("sgd", "adam"):
        raise ConfigError(f"unknown optimizer {algorithm!r}")
    if learning_rate <= 0:
        raise ConfigError("learning_rate must be positive")
    if not (0.0 < decay_factor <= 1.0):
        raise ConfigError("decay_factor must be in (0, 1]")
    state = OptimizerState(algorithm=algorithm, learning_rate=learning_rate,
                           decay_factor=decay_factor)
    if algorithm == "adam":
        state.m = [np.zeros_like(a) for a in params.arrays()]
        state.v = [np.zeros_like(a) for a in params.arrays()]
    return state


def optimizer_step(params: NetworkParams, grads: Gradients,
                   opt_state: OptimizerState) -> NetworkParams:
    """One minimization step in place; returns ``params`` for chaining."""
    garrays = grads.arrays()
    parrays = params.arrays()
    if len(garrays) != len(parrays):
        raise ShapeError("gradient structure does not match parameters")
    for g in garrays:
        if not np.isfinite(g).all():
            raise TrainingFault("non-finite gradient")
    lr = opt_state.learning_rate
    if opt_state.algorithm == "sgd":
        for p, g in zip(parrays, garrays):
            p -= lr * g
    else:
        opt_state.step_count += 1
        t = opt_state.step_count
        b1, b2, eps = opt_state.beta1, opt_state.beta2, opt_state.eps
        for p, g, m, v in zip(parrays, garrays, opt_state.m, opt_state.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1 ** t)
            v_hat = v / (1.0 - b2 ** t)
            p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params


def decay_learning_rate(opt_state: OptimizerState) -> OptimizerState:
    opt_state.learning_rate *= opt_state.decay_factor
    return opt_state


# ---------------------------------------------------------------------------
# checkpoint format

CHECKPOINT_MAGIC = b"MLPCKPT\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: NetworkParams) -> None:
    """Versioned binary layout: magic, version, JSON header, float64 LE data.

    Data order: per layer W (row-major, in x out) then b, then log_std if
    present. Stable byte-for-byte for identical parameters.
    """
    header = {
        "spec": {
            "input_dim": params.spec.input_dim,
            "hidden_layers": list(params.spec.hidden_layers),
            "output_dim": params.spec.output_dim,
            "activation": params.spec.activation,
        },
        "has_log_std": params.log_std is not None,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for arr in params.arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> NetworkParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataIntegrityError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise DataIntegrityError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    try:
        header = json.loads(blob[off:off + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataIntegrityError(f"{path}: corrupt checkpoint header") from exc
    off += header_len
    spec = MlpSpec(
        input_dim=header["spec"]["input_dim"],
        hidden_layers=tuple(header["spec"]["hidden_layers"]),
        output_dim=header["spec"]["output_dim"],
        activation=header["spec"]["activation"],
    )
    dims = spec.layer_dims
    weights, biases = [], []

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        end = off + count * 8
        if end > len(blob):
            raise DataIntegrityError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(blob[off:end], dtype="<f8").astype(np.float64).reshape(shape)
        off = end
        return arr

    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(take((fan_in, fan_out)))
        biases.append(take((fan_out,)))
    log_std = take((spec.output_dim,)) if header["has_log_std"] else None
    if off != len(blob):
        raise DataIntegrityError(f"{path}: trailing bytes in checkpoint")
    return NetworkParams(spec=spec, weights=weights, biases=biases, log_std=log_std)
