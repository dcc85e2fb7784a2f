"""Small float64 MLP kernel with hand-written backprop, Adam, and a
tanh-squashed Gaussian policy head.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
ATANH_CLIP = 1e-6
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class MlpParams:
    """Weights and biases of a ReLU MLP, ``layers[i] = (W (in, out), b (out,))``."""

    def __init__(self, layers):
        self.layers = [(np.asarray(W, float), np.asarray(b, float)) for W, b in layers]
        for (W0, _), (W1, _) in zip(self.layers, self.layers[1:]):
            if W0.shape[1] != W1.shape[0]:
                raise ValueError("layer shapes do not chain")
        for W, b in self.layers:
            if b.shape != (W.shape[1],):
                raise ValueError("bias shape does not match its weight matrix")

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0][0].shape[0]] + [W.shape[1] for W, _ in self.layers]

    def arrays(self):
        for W, b in self.layers:
            yield W
            yield b

    def copy(self) -> "MlpParams":
        return MlpParams([(W.copy(), b.copy()) for W, b in self.layers])

    def zeros_like(self) -> "MlpParams":
        return MlpParams([(np.zeros_like(W), np.zeros_like(b)) for W, b in self.layers])

    def assign(self, other: "MlpParams"):
        for dst, src in zip(self.arrays(), other.arrays()):
            dst[...] = src

    def equals(self, other: "MlpParams") -> bool:
        return self.sizes == other.sizes and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def init_mlp(sizes, rng: np.random.Generator, out_scale: float = 1.0) -> MlpParams:
    """He-style uniform init for hidden layers; the output layer is scaled by ``out_scale``."""
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        bound = math.sqrt((1.0 if last else 6.0) / fan_in)
        W = rng.uniform(-bound, bound, (fan_in, fan_out))
        if last:
            W *= out_scale
        layers.append((W, np.zeros(fan_out)))
    return MlpParams(layers)


def mlp_forward(params: MlpParams, x):
    """Forward pass on a batch (B, in) or a single vector; returns (out, cache)."""
    h = np.asarray(x, float)
    single = h.ndim == 1
    if single:
        h = h[None]
    if h.shape[1] != params.layers[0][0].shape[0]:
        raise ValueError(f"input width {h.shape[1]} != {params.layers[0][0].shape[0]}")
    inputs = []
    n = len(params.layers)
    for i, (W, b) in enumerate(params.layers):
        inputs.append(h)
        h = h @ W + b
        if i < n - 1:
            h = np.maximum(h, 0.0)
    return (h[0] if single else h), (inputs, single)


def mlp_backward(params: MlpParams, cache, upstream):
    """Reverse-mode gradients: returns (parameter grads, input grad)."""
    inputs, single = cache
    g = np.asarray(upstream, float)
    if single:
        g = g[None]
    grads = []
    for i in range(len(params.layers) - 1, -1, -1):
        W, _ = params.layers[i]
        x = inputs[i]
        if g.shape != (x.shape[0], W.shape[1]):
            raise ValueError("upstream gradient shape mismatch")
        grads.append((x.T @ g, g.sum(axis=0)))
        g = g @ W.T
        if i > 0:
            g = g * (x > 0)  # x is the ReLU output of the previous layer
    grads.reverse()
    return MlpParams(grads), (g[0] if single else g)


def mlp_grad(params: MlpParams, x, upstream):
    """Forward then backward in one call; returns (parameter grads, input grad)."""
    _, cache = mlp_forward(params, x)
    return mlp_backward(params, cache, upstream)


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros(cls, params: MlpParams) -> "AdamState":
        return cls([np.zeros_like(a) for a in params.arrays()],
                   [np.zeros_like(a) for a in params.arrays()])


def adam_step(params: MlpParams, grads: MlpParams, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update, applied in place; returns (params, state)."""
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m, state.v):
        if p.shape != g.shape:
            raise ValueError("gradient shape mismatch")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# ---------------------------------------------------------------------------
# Squashed Gaussian policy head
# ---------------------------------------------------------------------------

@dataclass
class GaussianPolicyOutput:
    mu: np.ndarray
    log_std: np.ndarray
    # d log_std / d raw output (0 where the clamp is active)
    log_std_mask: np.ndarray = field(default=None, repr=False)

    @classmethod
    def from_raw(cls, raw: np.ndarray) -> "GaussianPolicyOutput":
        raw = np.asarray(raw, float)
        a = raw.shape[-1] // 2
        mu, ls = raw[..., :a], raw[..., a:]
        mask = ((ls >= LOG_STD_MIN) & (ls <= LOG_STD_MAX)).astype(float)
        return cls(mu, np.clip(ls, LOG_STD_MIN, LOG_STD_MAX), mask)

    def raw_grad(self, g_mu, g_log_std) -> np.ndarray:
        """Chain head gradients back onto the network's raw output."""
        mask = 1.0 if self.log_std_mask is None else self.log_std_mask
        return np.concatenate([g_mu, g_log_std * mask], axis=-1)


@dataclass(frozen=True)
class SquashConfig:
    scale: float | np.ndarray = 1.0
    bias: float | np.ndarray = 0.0
    clip: float = ATANH_CLIP

    def __post_init__(self):
        if np.any(np.asarray(self.scale) <= 0):
            raise ValueError("squash scale must be positive")


UNIT_SQUASH = SquashConfig()


def atanh_invert(a, squash: SquashConfig = UNIT_SQUASH):
    u = (np.asarray(a, float) - squash.bias) / squash.scale
    return np.arctanh(np.clip(u, -1.0 + squash.clip, 1.0 - squash.clip))


def _log_one_minus_tanh2(x):
    # log(1 - tanh(x)^2) = 2 (log 2 - x - softplus(-2x)), stable for large |x|
    return 2.0 * (math.log(2.0) - x - np.logaddexp(0.0, -2.0 * x))


def _sum_log_scale(squash, dim):
    return float(np.sum(np.broadcast_to(np.log(np.abs(squash.scale)), (dim,))))


def squashed_logprob(out: GaussianPolicyOutput, a, squash: SquashConfig = UNIT_SQUASH):
    """Log-density of action ``a`` under the squashed Gaussian, summed over dims.

    The Jacobian of ``a = tanh(u) * scale + bias`` is removed by subtracting
    both the ``log(1 - tanh^2)`` term and ``log|scale|``.
    """
    u = atanh_invert(a, squash)
    return _logprob_pre(out, u, squash)


def _logprob_pre(out, u, squash):
    z = (u - out.mu) * np.exp(-out.log_std)
    log_n = -0.5 * z * z - out.log_std - HALF_LOG_2PI
    dim = np.shape(u)[-1]
    return (np.sum(log_n - _log_one_minus_tanh2(u), axis=-1)
            - _sum_log_scale(squash, dim))


def squashed_logprob_grad(out: GaussianPolicyOutput, a, squash: SquashConfig = UNIT_SQUASH):
    """Gradient of :func:`squashed_logprob` w.r.t. (mu, log_std) for fixed ``a``."""
    u = atanh_invert(a, squash)
    inv = np.exp(-out.log_std)
    z = (u - out.mu) * inv
    return z * inv, z * z - 1.0


@dataclass
class SquashedSample:
    action: np.ndarray
    logprob: np.ndarray
    noise: np.ndarray
    pre_tanh: np.ndarray


def sample_squashed(out: GaussianPolicyOutput, squash: SquashConfig = UNIT_SQUASH,
                    rng: np.random.Generator | None = None, noise=None) -> SquashedSample:
    """Reparameterised sample ``tanh(mu + sigma z) * scale + bias``."""
    if noise is None:
        noise = rng.standard_normal(np.shape(out.mu))
    u = out.mu + np.exp(out.log_std) * noise
    a = np.tanh(u) * squash.scale + squash.bias
    return SquashedSample(a, _logprob_pre(out, u, squash), noise, u)


def deterministic_action(out: GaussianPolicyOutput, squash: SquashConfig = UNIT_SQUASH):
    return np.tanh(out.mu) * squash.scale + squash.bias


# ---------------------------------------------------------------------------
# Losses with analytic gradients
# ---------------------------------------------------------------------------

def bc_loss(actor: MlpParams, obs, actions, squash: SquashConfig = UNIT_SQUASH, grad=True):
    """Negative mean log-likelihood of expert actions; returns (loss, grads)."""
    raw, cache = mlp_forward(actor, obs)
    out = GaussianPolicyOutput.from_raw(raw)
    lp = squashed_logprob(out, actions, squash)
    loss = -float(np.mean(lp))
    if not grad:
        return loss, None
    g_mu, g_ls = squashed_logprob_grad(out, actions, squash)
    n = len(lp)
    g_raw = -out.raw_grad(g_mu, g_ls) / n
    grads, _ = mlp_backward(actor, cache, g_raw)
    return loss, grads


def mse_loss(net: MlpParams, inputs, targets, grad=True):
    """Mean squared error of a scalar-output network; returns (loss, grads)."""
    pred, cache = mlp_forward(net, inputs)
    err = pred[:, 0] - np.asarray(targets, float)
    loss = float(np.mean(err * err))
    if not grad:
        return loss, None
    grads, _ = mlp_backward(net, cache, (2.0 / len(err)) * err[:, None])
    return loss, grads


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------

def save_params(path, nets: dict[str, MlpParams], meta: dict | None = None):
    """Write named networks to a self-describing npz blob."""
    header = {"format": "wakesac-params-1",
              "nets": {name: p.sizes for name, p in nets.items()},
              "meta": meta or {}}
    arrays = {"__header__": np.array(json.dumps(header, sort_keys=True))}
    for name, p in nets.items():
        for i, (W, b) in enumerate(p.layers):
            arrays[f"{name}/{i}/W"] = W
            arrays[f"{name}/{i}/b"] = b
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_params(path, expect: dict[str, list[int]] | None = None):
    """Load networks written by :func:`save_params`; returns (nets, meta).

    ``expect`` maps network names to layer sizes; any mismatch raises.
    """
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        if header.get("format") != "wakesac-params-1":
            raise ValueError(f"{path}: not a parameter snapshot")
        nets = {}
        for name, sizes in header["nets"].items():
            layers = [(data[f"{name}/{i}/W"], data[f"{name}/{i}/b"]) for i in range(len(sizes) - 1)]
            nets[name] = MlpParams(layers)
            if nets[name].sizes != sizes:
                raise ValueError(f"{path}: network {name!r} does not match its header")
    if expect is not None:
        for name, sizes in expect.items():
            if name not in nets or nets[name].sizes != list(sizes):
                raise ValueError(f"{path}: expected {name!r} with sizes {list(sizes)}")
    return nets, header["meta"]
