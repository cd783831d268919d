"""The recurrent flow estimator ``u(chi, z) -> (log T, z_next)``.

A dense feed-forward network: hidden layers use a configurable activation
(tanh by default), the output layer applies CeLU with ``alpha = -12`` to all
``1 + Z`` outputs. The latent part of the output is fed back as input for the
next year.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import NumericError, StructuralError, UsageError

ACTIVATIONS = ("tanh", "sigmoid", "relu", "softplus", "linear")


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    latent_dim: int = 100
    depth: int = 7
    width: int = 60
    activation: str = "tanh"
    final_alpha: float = -12.0

    def __post_init__(self):
        if self.input_dim < 1 or self.latent_dim < 0 or self.depth < 0 or self.width < 1:
            raise StructuralError(f"invalid architecture {self}")
        if self.activation not in ACTIVATIONS:
            raise StructuralError(f"unknown activation {self.activation!r}")
        if self.final_alpha == 0:
            raise StructuralError("CeLU alpha must be non-zero")

    @property
    def n_inputs(self):
        return self.input_dim + self.latent_dim

    @property
    def n_outputs(self):
        return 1 + self.latent_dim

    @property
    def layer_sizes(self):
        return [self.n_inputs] + [self.width] * self.depth + [self.n_outputs]

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "latent_dim": self.latent_dim,
            "depth": self.depth,
            "width": self.width,
            "activation": self.activation,
            "final_alpha": self.final_alpha,
        }


@dataclass(frozen=True)
class NetworkParameters:
    """Weights ``W[l]`` of shape ``(fan_in, fan_out)`` and biases ``b[l]``."""

    arch: Architecture
    weights: tuple
    biases: tuple

    def __post_init__(self):
        sizes = self.arch.layer_sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise StructuralError("number of layers does not match the architecture")
        for n, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[n], sizes[n + 1]) or b.shape != (sizes[n + 1],):
                raise StructuralError(f"layer {n} has shapes {w.shape}, {b.shape}")

    def arrays(self):
        """Parameters in canonical order ``W0, b0, W1, b1, ...``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_arrays(cls, arch, arrays):
        return cls(arch, tuple(arrays[0::2]), tuple(arrays[1::2]))

    @classmethod
    def from_flat(cls, arch, flat):
        flat = np.asarray(flat, dtype=float)
        sizes = arch.layer_sizes
        arrays, pos = [], 0
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            arrays.append(flat[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out))
            pos += fan_in * fan_out
            arrays.append(flat[pos:pos + fan_out].copy())
            pos += fan_out
        if pos != flat.size:
            raise StructuralError(f"expected {pos} parameters, got {flat.size}")
        return cls.from_arrays(arch, arrays)

    @property
    def size(self):
        return sum(a.size for a in self.arrays())


def init_params(arch, seed):
    """Glorot-uniform weights in ``+-sqrt(6 / (fan_in + fan_out))``, zero biases."""
    rng = np.random.default_rng(seed)
    sizes = arch.layer_sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return NetworkParameters(arch, tuple(weights), tuple(biases))


def param_leaves(params, dtype=np.float64):
    """Leaf tensors for the parameters plus their (possibly cast) views for compute."""
    leaves = [ad.Tensor(a, requires_grad=True) for a in params.arrays()]
    return leaves, [ad.astype(t, dtype) for t in leaves]


def apply_network(arch, tensors, blocks):
    """Run the network on input ``blocks`` whose widths sum to ``arch.n_inputs``.

    The first layer multiplies each block by the matching rows of ``W0``; this
    is the same affine map as on the concatenated input, but constant blocks
    never get an input gradient computed.
    """
    width = sum(b.shape[-1] for b in blocks)
    if width != arch.n_inputs:
        raise StructuralError(f"network expects {arch.n_inputs} inputs, got {width}")
    n_layers = len(tensors) // 2
    h = blocks
    for layer in range(n_layers):
        last = layer == n_layers - 1
        act = "celu" if last else arch.activation
        h = ad.dense(h, tensors[2 * layer], tensors[2 * layer + 1], act, arch.final_alpha)
        h = [h]
    return h[0]


@dataclass
class GradientTape:
    """Recorded forward call; :func:`backward` may consume it once."""

    arch: Architecture
    output: ad.Tensor
    leaves: list
    chi: ad.Tensor
    z: ad.Tensor
    batched: bool
    consumed: bool = False


@dataclass
class Gradients:
    params: list
    chi: np.ndarray
    z: np.ndarray

    def as_parameters(self, arch):
        return NetworkParameters.from_arrays(arch, self.params)


def forward(params, chi, z=None):
    """Evaluate the network on one edge (1-D inputs) or a batch of edges (2-D).

    Returns ``(log_flow, z_next, tape)``.
    """
    arch = params.arch
    chi = np.asarray(chi, dtype=float)
    batched = chi.ndim == 2
    chi2 = np.atleast_2d(chi)
    if z is None:
        z = np.zeros((chi2.shape[0], arch.latent_dim))
    z2 = np.asarray(z, dtype=float).reshape(chi2.shape[0], arch.latent_dim)
    if chi2.shape[1] != arch.input_dim:
        raise StructuralError(f"covariate vector has length {chi2.shape[1]}, expected {arch.input_dim}")
    if not (np.all(np.isfinite(chi2)) and np.all(np.isfinite(z2))):
        raise NumericError("non-finite network input")
    leaves, tensors = param_leaves(params)
    chi_t = ad.Tensor(chi2, requires_grad=True)
    z_t = ad.Tensor(z2, requires_grad=True)
    out = apply_network(arch, tensors, [chi_t, z_t])
    log_flow = out.data[:, 0]
    z_next = out.data[:, 1:]
    tape = GradientTape(arch, out, leaves, chi_t, z_t, batched)
    if not batched:
        return float(log_flow[0]), z_next[0].copy(), tape
    return log_flow.copy(), z_next.copy(), tape


def backward(tape, grad_log_flow, grad_z_next=None):
    """Exact gradients of ``sum(grad_log_flow * log_flow + grad_z_next . z_next)``."""
    if tape.consumed:
        raise UsageError("gradient tape has already been consumed")
    tape.consumed = True
    n = tape.output.shape[0]
    seed = np.zeros(tape.output.shape)
    seed[:, 0] = np.asarray(grad_log_flow, dtype=float).reshape(n)
    if grad_z_next is not None and tape.arch.latent_dim:
        seed[:, 1:] = np.asarray(grad_z_next, dtype=float).reshape(n, tape.arch.latent_dim)
    for leaf in tape.leaves + [tape.chi, tape.z]:
        leaf.grad = None
    ad.backward(tape.output, seed)
    grads = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in tape.leaves]
    g_chi = tape.chi.grad if tape.chi.grad is not None else np.zeros(tape.chi.shape)
    g_z = tape.z.grad if tape.z.grad is not None else np.zeros(tape.z.shape)
    if not tape.batched:
        g_chi, g_z = g_chi[0], g_z[0]
    return Gradients(grads, g_chi, g_z)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def optimizer_step(state, params, grads):
    """One Adam update. Returns new parameters; ``state`` is advanced in place.

    ``params`` and ``grads`` are matching lists of arrays.
    """
    for n, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            bad = int((~np.isfinite(g)).sum())
            raise NumericError(f"non-finite gradient in parameter array {n} ({bad} entries)")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    out = []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.lr == 0:
            out.append(p.copy())
            continue
        out.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
    return out
