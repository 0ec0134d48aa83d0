"""Adaptive tuning of proposal kernels against sampling losses.

Two losses are implemented: the forward Kullback-Leibler loss (Monte Carlo
mean of -log q over a buffer of chain states, driving the flow toward the
target) and the penalized expected-squared-jump-distance loss lambda/lag -
lag/lambda, which rewards kernels that make large accepted moves.  The
adaptation loop alternates a block of sampler steps with one optimizer
update, keeping a sliding window of recently accepted states as the
training buffer.
"""

import hashlib
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InputError, NumericError
from .flows import ComposedFlow
from .kernels import ChainState, IndependentFlowKernel, MixtureKernel, init_chain_state
from .models import TargetModel


@dataclass(frozen=True)
class LossSpec:
    """Which loss drives adaptation; ``lam`` is the ESJD scale parameter."""

    kind: str
    lam: float = 1.0

    def __post_init__(self):
        if self.kind not in ("forward_kl", "esjd"):
            raise InputError(f"unknown loss kind {self.kind!r}")
        if self.kind == "esjd" and self.lam <= 0:
            raise InputError("lambda must be positive for the esjd loss")


def forward_kl_loss(flow: ComposedFlow, sample_buffer: np.ndarray):
    """Buffer estimate of the flow-dependent part of KL(target || flow).

    Returns (value, gradient-over-flat-flow-parameters); the value is the
    mean of -log q at the buffer points, so duplicating the buffer changes
    nothing and the gradient vanishes in expectation when q matches the
    buffer's sampling distribution.
    """
    buf = np.atleast_2d(np.asarray(sample_buffer, dtype=float))
    if buf.shape[0] == 0:
        raise InputError("sample buffer must be nonempty")
    value = flow.neg_logdensity_value(buf)
    grad = flow.param_grad_neg_logdensity(buf)
    return value, grad


def _point_rng(seed: int, x: np.ndarray) -> np.random.Generator:
    # proposal randomness is keyed to the point's value, not its buffer slot,
    # so the jump-distance estimator is invariant under buffer permutation
    digest = hashlib.sha256(np.ascontiguousarray(x, dtype=float).tobytes()).digest()
    return np.random.default_rng([seed & 0xFFFFFFFF, int.from_bytes(digest[:8], "little")])


def expected_squared_jump(kernel, target: TargetModel, sample_buffer: np.ndarray,
                          seed: int = 0) -> float:
    """Acceptance-weighted mean squared jump from one fresh proposal per point."""
    buf = np.atleast_2d(np.asarray(sample_buffer, dtype=float))
    if buf.shape[0] == 0:
        raise InputError("sample buffer must be nonempty")
    if hasattr(kernel, "propose_batch"):
        nus = np.stack([_point_rng(seed, x).standard_normal(target.dim) for x in buf])
        X1, log_alpha = kernel.propose_batch(target, buf, nus)
        acc = np.exp(np.minimum(log_alpha, 0.0))
        jumps = np.einsum("nd,nd->n", X1 - buf, X1 - buf)
        return float(np.mean(jumps * acc))
    total = 0.0
    for x in buf:
        prop = kernel.propose(target, x, _point_rng(seed, x))
        acc = 0.0 if prop.divergent else float(np.exp(min(prop.log_alpha, 0.0)))
        d = prop.x - x
        total += float(d @ d) * acc
    return total / buf.shape[0]


def esjd_loss(kernel, target: TargetModel, sample_buffer: np.ndarray,
              lam: float, seed: int = 0) -> float:
    """Penalized jump-distance loss lambda/lag - lag/lambda (lower is better).

    A kernel that never moves has lag 0; the loss returns +inf as an explicit
    sentinel in that case.
    """
    if lam <= 0:
        raise InputError("lambda must be positive")
    lag = expected_squared_jump(kernel, target, sample_buffer, seed=seed)
    if lag == 0.0:
        return float("inf")
    return lam / lag - lag / lam


class AdamOptimizer:
    """Standard Adam on a flat parameter vector."""

    def __init__(self, lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def update(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class AdaptConfig:
    """Knobs for the alternating sample/update loop."""

    steps_per_round: int = 10
    learning_rate: float = 0.02
    buffer_capacity: int = 4096
    init_points: list | None = None
    seed: int = 0
    fd_step: float = 1e-4
    esjd_batch: int = 64
    grad_clip: float = 10.0


@dataclass
class AdaptResult:
    kernel: object
    chains: list[np.ndarray]
    loss_trace: np.ndarray

    @property
    def draws(self) -> np.ndarray:
        return np.concatenate(self.chains, axis=0) if self.chains else np.zeros((0, 0))


def _kernel_flow(kernel) -> ComposedFlow | None:
    if isinstance(kernel, IndependentFlowKernel):
        return kernel.flow
    if isinstance(kernel, MixtureKernel) and isinstance(kernel.global_kernel,
                                                        IndependentFlowKernel):
        return kernel.global_kernel.flow
    return None


def _with_flow(kernel, flow: ComposedFlow):
    if isinstance(kernel, IndependentFlowKernel):
        return IndependentFlowKernel(flow)
    return MixtureKernel(local=kernel.local,
                         global_kernel=IndependentFlowKernel(flow),
                         local_per_global=kernel.local_per_global)


def _fd_gradient(loss_fn, params: np.ndarray, step: float) -> np.ndarray:
    g = np.zeros_like(params)
    for i in range(params.size):
        e = np.zeros_like(params)
        e[i] = step
        g[i] = (loss_fn(params + e) - loss_fn(params - e)) / (2.0 * step)
    return g


def adapt(kernel, target: TargetModel, loss: LossSpec, n_rounds: int,
          config: AdaptConfig | None = None) -> AdaptResult:
    """Alternate sampler blocks with optimizer updates; returns the tuned
    kernel, the chains generated along the way, and the per-round loss trace.

    The forward-KL loss requires a kernel carrying a flow density (an
    independent-flow kernel, possibly inside a mixture); the ESJD loss works
    for any kernel exposing a flat parameter vector.
    """
    config = config or AdaptConfig()
    flow = _kernel_flow(kernel)
    if loss.kind == "forward_kl" and flow is None:
        raise ConfigurationError("forward_kl adaptation needs a flow-density kernel")
    if loss.kind == "esjd" and not hasattr(kernel, "params"):
        raise ConfigurationError("esjd adaptation needs a parametric kernel")

    init_points = config.init_points or [np.zeros(target.dim)]
    seeds = np.random.SeedSequence(config.seed).spawn(len(init_points) + 1)
    states = [init_chain_state(target, np.asarray(p, dtype=float),
                               seeds[i]) for i, p in enumerate(init_points)]
    round_rng = np.random.default_rng(seeds[-1])

    buffer: deque = deque(maxlen=config.buffer_capacity)
    for st in states:
        buffer.append(st.x.copy())
    chains: list[list[np.ndarray]] = [[] for _ in states]
    trace = []
    optimizer = AdamOptimizer(lr=config.learning_rate)

    for _ in range(n_rounds):
        for ci, st in enumerate(states):
            for _ in range(config.steps_per_round):
                st, info = kernel.step(target, st)
                chains[ci].append(st.x.copy())
                if info.accepted:
                    buffer.append(st.x.copy())
            states[ci] = st
        buf = np.array(buffer)
        if loss.kind == "forward_kl":
            value, grad = forward_kl_loss(_kernel_flow(kernel), buf)
            if not np.isfinite(value):
                raise NumericError(f"forward-KL loss diverged; trace={trace}")
            new_flow = _kernel_flow(kernel).with_params(
                optimizer.update(_kernel_flow(kernel).params, grad))
            kernel = _with_flow(kernel, new_flow)
        else:
            if buf.shape[0] > config.esjd_batch:
                idx = round_rng.choice(buf.shape[0], size=config.esjd_batch,
                                       replace=False)
                buf = buf[idx]

            def loss_at(vec) -> float:
                return esjd_loss(kernel.with_params(vec), target, buf,
                                 loss.lam, seed=config.seed)

            params = kernel.params
            value = loss_at(params)
            if not np.isfinite(value):
                raise NumericError(f"esjd loss non-finite; trace={trace}")
            grad = _fd_gradient(loss_at, params, config.fd_step)
            gnorm = float(np.linalg.norm(grad))
            if gnorm > config.grad_clip:
                grad = grad * (config.grad_clip / gnorm)
            kernel = kernel.with_params(optimizer.update(params, grad))
        trace.append(value)

    chain_arrays = [np.array(c).reshape(-1, target.dim) for c in chains]
    return AdaptResult(kernel=kernel, chains=chain_arrays,
                       loss_trace=np.array(trace))
