"""Metropolis-Hastings kernels: independent-flow, HMC, MALA, map-augmented
HMC, involutive volume-preserving proposals, and local/global mixtures.

Every kernel is immutable during a run; a step is a pure function of
(kernel, target, chain state), where the chain state carries its own rng
stream, so replaying a seed reproduces a trajectory bit-exactly.
"""

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import ConfigurationError, InputError, NumericError
from .flows import ComposedFlow
from .models import TargetModel

DIVERGENCE_ENERGY = 1000.0


@dataclass
class ChainState:
    """Current chain position with its cached potential and rng stream."""

    x: np.ndarray
    potential: float
    step_index: int
    rng: np.random.Generator


@dataclass(frozen=True)
class StepInfo:
    accepted: bool
    log_alpha: float
    divergent: bool
    extras: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Proposal:
    x: np.ndarray
    log_alpha: float
    divergent: bool = False
    extras: dict = field(default_factory=dict)


def init_chain_state(target: TargetModel, x0, seed: int) -> ChainState:
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.size != target.dim:
        raise InputError(f"x0 has dim {x0.size}, target expects {target.dim}")
    return ChainState(x=x0, potential=float(target.potential(x0)),
                      step_index=0, rng=np.random.default_rng(seed))


def _finish_step(target: TargetModel, state: ChainState,
                 prop: Proposal) -> tuple[ChainState, StepInfo]:
    """Shared accept/reject bookkeeping; always consumes one uniform."""
    u = state.rng.uniform()
    ok = np.isfinite(prop.log_alpha) and not prop.divergent
    accepted = bool(ok and np.log(u) < prop.log_alpha)
    if accepted:
        new_pot = prop.extras.get("potential_proposal")
        if new_pot is None:
            new_pot = float(target.potential(prop.x))
        state = ChainState(x=prop.x, potential=float(new_pot),
                           step_index=state.step_index + 1, rng=state.rng)
    else:
        state = ChainState(x=state.x, potential=state.potential,
                           step_index=state.step_index + 1, rng=state.rng)
    return state, StepInfo(accepted=accepted, log_alpha=float(prop.log_alpha),
                           divergent=prop.divergent, extras=prop.extras)


# --------------------------------------------------------------------------
# independent flow proposals

@dataclass(frozen=True)
class IndependentFlowKernel:
    """Propose x' from the flow pushforward; accept with the density-ratio rule."""

    flow: ComposedFlow

    def propose(self, target: TargetModel, x: np.ndarray,
                rng: np.random.Generator) -> Proposal:
        z = rng.standard_normal(self.flow.base_dim)
        y, logdet = self.flow.forward(z)
        logq_prop = float(-0.5 * (z @ z) - 0.5 * z.size * np.log(2 * np.pi) - logdet)
        logq_cur = float(self.flow.log_density(x))
        u_cur = float(target.potential(x))
        u_prop = float(target.potential(y))
        log_alpha = (-u_prop + logq_cur) - (-u_cur + logq_prop)
        divergent = not np.isfinite(log_alpha)
        return Proposal(x=y, log_alpha=log_alpha, divergent=divergent,
                        extras={"potential_current": u_cur,
                                "potential_proposal": u_prop,
                                "logq_current": logq_cur,
                                "logq_proposal": logq_prop})

    def step(self, target: TargetModel, state: ChainState):
        return _finish_step(target, state, self.propose(target, state.x, state.rng))


def mh_step_independent(flow: ComposedFlow, target: TargetModel,
                        state: ChainState):
    return IndependentFlowKernel(flow).step(target, state)


# --------------------------------------------------------------------------
# leapfrog HMC and MALA

def leapfrog(target: TargetModel, x: np.ndarray, nu: np.ndarray,
             eps: float, n_steps: int):
    """Velocity-Verlet integration of the Hamiltonian dynamics."""
    x = np.asarray(x, dtype=float).copy()
    nu = np.asarray(nu, dtype=float).copy()
    for _ in range(n_steps):
        nu_half = nu - 0.5 * eps * target.grad_potential(x)
        x = x + eps * nu_half
        nu = nu_half - 0.5 * eps * target.grad_potential(x)
    return x, nu


@dataclass(frozen=True)
class HmcKernel:
    """Hamiltonian Monte Carlo with a fixed step size and leapfrog count."""

    eps: float
    n_leapfrog: int

    def __post_init__(self):
        if self.eps <= 0 or self.n_leapfrog < 1:
            raise InputError("need eps > 0 and n_leapfrog >= 1")

    @property
    def params(self) -> np.ndarray:
        return np.array([self.eps])

    def with_params(self, vec) -> "HmcKernel":
        return replace(self, eps=float(np.asarray(vec).ravel()[0]))

    def propose(self, target: TargetModel, x: np.ndarray,
                rng: np.random.Generator) -> Proposal:
        nu = rng.standard_normal(x.size)
        u0 = float(target.potential(x))
        h0 = u0 + 0.5 * float(nu @ nu)
        x1, nu1 = leapfrog(target, x, nu, self.eps, self.n_leapfrog)
        u1 = float(target.potential(x1))
        h1 = u1 + 0.5 * float(nu1 @ nu1)
        dh = h1 - h0
        divergent = (not np.isfinite(dh)) or abs(dh) > DIVERGENCE_ENERGY
        log_alpha = -np.inf if divergent else -dh
        return Proposal(x=x1, log_alpha=log_alpha, divergent=divergent,
                        extras={"potential_current": u0, "potential_proposal": u1,
                                "delta_h": dh})

    def step(self, target: TargetModel, state: ChainState):
        return _finish_step(target, state, self.propose(target, state.x, state.rng))


def hmc_propose(kernel: HmcKernel, target: TargetModel, x, rng) -> Proposal:
    return kernel.propose(target, np.asarray(x, dtype=float), rng)


@dataclass(frozen=True)
class MalaKernel:
    """Metropolis-adjusted Langevin proposal.

    Implemented as a single leapfrog step; the energy difference in the
    acceptance ratio is algebraically identical to the usual Langevin
    forward/backward drift correction with step h = eps^2.
    """

    eps: float

    def __post_init__(self):
        if self.eps <= 0:
            raise InputError("need eps > 0")

    @property
    def params(self) -> np.ndarray:
        return np.array([self.eps])

    def with_params(self, vec) -> "MalaKernel":
        return replace(self, eps=float(np.asarray(vec).ravel()[0]))

    def propose(self, target, x, rng) -> Proposal:
        return HmcKernel(eps=self.eps, n_leapfrog=1).propose(target, x, rng)

    def step(self, target: TargetModel, state: ChainState):
        return _finish_step(target, state, self.propose(target, state.x, state.rng))


# --------------------------------------------------------------------------
# map-augmented HMC

MAP_NAMES = ("s_nu", "q_nu", "t_nu", "s_x", "q_x", "t_x")


def mlp_param_count(dim: int, width: int) -> int:
    return width * dim + width + dim * width + dim


def _mlp_apply(theta: np.ndarray, V: np.ndarray, dim: int, width: int) -> np.ndarray:
    """One-hidden-layer tanh perceptron R^dim -> R^dim on an (n, dim) batch."""
    o = 0
    W1 = theta[o:o + width * dim].reshape(width, dim); o += width * dim
    b1 = theta[o:o + width]; o += width
    W2 = theta[o:o + dim * width].reshape(dim, width); o += dim * width
    b2 = theta[o:o + dim]
    return np.tanh(V @ W1.T + b1) @ W2.T + b2


@dataclass(frozen=True)
class AugmentedHmcKernel:
    """Leapfrog proposal whose momentum/position updates are rescaled and
    shifted by six parametric maps; the elementwise exp rescalings carry an
    exact log-Jacobian that enters the acceptance ratio.

    With all map parameters zero the proposal reduces to plain HMC with the
    same base step size, bit for bit on a shared rng stream.
    """

    base: HmcKernel
    dim: int
    map_params: np.ndarray
    width: int = 16

    def __post_init__(self):
        per = mlp_param_count(self.dim, self.width)
        vec = np.asarray(self.map_params, dtype=float).ravel()
        if vec.size != 6 * per:
            raise InputError(f"expected {6 * per} map parameters, got {vec.size}")
        object.__setattr__(self, "map_params", vec)

    @classmethod
    def zero(cls, base: HmcKernel, dim: int, width: int = 16):
        return cls(base=base, dim=dim, width=width,
                   map_params=np.zeros(6 * mlp_param_count(dim, width)))

    @classmethod
    def random(cls, base: HmcKernel, dim: int, rng: np.random.Generator,
               scale: float = 0.01, width: int = 16):
        """Small random maps: hidden layer O(1), output layer scaled down."""
        per = mlp_param_count(dim, width)
        vec = np.zeros(6 * per)
        for m in range(6):
            o = m * per
            n1 = width * dim
            vec[o:o + n1] = rng.standard_normal(n1) / np.sqrt(dim)
            o += n1 + width  # b1 left at zero
            n2 = dim * width
            vec[o:o + n2] = scale * rng.standard_normal(n2) / np.sqrt(width)
            o += n2
            vec[o:o + dim] = scale * rng.standard_normal(dim)
        return cls(base=base, dim=dim, width=width, map_params=vec)

    @property
    def params(self) -> np.ndarray:
        return self.map_params.copy()

    def with_params(self, vec) -> "AugmentedHmcKernel":
        return replace(self, map_params=np.asarray(vec, dtype=float).ravel())

    def _map(self, name: str, V: np.ndarray) -> np.ndarray:
        per = mlp_param_count(self.dim, self.width)
        i = MAP_NAMES.index(name)
        return _mlp_apply(self.map_params[i * per:(i + 1) * per], V,
                          self.dim, self.width)

    def _trajectory(self, target: TargetModel, X: np.ndarray, NU: np.ndarray):
        """Batched augmented leapfrog; returns (X', NU', log_jacobian)."""
        eps = self.base.eps
        X = np.atleast_2d(X).copy()
        NU = np.atleast_2d(NU).copy()
        logj = np.zeros(X.shape[0])
        for _ in range(self.base.n_leapfrog):
            s = self._map("s_nu", X)
            NU = (np.exp(s) * NU
                  - 0.5 * eps * np.exp(self._map("q_nu", X)) * target.grad_many(X)
                  + self._map("t_nu", X))
            logj += s.sum(axis=1)
            s = self._map("s_x", NU)
            X = (np.exp(s) * X
                 + eps * np.exp(self._map("q_x", NU)) * NU
                 + self._map("t_x", NU))
            logj += s.sum(axis=1)
            s = self._map("s_nu", X)
            NU = (np.exp(s) * NU
                  - 0.5 * eps * np.exp(self._map("q_nu", X)) * target.grad_many(X)
                  + self._map("t_nu", X))
            logj += s.sum(axis=1)
        return X, NU, logj

    def propose(self, target: TargetModel, x: np.ndarray,
                rng: np.random.Generator) -> Proposal:
        nu = rng.standard_normal(x.size)
        u0 = float(target.potential(x))
        h0 = u0 + 0.5 * float(nu @ nu)
        X1, NU1, logj = self._trajectory(target, x[None, :], nu[None, :])
        x1, nu1 = X1[0], NU1[0]
        if not (np.all(np.isfinite(x1)) and np.all(np.isfinite(nu1))):
            return Proposal(x=x, log_alpha=-np.inf, divergent=True)
        u1 = float(target.potential(x1))
        h1 = u1 + 0.5 * float(nu1 @ nu1)
        dh = h1 - h0
        divergent = (not np.isfinite(dh)) or abs(dh) > DIVERGENCE_ENERGY
        log_alpha = -np.inf if divergent else -dh + float(logj[0])
        return Proposal(x=x1, log_alpha=log_alpha, divergent=divergent,
                        extras={"potential_current": u0, "potential_proposal": u1,
                                "delta_h": dh, "log_jacobian": float(logj[0])})

    def propose_batch(self, target: TargetModel, X: np.ndarray, NU: np.ndarray):
        """Vectorized proposals for fixed momenta; used by the jump-distance loss."""
        X = np.atleast_2d(X)
        U0 = target.potential_many(X)
        H0 = U0 + 0.5 * np.einsum("nd,nd->n", NU, NU)
        X1, NU1, logj = self._trajectory(target, X, NU)
        finite = np.all(np.isfinite(X1), axis=1) & np.all(np.isfinite(NU1), axis=1)
        X1 = np.where(finite[:, None], X1, X)
        U1 = target.potential_many(X1)
        H1 = U1 + 0.5 * np.einsum("nd,nd->n", NU1, NU1)
        dh = H1 - H0
        ok = finite & np.isfinite(dh) & (np.abs(dh) <= DIVERGENCE_ENERGY)
        log_alpha = np.where(ok, -dh + logj, -np.inf)
        return X1, log_alpha

    def step(self, target: TargetModel, state: ChainState):
        return _finish_step(target, state, self.propose(target, state.x, state.rng))


def aug_hmc_propose(kernel: AugmentedHmcKernel, target: TargetModel, x, rng) -> Proposal:
    return kernel.propose(target, np.asarray(x, dtype=float), rng)


# --------------------------------------------------------------------------
# involutive volume-preserving proposals

class IdentityMap:
    """Trivial volume-preserving map on the augmented space."""

    def forward(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=float).copy()

    def inverse(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=float).copy()


class RotatedShearMap:
    """(x, z) -> (x + B z, R z) with R orthogonal: unit-determinant, and the
    noise block keeps its standard-normal law, so the position proposal is an
    exactly symmetric random walk with increment covariance B B'."""

    def __init__(self, shear: np.ndarray, rotation: np.ndarray | None = None):
        B = np.atleast_2d(np.asarray(shear, dtype=float))
        self.x_dim, self.noise_dim = B.shape
        if rotation is None:
            rotation = np.eye(self.noise_dim)
        R = np.atleast_2d(np.asarray(rotation, dtype=float))
        if R.shape != (self.noise_dim, self.noise_dim):
            raise InputError("rotation shape must match noise dimension")
        if not np.allclose(R @ R.T, np.eye(self.noise_dim), atol=1e-10):
            raise InputError("rotation must be orthogonal")
        self.B = B
        self.R = R

    def forward(self, v: np.ndarray) -> np.ndarray:
        x, z = v[:self.x_dim], v[self.x_dim:]
        return np.concatenate([x + self.B @ z, self.R @ z])

    def inverse(self, v: np.ndarray) -> np.ndarray:
        x, zr = v[:self.x_dim], v[self.x_dim:]
        z = self.R.T @ zr
        return np.concatenate([x - self.B @ z, z])


def _probe_logdet(mapping, dim_total: int, rng: np.random.Generator,
                  step: float = 1e-5) -> float:
    v = rng.standard_normal(dim_total)
    J = np.zeros((dim_total, dim_total))
    for i in range(dim_total):
        e = np.zeros(dim_total)
        e[i] = step
        J[:, i] = (mapping.forward(v + e) - mapping.forward(v - e)) / (2 * step)
    sign, logdet = np.linalg.slogdet(J)
    if sign == 0:
        return np.inf
    return float(logdet)


@dataclass(frozen=True)
class InvolutiveKernel:
    """Symmetric proposal from a volume-preserving map on (x, noise).

    Fresh noise z ~ N(0, I_M) is drawn each step; with probability 1/2 the
    map or its inverse is applied and the x-block is proposed.  Volume
    preservation is validated at construction on finite-difference probes;
    the shipped maps (identity and rotated shear) additionally leave the
    noise marginal standard normal, which is what makes the plain
    density-ratio acceptance exact.
    """

    mapping: object
    x_dim: int
    noise_dim: int

    def __post_init__(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            ld = _probe_logdet(self.mapping, self.x_dim + self.noise_dim, rng)
            if abs(ld) > 1e-8:
                raise ConfigurationError(
                    f"map is not volume preserving: |logdet| = {abs(ld):.3g}")

    def propose(self, target: TargetModel, x: np.ndarray,
                rng: np.random.Generator) -> Proposal:
        z = rng.standard_normal(self.noise_dim)
        u = rng.uniform()
        v = np.concatenate([x, z])
        v2 = self.mapping.forward(v) if u > 0.5 else self.mapping.inverse(v)
        x2 = v2[:self.x_dim]
        u_cur = float(target.potential(x))
        u_prop = float(target.potential(x2))
        log_alpha = u_cur - u_prop
        return Proposal(x=x2, log_alpha=log_alpha,
                        divergent=not np.isfinite(log_alpha),
                        extras={"potential_current": u_cur,
                                "potential_proposal": u_prop})

    def step(self, target: TargetModel, state: ChainState):
        return _finish_step(target, state, self.propose(target, state.x, state.rng))


def involutive_propose(kernel: InvolutiveKernel, target, x, rng) -> Proposal:
    return kernel.propose(target, np.asarray(x, dtype=float), rng)


# --------------------------------------------------------------------------
# mixture of a local and a global kernel

@dataclass(frozen=True)
class MixtureKernel:
    """Deterministic alternation: r local steps, then one global step."""

    local: object
    global_kernel: object
    local_per_global: int

    def __post_init__(self):
        if self.local_per_global < 1:
            raise InputError("local_per_global must be >= 1")

    def is_global_step(self, step_index: int) -> bool:
        return (step_index + 1) % (self.local_per_global + 1) == 0

    def step(self, target: TargetModel, state: ChainState):
        sub = self.global_kernel if self.is_global_step(state.step_index) else self.local
        return sub.step(target, state)


def mixture_step(kernel: MixtureKernel, target: TargetModel, state: ChainState):
    return kernel.step(target, state)


# --------------------------------------------------------------------------
# chain driver

@dataclass
class ChainRun:
    draws: np.ndarray
    accepts: np.ndarray
    log_alphas: np.ndarray
    divergences: np.ndarray
    final_state: ChainState

    @property
    def acceptance_rate(self) -> float:
        return float(self.accepts.mean()) if self.accepts.size else float("nan")

    @property
    def divergence_count(self) -> int:
        return int(self.divergences.sum())


def run_chain(kernel, target: TargetModel, x0, n_steps: int, seed: int,
              burn_in: int = 0,
              state_hook: Callable[[ChainState, StepInfo], None] | None = None) -> ChainRun:
    """Run a kernel for ``n_steps`` post-burn-in steps, recording every draw."""
    if n_steps < 1:
        raise InputError("n_steps must be >= 1")
    state = init_chain_state(target, x0, seed)
    for _ in range(burn_in):
        state, _ = kernel.step(target, state)
    draws = np.empty((n_steps, target.dim))
    accepts = np.empty(n_steps, dtype=bool)
    log_alphas = np.empty(n_steps)
    divergences = np.empty(n_steps, dtype=bool)
    for t in range(n_steps):
        state, info = kernel.step(target, state)
        draws[t] = state.x
        accepts[t] = info.accepted
        log_alphas[t] = info.log_alpha
        divergences[t] = info.divergent
        if state_hook is not None:
            state_hook(state, info)
    return ChainRun(draws=draws, accepts=accepts, log_alphas=log_alphas,
                    divergences=divergences, final_state=state)


def tune_step_size(target: TargetModel, x0, seed: int, n_leapfrog: int = 5,
                   eps0: float = 0.5, rounds: int = 12, steps_per_round: int = 50,
                   accept_band: tuple[float, float] = (0.6, 0.8)) -> float:
    """Crude doubling/halving search for an HMC step size inside an acceptance band."""
    eps = eps0
    lo, hi = accept_band
    x = np.asarray(x0, dtype=float)
    for r in range(rounds):
        run = run_chain(HmcKernel(eps=eps, n_leapfrog=n_leapfrog), target, x,
                        steps_per_round, seed + 1000 + r)
        rate = run.acceptance_rate
        x = run.final_state.x
        if rate < lo:
            eps *= 0.6
        elif rate > hi:
            eps *= 1.4
        else:
            break
    return eps
