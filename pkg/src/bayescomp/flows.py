"""Planar normalizing flows with exact log-determinants and hand-coded gradients.

A flow is a stack of planar layers ``z -> z + a_hat * tanh(w'z + b)`` over a
standard-normal base.  Each layer's Jacobian is a rank-one update of the
identity, so determinants cost O(D) and inversion reduces to a scalar
root-find per layer.  Raw layer parameters are unconstrained; evaluation
substitutes a safeguarded scale vector ``a_hat`` whenever the raw ``a``
violates the invertibility condition ``w'a >= -1 + 1e-6``, so optimizers can
move freely in parameter space.

ODE-parameterized (continuous-time) flows are deliberately absent: an
explicit-Euler discretization of one is itself a K-layer discrete stack, so
the discrete implementation already covers that family at fixed resolution.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericError

LOG_2PI = float(np.log(2.0 * np.pi))
INVERT_SLACK = 1e-6          # w'a_hat >= -1 + INVERT_SLACK after safeguarding
NEWTON_TOL = 1e-12
NEWTON_MAX_ITER = 200


@dataclass(frozen=True)
class PlanarLayer:
    """Raw parameters of one planar layer (tanh nonlinearity, fixed)."""

    a: np.ndarray
    w: np.ndarray
    b: float

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).ravel()
        w = np.asarray(self.w, dtype=float).ravel()
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "b", float(self.b))
        if a.shape != w.shape:
            raise InputError("a and w must have the same dimension")

    @property
    def dim(self) -> int:
        return self.a.size


def _softplus(x: float) -> float:
    return float(np.logaddexp(0.0, x))


def _softplus_prime(x: float) -> float:
    # d/dx log(1+e^x) = sigmoid(x)
    return float(1.0 / (1.0 + np.exp(-x)))


def project_invertible(layer: PlanarLayer) -> PlanarLayer:
    """Project the scale vector so that w'a >= -1, preserving invertibility.

    Applies a_hat = a + (m(w'a) - w'a) w/||w||^2 with m(x) = -1 + log(1+e^x).
    A layer with w = 0 is affine-trivial and returned unchanged.
    """
    wn2 = float(layer.w @ layer.w)
    if wn2 == 0.0:
        return layer
    t = float(layer.w @ layer.a)
    m = -1.0 + _softplus(t)
    a_hat = layer.a + (m - t) * layer.w / wn2
    return PlanarLayer(a=a_hat, w=layer.w, b=layer.b)


def _effective_scale(layer: PlanarLayer):
    """Scale vector actually used in evaluation, plus safeguard branch info.

    Feasible raw layers are used as-is; violating layers are replaced by the
    softplus projection, floored at -1 + 1e-6.  Returns
    ``(a_hat, branch, t, mprime)`` where ``branch`` is one of "raw",
    "projected", "clamped" (the gradient code needs to know which chain rule
    applies).
    """
    w = layer.w
    a = layer.a
    wn2 = float(w @ w)
    if wn2 == 0.0:
        return a, "raw", 0.0, 1.0
    t = float(w @ a)
    if t >= -1.0 + INVERT_SLACK:
        return a, "raw", t, 1.0
    m = -1.0 + _softplus(t)
    if m < -1.0 + INVERT_SLACK:
        return a + ((-1.0 + INVERT_SLACK) - t) * w / wn2, "clamped", t, 0.0
    return a + (m - t) * w / wn2, "projected", t, _softplus_prime(t)


class ComposedFlow:
    """Stack of planar layers over a standard-normal base on R^base_dim."""

    def __init__(self, base_dim: int, layers: list[PlanarLayer]):
        if base_dim < 1:
            raise InputError("base_dim must be positive")
        for i, layer in enumerate(layers):
            if layer.dim != base_dim:
                raise InputError(f"layer {i} has dim {layer.dim}, expected {base_dim}")
        self.base_dim = int(base_dim)
        self.layers = list(layers)

    # --- parameter vector view -------------------------------------------

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_params(self) -> int:
        return self.n_layers * (2 * self.base_dim + 1)

    @property
    def params(self) -> np.ndarray:
        """Flat raw parameter vector, per layer (a, w, b)."""
        parts = []
        for layer in self.layers:
            parts.extend([layer.a, layer.w, [layer.b]])
        if not parts:
            return np.zeros(0)
        return np.concatenate(parts)

    def with_params(self, vec: np.ndarray) -> "ComposedFlow":
        vec = np.asarray(vec, dtype=float).ravel()
        if vec.size != self.n_params:
            raise InputError(f"expected {self.n_params} parameters, got {vec.size}")
        d = self.base_dim
        stride = 2 * d + 1
        layers = []
        for k in range(self.n_layers):
            off = k * stride
            layers.append(PlanarLayer(a=vec[off:off + d],
                                      w=vec[off + d:off + 2 * d],
                                      b=float(vec[off + 2 * d])))
        return ComposedFlow(self.base_dim, layers)

    # --- evaluation --------------------------------------------------------

    def forward(self, z: np.ndarray):
        """Push base points through the stack.

        Returns ``(y, logdet)``; for a single point the log-determinant is a
        float, for an (n, D) batch an (n,) vector.
        """
        z = np.asarray(z, dtype=float)
        single = z.ndim == 1
        Z = np.atleast_2d(z).copy()
        logdet = np.zeros(Z.shape[0])
        for i, layer in enumerate(self.layers):
            a_hat, *_ = _effective_scale(layer)
            c = float(a_hat @ layer.w)
            s = Z @ layer.w + layer.b
            h = np.tanh(s)
            hp = 1.0 - h * h
            r = 1.0 + hp * c
            if np.any(r <= 0.0) or not np.all(np.isfinite(r)):
                raise NumericError(f"non-invertible Jacobian in layer {i}")
            Z = Z + np.outer(h, a_hat)
            if not np.all(np.isfinite(Z)):
                raise NumericError(f"non-finite output of layer {i}")
            logdet += np.log(r)
        if single:
            return Z[0], float(logdet[0])
        return Z, logdet

    def _invert_layer(self, layer: PlanarLayer, Y: np.ndarray):
        """Invert one layer on a batch; returns (Z, s) with s = w'z + b."""
        a_hat, *_ = _effective_scale(layer)
        w = layer.w
        b = layer.b
        c = float(a_hat @ w)
        t = Y @ w
        if c == 0.0:
            alpha = t.copy()
        else:
            # solve alpha + c*tanh(alpha + b) = t: strictly increasing in alpha,
            # root bracketed by t -+ |c|; safeguarded Newton with bisection
            lo = t - abs(c) - 1e-9
            hi = t + abs(c) + 1e-9
            alpha = t.copy()
            scale = np.maximum(1.0, np.abs(t))
            converged = np.zeros(t.shape, dtype=bool)
            for _ in range(NEWTON_MAX_ITER):
                th = np.tanh(alpha + b)
                g = alpha + c * th - t
                gp = 1.0 + c * (1.0 - th * th)
                step = g / gp
                converged = (np.abs(step) <= NEWTON_TOL * scale) | (hi - lo <= NEWTON_TOL * scale)
                if converged.all():
                    break
                hi = np.where(g > 0.0, alpha, hi)
                lo = np.where(g < 0.0, alpha, lo)
                cand = alpha - step
                # bisect when Newton leaves the bracket or cycles across it
                bad = (cand <= lo) | (cand >= hi) | (np.abs(step) > 0.5 * (hi - lo))
                alpha = np.where(converged, alpha,
                                 np.where(bad, 0.5 * (lo + hi), cand))
            else:
                raise NumericError("layer inversion failed to converge "
                                   f"after {NEWTON_MAX_ITER} iterations")
        s = alpha + b
        Z = Y - np.outer(np.tanh(s), a_hat)
        return Z, s

    def inverse(self, y: np.ndarray) -> np.ndarray:
        """Map points back to the base space (layers applied in reverse)."""
        y = np.asarray(y, dtype=float)
        single = y.ndim == 1
        Z = np.atleast_2d(y).copy()
        for layer in reversed(self.layers):
            Z, _ = self._invert_layer(layer, Z)
        return Z[0] if single else Z

    def log_density(self, y: np.ndarray):
        """Log pushforward density via the change-of-variables identity."""
        y = np.asarray(y, dtype=float)
        single = y.ndim == 1
        Z = np.atleast_2d(y)
        z = self.inverse(Z)
        _, logdet = self.forward(z)
        base = -0.5 * np.einsum("nd,nd->n", z, z) - 0.5 * self.base_dim * LOG_2PI
        out = base - logdet
        return float(out[0]) if single else out

    def sample(self, n: int, seed: int):
        """Draw ``n`` points and their log-densities, deterministic in seed."""
        if n < 1:
            raise InputError("n must be at least 1")
        rng = np.random.default_rng(seed)
        Z = rng.standard_normal((n, self.base_dim))
        Y, logdet = self.forward(Z)
        base = -0.5 * np.einsum("nd,nd->n", Z, Z) - 0.5 * self.base_dim * LOG_2PI
        return Y, base - logdet

    # --- gradients -----------------------------------------------------------

    def param_grad_neg_logdensity(self, y_batch: np.ndarray) -> np.ndarray:
        """Exact gradient of mean_j -log q(y_j) over the flat raw parameters.

        Reverse pass through the inverse/log-determinant computation.  Layer
        Jacobians are rank-one updates, so every vector-Jacobian product is
        O(D) via Sherman-Morrison; the safeguarded-scale chain rule follows
        the branch actually taken in evaluation.
        """
        Y = np.atleast_2d(np.asarray(y_batch, dtype=float))
        if Y.shape[0] == 0:
            raise InputError("batch must be nonempty")
        n, d = Y.shape
        K = self.n_layers
        stride = 2 * d + 1

        # inverse sweep, caching per-layer inputs and preactivations
        Zs = [None] * (K + 1)      # Zs[i] = layer-i input (i.e. z_{i-1}) batches
        Ss = [None] * (K + 1)      # Ss[i] = s_i = w_i'z_{i-1} + b_i
        Zs[K] = Y
        cur = Y
        for i in range(K, 0, -1):
            cur, s = self._invert_layer(self.layers[i - 1], cur)
            Zs[i - 1] = cur
            Ss[i] = s

        grad = np.zeros(self.n_params)
        u = Zs[0].copy()           # adjoint dL/dz_0 = z_0 for L = 0.5||z_0||^2 + ...
        for i in range(1, K + 1):
            layer = self.layers[i - 1]
            a_hat, branch, t, mprime = _effective_scale(layer)
            w = layer.w
            c = float(a_hat @ w)
            s = Ss[i]
            h = np.tanh(s)
            hp = 1.0 - h * h
            hpp = -2.0 * h * hp
            r = 1.0 + hp * c
            if np.any(r <= 0.0):
                raise NumericError(f"non-invertible Jacobian in layer {i - 1}")
            zin = Zs[i - 1]

            # dl/dz_{i-1} for l = log r, then pull the running adjoint through J^{-T}
            coef_lz = c * hpp / r                       # (n,)
            q = u + np.outer(coef_lz, w)
            u = q - np.outer((hp / r) * (q @ a_hat), w)

            adotu = u @ a_hat                            # (n,)
            g_b = coef_lz - hp * adotu                   # (n,)
            g_ahat = np.outer(hp / r, w) - u * h[:, None]
            g_w = np.outer(hp / r, a_hat) + g_b[:, None] * zin

            # chain through the safeguarded scale for raw (a, w)
            if branch == "raw":
                g_a = g_ahat
            else:
                wn2 = float(w @ w)
                wg = g_ahat @ w                          # (n,)
                g_a = g_ahat + np.outer((mprime - 1.0) * wg / wn2, w)
                mt = float(a_hat @ w)                    # = m(t) (possibly clamped)
                g_w = (g_w
                       + np.outer((mprime - 1.0) * wg / wn2, layer.a)
                       + (mt - t) / wn2 * g_ahat
                       - np.outer(2.0 * (mt - t) * wg / wn2 ** 2, w))

            off = (i - 1) * stride
            grad[off:off + d] += g_a.mean(axis=0)
            grad[off + d:off + 2 * d] += g_w.mean(axis=0)
            grad[off + 2 * d] += g_b.mean()
        if not np.all(np.isfinite(grad)):
            raise NumericError("non-finite parameter gradient")
        return grad

    def neg_logdensity_value(self, y_batch: np.ndarray) -> float:
        """Mean of -log q(y_j); the value paired with param_grad_neg_logdensity."""
        Y = np.atleast_2d(np.asarray(y_batch, dtype=float))
        if Y.shape[0] == 0:
            raise InputError("batch must be nonempty")
        return float(-np.mean(self.log_density(Y)))


def identity_flow(dim: int, n_layers: int = 1) -> ComposedFlow:
    """Flow whose layers all have a = 0; exactly the identity map."""
    layers = [PlanarLayer(a=np.zeros(dim), w=np.zeros(dim), b=0.0)
              for _ in range(n_layers)]
    return ComposedFlow(dim, layers)


def random_flow(dim: int, n_layers: int, rng: np.random.Generator,
                scale: float = 0.5) -> ComposedFlow:
    """Random flow with comfortably invertible layers (w'a well above -1)."""
    layers = []
    for _ in range(n_layers):
        while True:
            a = scale * rng.standard_normal(dim)
            w = rng.standard_normal(dim)
            if float(w @ a) >= -0.9:
                break
        layers.append(PlanarLayer(a=a, w=w, b=float(rng.normal(scale=0.5))))
    return ComposedFlow(dim, layers)


def save_flow(path, flow: ComposedFlow) -> None:
    """Checkpoint: (D, K) header then the flat parameter vector, little-endian f64."""
    header = np.array([flow.base_dim, flow.n_layers], dtype="<f8")
    body = flow.params.astype("<f8")
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(body.tobytes())


def load_flow(path) -> ComposedFlow:
    raw = np.fromfile(path, dtype="<f8")
    if raw.size < 2:
        raise InputError(f"{path}: truncated flow checkpoint")
    d, k = int(raw[0]), int(raw[1])
    expected = 2 + k * (2 * d + 1)
    if d < 1 or k < 0 or raw.size != expected:
        raise InputError(f"{path}: checkpoint header inconsistent with payload")
    if k == 0:
        return ComposedFlow(d, [])
    return identity_flow(d, k).with_params(raw[2:])
