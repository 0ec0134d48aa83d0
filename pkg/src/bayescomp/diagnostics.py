"""Chain diagnostics: autocorrelation, ESS, Gelman-Rubin, realized ESJD.

Chains are (T,) or (T, D) arrays of draws.  Diagnostics that are undefined
for a constant chain return ``nan`` as an explicit error marker rather than
raising, so report generation can proceed and flag the offending chain.
"""

import numpy as np

from .errors import DegenerateChainError, InputError


def _as_chain(chain) -> np.ndarray:
    arr = np.asarray(chain, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise InputError("chain must be a (T,) or (T, D) array")
    return arr


def autocorrelation(chain, k: int) -> float:
    """Biased-normalized lag-k autocorrelation, averaged over coordinates."""
    arr = _as_chain(chain)
    T = arr.shape[0]
    if k < 0 or T <= k:
        raise InputError(f"need chain length > lag (T={T}, k={k})")
    centered = arr - arr.mean(axis=0)
    denom = np.einsum("td,td->d", centered, centered) / T
    if np.any(denom == 0.0):
        return float("nan")
    if k == 0:
        return 1.0
    num = np.einsum("td,td->d", centered[:-k], centered[k:]) / T
    return float(np.mean(num / denom))


def effective_sample_size(chain) -> float:
    """ESS with the autocorrelation sum truncated at the first nonpositive lag."""
    arr = _as_chain(chain)
    T = arr.shape[0]
    if T < 100:
        raise InputError("need at least 100 draws for an ESS estimate")
    centered = arr - arr.mean(axis=0)
    denom = np.einsum("td,td->d", centered, centered) / T
    if np.any(denom == 0.0):
        return float("nan")
    ess_per_dim = np.empty(arr.shape[1])
    for d in range(arr.shape[1]):
        x = centered[:, d]
        acf_sum = 0.0
        for k in range(1, T):
            rho = float(x[:-k] @ x[k:]) / (T * denom[d])
            if rho <= 0.0:
                break
            acf_sum += rho
        ess_per_dim[d] = T / (1.0 + 2.0 * acf_sum)
    return float(ess_per_dim.min())


def gelman_rubin(chain_set) -> float:
    """Potential scale reduction factor from between/within chain variances.

    For multivariate chains the largest per-coordinate factor is returned.
    Degenerate inputs (zero within-chain variance, or byte-identical chains
    that make the between-chain variance exactly zero) raise
    :class:`DegenerateChainError` instead of silently reporting 1.
    """
    chains = [_as_chain(c) for c in chain_set]
    if len(chains) < 2:
        raise InputError("Gelman-Rubin needs at least two chains")
    T = chains[0].shape[0]
    if any(c.shape != chains[0].shape for c in chains):
        raise InputError("all chains must share one shape")
    stacked = np.stack(chains)                     # (M, T, D)
    means = stacked.mean(axis=1)                   # (M, D)
    W = stacked.var(axis=1, ddof=1).mean(axis=0)   # (D,)
    B = T * means.var(axis=0, ddof=1)              # (D,)
    if np.any(W == 0.0):
        raise DegenerateChainError("zero within-chain variance")
    if np.all(B == 0.0):
        raise DegenerateChainError("identical chains: between-chain variance is zero")
    var_hat = (T - 1) / T * W + B / T
    return float(np.sqrt(var_hat / W).max())


def esjd(chain) -> float:
    """Mean squared jump distance realized along the chain."""
    arr = _as_chain(chain)
    if arr.shape[0] < 2:
        raise InputError("need at least two draws")
    diffs = np.diff(arr, axis=0)
    return float(np.mean(np.einsum("td,td->t", diffs, diffs)))


def mc_standard_error(chain) -> float:
    """Monte Carlo s.e. of the chain mean using the ESS-deflated variance."""
    arr = _as_chain(chain)
    ess = effective_sample_size(arr)
    if not np.isfinite(ess) or ess <= 0:
        return float("nan")
    return float(np.sqrt(arr.var(axis=0, ddof=1).max() / ess))
