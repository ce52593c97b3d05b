"""Linear inverse operators: MNE, dSPM, sLORETA and eLORETA."""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from .errors import ConfigurationError, DimensionError, NumericError, SolverError
from .source_space import source_depth_score


@dataclass(frozen=True)
class PriorModel:
    """Diagonal source covariance ``R`` and channel-noise covariance ``C``."""

    r_diag: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r_diag, dtype=float)
        c = np.atleast_2d(np.asarray(self.c, dtype=float))
        if np.any(r < 0):
            raise ConfigurationError("source prior variances must be non-negative")
        if c.shape[0] != c.shape[1] or np.max(np.abs(c - c.T), initial=0.0) > 1e-12 * max(1.0, np.abs(c).max()):
            raise ConfigurationError("noise covariance must be square and symmetric")
        object.__setattr__(self, "r_diag", r)
        object.__setattr__(self, "c", c)

    @classmethod
    def identity(cls, n_sources, n_sensors):
        return cls(np.ones(n_sources), np.eye(n_sensors))

    @classmethod
    def depth_weighted(cls, lf, c, exponent=0.0):
        """``r_n = depth_score_n ** -exponent``; exponent 0 gives the identity prior."""
        if exponent == 0.0:
            return cls(np.ones(lf.n_sources), c)
        return cls(source_depth_score(lf) ** -exponent, c)


@dataclass(frozen=True)
class InverseOperator:
    """``w`` maps sensor frames (M) to source estimates (N)."""

    w: np.ndarray
    method: str
    lambda2: float
    whitener: np.ndarray = None
    weights: np.ndarray = None
    converged: bool = True
    n_iter: int = 0
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.w)):
            raise NumericError(f"{self.method} operator has non-finite entries")
        if self.lambda2 < 0:
            raise ConfigurationError("lambda2 must be non-negative")


def _gain(lf):
    if lf.gain_fixed is None:
        raise DimensionError("inverse operators need a collapsed leadfield (gain_fixed)")
    return lf.gain_fixed


def whitener_from_cov(c):
    """Symmetric inverse square root ``C^{-1/2}``."""
    vals, vecs = linalg.eigh(c)
    if vals.min() <= 0:
        raise SolverError("noise covariance is not positive definite; increase shrinkage")
    return (vecs / np.sqrt(vals)) @ vecs.T


def default_lambda2(lf, prior, snr=3.0):
    """``trace(K~ R K~^T) / (M snr^2)`` with ``K~ = C^{-1/2} K``."""
    k = whitener_from_cov(prior.c) @ _gain(lf)
    return float(np.sum(k * k * prior.r_diag) / (k.shape[0] * snr ** 2))


def _solve_spd(a, b, allow_singular=True):
    """``a^{-1} b`` for symmetric ``a``: Cholesky, else clipped eigendecomposition."""
    try:
        factor = linalg.cho_factor(a, lower=True, check_finite=False)
        x = linalg.cho_solve(factor, b, check_finite=False)
        if np.all(np.isfinite(x)):
            return x
    except linalg.LinAlgError:
        pass
    vals, vecs = linalg.eigh(a)
    top = vals.max()
    if not allow_singular and vals.min() <= 1e-12 * top:
        raise SolverError("system matrix is singular; use lambda2 > 0")
    vals = np.clip(vals, 1e-12 * top, None)
    return vecs @ ((vecs.T @ b) / vals[:, None])


def _mne_core(k, r_diag, c, lambda2):
    krk = (k * r_diag) @ k.T
    a = krk + lambda2 * c
    a = 0.5 * (a + a.T)
    if lambda2 == 0.0:
        vals = linalg.eigvalsh(a)
        if vals.min() <= 1e-12 * vals.max():
            raise SolverError(
                "K R K^T is rank deficient and lambda2 = 0; the system is singular, "
                "use a positive lambda2 to regularize"
            )
    # W = R K^T A^{-1} = (A^{-1} K R)^T since A is symmetric
    return _solve_spd(a, k * r_diag).T


def mne_operator(lf, prior, lambda2=None):
    k = _gain(lf)
    if prior.c.shape[0] != k.shape[0] or prior.r_diag.shape[0] != k.shape[1]:
        raise DimensionError("prior dimensions do not match the leadfield")
    if lambda2 is None:
        lambda2 = default_lambda2(lf, prior)
    w = _mne_core(k, prior.r_diag, prior.c, float(lambda2))
    return InverseOperator(w=w, method="MNE", lambda2=float(lambda2))


def objective_mne(j, phi, lf, prior, lambda2):
    """``||phi - K j||^2_{C^-1} + lambda2 ||j||^2_{R^-1}``.

    ``j`` and ``phi`` may be single frames or column-stacked (N x T, M x T).
    """
    k = _gain(lf)
    j = np.asarray(j, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if j.ndim == 1:
        j, phi = j[:, None], phi[:, None]
    if np.any(prior.r_diag <= 0):
        raise SolverError("objective needs an invertible source prior (r_diag > 0)")
    try:
        factor = linalg.cho_factor(prior.c, lower=True)
    except linalg.LinAlgError as exc:
        raise SolverError("noise covariance is not invertible") from exc
    resid = phi - k @ j
    data = float(np.sum(resid * linalg.cho_solve(factor, resid)))
    penalty = float(np.sum(j * j / prior.r_diag[:, None]))
    return data + lambda2 * penalty


def dspm_operator(mne, prior):
    """Noise-normalised MNE: row n divided by ``sqrt((W C W^T)_nn)``."""
    w = mne.w
    noise_var = np.einsum("nm,mk,nk->n", w, prior.c, w)
    if np.any(noise_var <= 0):
        raise SolverError("dSPM noise normalisation has a non-positive diagonal")
    return replace(mne, w=w / np.sqrt(noise_var)[:, None], method="dSPM")


def sloreta_operator(mne, lf):
    """Resolution-normalised MNE: row n divided by ``sqrt((W K)_nn)``."""
    w = mne.w
    res = np.einsum("nm,mn->n", w, _gain(lf))
    if np.any(res <= 0):
        raise SolverError("sLORETA resolution diagonal is not strictly positive")
    return replace(mne, w=w / np.sqrt(res)[:, None], method="sLORETA")


def _eloreta_update(k, gamma, lambda2, c, target_trace):
    a = (k / gamma) @ k.T + lambda2 * c
    new = np.sqrt(np.sum(k * _solve_spd(0.5 * (a + a.T), k), axis=0))
    # keep trace(K G^-1 K^T) fixed so lambda2 stays relative to the gain scale
    return new * (np.sum(k * k / new) / target_trace)


def eloreta_operator(lf, prior, lambda2=None, tol=1e-6, max_iter=100):
    """Exact LORETA via fixed-point iteration of the diagonal weights.

    The weights are renormalised every iteration so that
    ``trace(K G^-1 K^T)`` equals ``trace(K R K^T)``; this keeps
    ``lambda2`` on the same scale as for MNE.  Non-convergence is reported
    through ``converged=False`` on the result.
    """
    if not tol > 0:
        raise ConfigurationError("tol must be positive")
    k = _gain(lf)
    if lambda2 is None:
        lambda2 = default_lambda2(lf, prior)
    lambda2 = float(lambda2)
    target = float(np.sum(k * k * prior.r_diag))
    gamma = np.ones(k.shape[1]) * (np.sum(k * k) / target)
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        new = _eloreta_update(k, gamma, lambda2, prior.c, target)
        change = np.max(np.abs(new - gamma) / new)
        gamma = new
        if change < tol:
            converged = True
            break
    a = (k / gamma) @ k.T + lambda2 * prior.c
    w = _solve_spd(0.5 * (a + a.T), k).T / gamma[:, None]
    return InverseOperator(
        w=w, method="eLORETA", lambda2=lambda2, weights=gamma,
        converged=converged, n_iter=n_iter,
        info={"tol": tol, "max_iter": max_iter, "target_trace": target},
    )


def eloreta_residual(lf, prior, op):
    """Max relative deviation of the weights from their fixed-point update."""
    k = _gain(lf)
    new = _eloreta_update(k, op.weights, op.lambda2, prior.c, op.info["target_trace"])
    return float(np.max(np.abs(new - op.weights) / new))


def apply_inverse(op, phi):
    phi = np.asarray(phi, dtype=float)
    m = op.w.shape[1]
    if phi.shape[-1] != m:
        raise DimensionError(f"operator expects {m} channels, frames have {phi.shape[-1]}")
    return phi @ op.w.T


def build_operators(lf, prior, methods=("MNE", "dSPM", "sLORETA", "eLORETA"), lambda2=None,
                    eloreta_tol=1e-6, eloreta_max_iter=100):
    """Construct the requested operators sharing one MNE kernel."""
    known = {"MNE", "dSPM", "sLORETA", "eLORETA"}
    unknown = set(methods) - known
    if unknown:
        raise ConfigurationError(f"unknown inverse methods: {sorted(unknown)}")
    if lambda2 is None:
        lambda2 = default_lambda2(lf, prior)
    mne = mne_operator(lf, prior, lambda2)
    ops = {}
    for name in methods:
        if name == "MNE":
            ops[name] = mne
        elif name == "dSPM":
            ops[name] = dspm_operator(mne, prior)
        elif name == "sLORETA":
            ops[name] = sloreta_operator(mne, lf)
        else:
            ops[name] = eloreta_operator(lf, prior, lambda2, eloreta_tol, eloreta_max_iter)
    return ops
