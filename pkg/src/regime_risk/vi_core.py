"""Mean-field variational inference for the regime/category mixture.

Model: cluster indicators c_t ~ Cat(pi), cluster means mu_k ~ N(mu0_k, R0_k),
features x_t | c_t = k ~ N(mu_k, M), category proportions
theta_k ~ Dir(alpha0_k) and outcome categories d_t | c_t = k ~ Cat(theta_k).

The variational family factorises as
q(c_t) = Cat(phi_t), q(mu_k) = N(mu_hat_k, R_hat_k), q(theta_k) = Dir(alpha_hat_k)
and ``cavi_fit`` cycles phi -> (mu_hat, R_hat) -> alpha_hat until the ELBO
stops moving. Each block update is the exact maximiser of the ELBO with the
other blocks held fixed, so the ELBO trace is nondecreasing.

Categories are 0-based integers throughout.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from .errors import NumericalError
from .special import digamma

__all__ = [
    "VIHyperparams", "ObservationSet", "VariationalState", "CAVIOptions", "VIConfig",
    "digamma", "update_responsibilities", "update_cluster_moments",
    "update_dirichlet", "elbo", "cavi_fit", "predictive_cluster_probs",
    "predictive_category_probs", "default_hyperparams", "kmeanspp_centers",
    "state_to_json", "state_from_json",
]

STATE_FORMAT = "regime_risk/variational-state"
STATE_VERSION = 1
_LOG_2PI = math.log(2.0 * math.pi)


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


def _chol(a: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise NumericalError(f"{what} is not symmetric positive definite") from None


def _logdet(a: np.ndarray) -> float:
    L = _chol(a, "covariance")
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def _spd_inv(a: np.ndarray) -> np.ndarray:
    L = _chol(a, "matrix")
    Linv = np.linalg.solve(L, np.eye(a.shape[0]))
    inv = Linv.T @ Linv
    return 0.5 * (inv + inv.T)


@dataclass(frozen=True)
class VIHyperparams:
    pi: np.ndarray        # (K,)
    mu0: np.ndarray       # (K, n)
    R0: np.ndarray        # (K, n, n)
    M: np.ndarray         # (n, n)
    alpha0: np.ndarray    # (K, J)

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float).ravel()
        mu0 = np.atleast_2d(np.asarray(self.mu0, dtype=float))
        K, n = mu0.shape
        R0 = np.asarray(self.R0, dtype=float).reshape(K, n, n)
        M = np.asarray(self.M, dtype=float).reshape(n, n)
        alpha0 = np.atleast_2d(np.asarray(self.alpha0, dtype=float))
        if pi.shape != (K,) or alpha0.shape[0] != K:
            raise ValueError("pi, mu0, R0 and alpha0 disagree on the cluster count")
        if np.any(pi <= 0) or abs(pi.sum() - 1.0) > 1e-9:
            raise ValueError("pi must be a strictly positive simplex")
        if np.any(alpha0 <= 0) or not np.all(np.isfinite(alpha0)):
            raise ValueError("Dirichlet parameters must be positive")
        for k in range(K):
            if not np.allclose(R0[k], R0[k].T):
                raise ValueError(f"R0[{k}] is not symmetric")
            _chol(R0[k], f"R0[{k}]")
        if not np.allclose(M, M.T):
            raise ValueError("M is not symmetric")
        _chol(M, "M")
        for name, val in (("pi", pi), ("mu0", mu0), ("R0", R0), ("M", M), ("alpha0", alpha0)):
            object.__setattr__(self, name, _frozen(val))

    @property
    def K(self) -> int:
        return self.mu0.shape[0]

    @property
    def n(self) -> int:
        return self.mu0.shape[1]

    @property
    def J(self) -> int:
        return self.alpha0.shape[1]

    def permuted(self, perm: Sequence[int]) -> "VIHyperparams":
        perm = list(perm)
        return VIHyperparams(self.pi[perm], self.mu0[perm], self.R0[perm], self.M, self.alpha0[perm])


@dataclass(frozen=True)
class ObservationSet:
    x: np.ndarray   # (T, n)
    d: np.ndarray   # (T,) ints in [0, J)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        d = np.asarray(self.d)
        if d.size and not np.all(d == np.round(d)):
            raise ValueError("categories must be integers")
        d = d.astype(np.int64).ravel()
        if x.shape[0] != d.shape[0]:
            raise ValueError("x and d must have the same length")
        if d.size and d.min() < 0:
            raise ValueError("categories are 0-based non-negative integers")
        if not np.all(np.isfinite(x)):
            raise ValueError("features must be finite")
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "d", _frozen(d, np.int64))

    @property
    def T(self) -> int:
        return self.x.shape[0]

    def check(self, hyper: VIHyperparams) -> None:
        if self.T and self.x.shape[1] != hyper.n:
            raise ValueError(f"features have dimension {self.x.shape[1]}, hyperparameters {hyper.n}")
        if self.T and self.d.max() >= hyper.J:
            raise ValueError(f"category {self.d.max()} out of range for J={hyper.J}")


@dataclass(frozen=True)
class VariationalState:
    phi: np.ndarray        # (T, K)
    mu_hat: np.ndarray     # (K, n)
    R_hat: np.ndarray      # (K, n, n)
    alpha_hat: np.ndarray  # (K, J)
    elbo_trace: tuple = ()
    converged: bool = False
    n_sweeps: int = 0

    def __post_init__(self):
        for name in ("phi", "mu_hat", "R_hat", "alpha_hat"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "elbo_trace", tuple(float(v) for v in self.elbo_trace))

    @property
    def K(self) -> int:
        return self.mu_hat.shape[0]

    def hard_assignments(self) -> np.ndarray:
        return np.argmax(self.phi, axis=1)

    def category_means(self) -> np.ndarray:
        """Posterior mean of theta_k, one row per cluster."""
        return self.alpha_hat / self.alpha_hat.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class CAVIOptions:
    """Stopping rule: |dELBO| / (1 + |ELBO|) < rel_tol, and when ``param_tol``
    is set also a max-norm change of every variational parameter below it.
    The ELBO can be nearly flat along directions where the parameters still
    drift, so the second test is what pins down a fixed point."""

    max_sweeps: int = 500
    rel_tol: float = 1e-8
    restarts: int = 2
    seed: int = 0
    param_tol: float | None = None


@dataclass(frozen=True)
class VIConfig:
    """Model size and prior scales used by the engines to build priors."""

    K: int = 3
    restarts: int = 2
    max_sweeps: int = 500
    rel_tol: float = 1e-8
    alpha0: float = 1.0
    r0_scale: float = 4.0
    m_scale: float = 1.0

    def hyperparams(self, x, J: int, seed: int) -> VIHyperparams:
        return default_hyperparams(x, self.K, J, seed, alpha0=self.alpha0,
                                   r0_scale=self.r0_scale, m_scale=self.m_scale)

    def options(self, seed: int) -> CAVIOptions:
        return CAVIOptions(self.max_sweeps, self.rel_tol, self.restarts, seed)


# --------------------------------------------------------------------------
# coordinate updates
# --------------------------------------------------------------------------

def _expected_log_theta(alpha_hat: np.ndarray) -> np.ndarray:
    return digamma(alpha_hat) - digamma(alpha_hat.sum(axis=1))[:, None]


def _quadratic_terms(hyper: VIHyperparams, mu_hat, R_hat, Minv):
    """x-independent part: -1/2 tr(M^-1 (mu mu' + R)) for each cluster."""
    second = np.einsum("ki,kj->kij", mu_hat, mu_hat) + R_hat
    return -0.5 * np.einsum("ij,kji->k", Minv, second)


def _log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise NumericalError("non-finite log-weight in responsibility update")
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def update_responsibilities(obs: ObservationSet, hyper: VIHyperparams, state: VariationalState) -> np.ndarray:
    """phi_tk proportional to exp(log pi_k + x_t'M^-1 mu_k - 1/2 tr(M^-1 E[mu mu'])
    + E[log theta_{k, d_t}]), normalised in log space."""
    obs.check(hyper)
    if obs.T == 0:
        return np.zeros((0, hyper.K))
    Minv = _spd_inv(hyper.M)
    logits = (np.log(hyper.pi)[None, :]
              + obs.x @ Minv @ state.mu_hat.T
              + _quadratic_terms(hyper, state.mu_hat, state.R_hat, Minv)[None, :]
              + _expected_log_theta(state.alpha_hat)[:, obs.d].T)
    return np.exp(_log_softmax_rows(logits))


def update_cluster_moments(obs: ObservationSet, hyper: VIHyperparams, phi: np.ndarray):
    """Gaussian posterior of each cluster mean given soft assignments."""
    obs.check(hyper)
    phi = np.asarray(phi, dtype=float).reshape(obs.T, hyper.K)
    Minv = _spd_inv(hyper.M)
    Nk = phi.sum(axis=0)
    Sx = phi.T @ obs.x if obs.T else np.zeros((hyper.K, hyper.n))
    mu_hat = np.empty((hyper.K, hyper.n))
    R_hat = np.empty((hyper.K, hyper.n, hyper.n))
    for k in range(hyper.K):
        R0inv = _spd_inv(hyper.R0[k])
        prec = R0inv + Nk[k] * Minv
        try:
            Rk = _spd_inv(0.5 * (prec + prec.T))
        except NumericalError:
            raise NumericalError(f"posterior precision of cluster {k} is singular") from None
        if Nk[k] == 0.0:
            Rk = np.array(hyper.R0[k])
        mu_hat[k] = Rk @ (R0inv @ hyper.mu0[k] + Minv @ Sx[k])
        R_hat[k] = 0.5 * (Rk + Rk.T)
    return mu_hat, R_hat


def update_dirichlet(obs: ObservationSet, hyper: VIHyperparams, phi: np.ndarray) -> np.ndarray:
    obs.check(hyper)
    phi = np.asarray(phi, dtype=float).reshape(obs.T, hyper.K)
    onehot = np.zeros((obs.T, hyper.J))
    onehot[np.arange(obs.T), obs.d] = 1.0
    return hyper.alpha0 + phi.T @ onehot


# --------------------------------------------------------------------------
# objective
# --------------------------------------------------------------------------

def _kl_gaussian(mu_q, R_q, mu_p, R_p) -> float:
    n = mu_q.size
    Rp_inv = _spd_inv(R_p)
    diff = mu_q - mu_p
    return 0.5 * (np.trace(Rp_inv @ R_q) + diff @ Rp_inv @ diff - n
                  + _logdet(R_p) - _logdet(R_q))


def _kl_dirichlet(a_q: np.ndarray, a_p: np.ndarray, elog: np.ndarray) -> float:
    # written so that identical components cancel exactly (matters for tiny priors)
    return float(gammaln(a_q.sum()) - gammaln(a_q).sum()
                 - gammaln(a_p.sum()) + gammaln(a_p).sum()
                 + np.sum((a_q - a_p) * elog))


def elbo(obs: ObservationSet, hyper: VIHyperparams, state: VariationalState) -> float:
    """Evidence lower bound of the full model under the mean-field posterior."""
    obs.check(hyper)
    K, n = hyper.K, hyper.n
    elog_theta = _expected_log_theta(state.alpha_hat)
    total = 0.0
    for k in range(K):
        total -= _kl_gaussian(state.mu_hat[k], state.R_hat[k], hyper.mu0[k], hyper.R0[k])
        total -= _kl_dirichlet(state.alpha_hat[k], hyper.alpha0[k], elog_theta[k])
    if obs.T:
        Minv = _spd_inv(hyper.M)
        phi = state.phi
        resid = obs.x[:, None, :] - state.mu_hat[None, :, :]            # (T, K, n)
        maha = np.einsum("tki,ij,tkj->tk", resid, Minv, resid)
        tr = np.einsum("ij,kji->k", Minv, state.R_hat)
        loglik_x = -0.5 * (n * _LOG_2PI + _logdet(hyper.M) + maha + tr[None, :])
        per = np.log(hyper.pi)[None, :] + loglik_x + elog_theta[:, obs.d].T
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = np.where(phi > 0, phi * np.log(phi), 0.0)
        total += float(np.sum(phi * per) - np.sum(ent))
    if not math.isfinite(total):
        raise NumericalError("ELBO is not finite")
    return total


# --------------------------------------------------------------------------
# fitting
# --------------------------------------------------------------------------

def kmeanspp_centers(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding on per-feature standardised data."""
    x = np.asarray(x, dtype=float)
    scale = x.std(axis=0)
    scale[scale < 1e-12] = 1.0
    z = x / scale
    T = z.shape[0]
    idx = [int(rng.integers(T))]
    d2 = np.sum((z - z[idx[0]]) ** 2, axis=1)
    for _ in range(1, K):
        tot = d2.sum()
        if tot <= 0:
            nxt = int(rng.integers(T))
        else:
            nxt = int(rng.choice(T, p=d2 / tot))
        idx.append(nxt)
        d2 = np.minimum(d2, np.sum((z - z[nxt]) ** 2, axis=1))
    return x[idx]


def _hard_assign(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    scale = x.std(axis=0)
    scale[scale < 1e-12] = 1.0
    dist = np.sum(((x[:, None, :] - centers[None]) / scale) ** 2, axis=2)
    return np.argmin(dist, axis=1)


def default_hyperparams(x, K: int, J: int, seed: int = 0, *, alpha0: float = 1.0,
                        r0_scale: float = 4.0, m_scale: float = 1.0,
                        pi=None) -> VIHyperparams:
    """Weak, scale-aware priors.

    M = m_scale * diag(var x), R0_k = r0_scale * diag(var x), alpha0 = const,
    pi uniform, mu0_k = centroid of the k-th k-means++ seed's hard cluster.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    T, n = x.shape
    var = x.var(axis=0, ddof=1) if T > 1 else np.ones(n)
    floor = 1e-12 * max(1.0, float(np.max(np.abs(x))) ** 2) if T else 1e-12
    var = np.maximum(var, floor)
    rng = np.random.default_rng([seed, 1])
    if T >= 1:
        centers = kmeanspp_centers(x, K, rng)
        lab = _hard_assign(x, centers)
        mu0 = np.array([x[lab == k].mean(axis=0) if np.any(lab == k) else centers[k]
                        for k in range(K)])
    else:
        mu0 = np.zeros((K, n))
    pi = np.full(K, 1.0 / K) if pi is None else np.asarray(pi, dtype=float)
    return VIHyperparams(
        pi=pi,
        mu0=mu0,
        R0=np.repeat(np.diag(r0_scale * var)[None], K, axis=0),
        M=np.diag(m_scale * var),
        alpha0=np.full((K, J), float(alpha0)),
    )


def _state_from_phi(obs, hyper, phi) -> VariationalState:
    mu_hat, R_hat = update_cluster_moments(obs, hyper, phi)
    alpha_hat = update_dirichlet(obs, hyper, phi)
    return VariationalState(phi, mu_hat, R_hat, alpha_hat)


def cavi_sweep(obs: ObservationSet, hyper: VIHyperparams, state: VariationalState) -> VariationalState:
    """One full pass phi -> (mu_hat, R_hat) -> alpha_hat."""
    phi = update_responsibilities(obs, hyper, state)
    return _state_from_phi(obs, hyper, phi)


def max_change(a: VariationalState, b: VariationalState) -> float:
    """Largest absolute difference over phi, mu_hat, R_hat and alpha_hat."""
    return max(float(np.max(np.abs(getattr(a, f) - getattr(b, f)), initial=0.0))
               for f in ("phi", "mu_hat", "R_hat", "alpha_hat"))


def _run(obs, hyper, phi0, opts: CAVIOptions) -> VariationalState:
    state = _state_from_phi(obs, hyper, phi0)
    trace = [elbo(obs, hyper, state)]
    converged = False
    sweeps = 0
    while sweeps < opts.max_sweeps:
        prev = state
        state = cavi_sweep(obs, hyper, state)
        sweeps += 1
        trace.append(elbo(obs, hyper, state))
        if abs(trace[-1] - trace[-2]) / (1.0 + abs(trace[-1])) < opts.rel_tol and (
                opts.param_tol is None or max_change(prev, state) < opts.param_tol):
            converged = True
            break
    return replace(state, elbo_trace=tuple(trace), converged=converged, n_sweeps=sweeps)


def initial_responsibilities(obs: ObservationSet, K: int, opts: CAVIOptions) -> list[np.ndarray]:
    """k-means++ hard assignment followed by ``opts.restarts`` random draws."""
    rng = np.random.default_rng([opts.seed, 2])
    T = obs.T
    inits = []
    if T:
        centers = kmeanspp_centers(obs.x, K, rng)
        phi = np.zeros((T, K))
        phi[np.arange(T), _hard_assign(obs.x, centers)] = 1.0
        inits.append(phi)
        for _ in range(opts.restarts):
            inits.append(rng.dirichlet(np.ones(K), size=T))
    else:
        inits.append(np.zeros((0, K)))
    return inits


def cavi_fit(obs: ObservationSet, hyper: VIHyperparams, opts: CAVIOptions | None = None,
             init_phi: np.ndarray | None = None) -> VariationalState:
    """Coordinate-ascent fit; best final ELBO across initialisations wins.

    With ``init_phi`` given only that initialisation is run. Running out of
    sweeps is not an error: the state comes back with ``converged=False``.
    """
    opts = opts or CAVIOptions()
    obs.check(hyper)
    inits = [np.asarray(init_phi, dtype=float)] if init_phi is not None else \
        initial_responsibilities(obs, hyper.K, opts)
    best = None
    for phi0 in inits:
        st = _run(obs, hyper, phi0, opts)
        if best is None or st.elbo_trace[-1] > best.elbo_trace[-1]:
            best = st
    return best


# --------------------------------------------------------------------------
# prediction
# --------------------------------------------------------------------------

def predictive_cluster_probs(x, hyper: VIHyperparams, state: VariationalState) -> np.ndarray:
    """Cluster probabilities for a new feature vector whose outcome is unknown."""
    x = np.asarray(x, dtype=float).ravel()
    if x.size != hyper.n or not np.all(np.isfinite(x)):
        raise ValueError("feature vector must be finite with the fitted dimension")
    Minv = _spd_inv(hyper.M)
    logits = (np.log(hyper.pi) + state.mu_hat @ (Minv @ x)
              + _quadratic_terms(hyper, state.mu_hat, state.R_hat, Minv))
    return np.exp(_log_softmax_rows(logits[None, :]))[0]


def predictive_category_probs(x, hyper: VIHyperparams, state: VariationalState) -> np.ndarray:
    q = predictive_cluster_probs(x, hyper, state)
    p = q @ state.category_means()
    return p / p.sum()


# --------------------------------------------------------------------------
# serialisation
# --------------------------------------------------------------------------

def state_to_dict(state: VariationalState) -> dict:
    return {
        "format": STATE_FORMAT,
        "version": STATE_VERSION,
        "K": int(state.K),
        "n": int(state.mu_hat.shape[1]),
        "J": int(state.alpha_hat.shape[1]),
        "T": int(state.phi.shape[0]),
        "converged": bool(state.converged),
        "n_sweeps": int(state.n_sweeps),
        "elbo_trace": list(state.elbo_trace),
        "mu_hat": state.mu_hat.tolist(),
        "R_hat": state.R_hat.tolist(),
        "alpha_hat": state.alpha_hat.tolist(),
        "phi": state.phi.tolist(),
    }


def state_to_json(state: VariationalState, **kw) -> str:
    return json.dumps(state_to_dict(state), **kw)


def state_from_json(text: str) -> VariationalState:
    d = json.loads(text)
    if d.get("format") != STATE_FORMAT or d.get("version") != STATE_VERSION:
        raise ValueError("not a version-1 variational state document")
    K, n, J, T = d["K"], d["n"], d["J"], d["T"]
    return VariationalState(
        phi=np.array(d["phi"], dtype=float).reshape(T, K),
        mu_hat=np.array(d["mu_hat"], dtype=float).reshape(K, n),
        R_hat=np.array(d["R_hat"], dtype=float).reshape(K, n, n),
        alpha_hat=np.array(d["alpha_hat"], dtype=float).reshape(K, J),
        elbo_trace=tuple(d["elbo_trace"]),
        converged=d["converged"],
        n_sweeps=d["n_sweeps"],
    )
