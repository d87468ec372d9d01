"""Per-round update rules of the two federated PCA solvers.

FedPE runs consensus ADMM on Euclidean space with the orthogonality
penalty h(U) = max(0, U^T U - I)^2 (componentwise); FedPG replaces the
penalty with projected gradient steps on the Grassmann manifold.

Every client keeps its Gram matrix S_i = X_i X_i^T, so the local cost of
a gradient step is O(d^2 k) whatever the number of local records.
"""
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (ConfigurationError, DegenerateStepError, DimensionError,
                     DivergenceError)
from .grassmann import GrassmannPoint, project_to_tangent, retract
from .numerics import as_matrix, frobenius_inner, frobenius_norm_sq, thin_qr

FEDPE = "fedpe"
FEDPG = "fedpg"
ALGORITHMS = (FEDPE, FEDPG)
INITS = ("shared", "independent")


@dataclass(frozen=True)
class SolverConfig:
    rho: float = 1.0
    eta: float = 1e-3
    local_rounds: int = 30
    global_rounds: int = 1000
    sample_fraction: float = 0.1
    k: int = 30
    algorithm: str = FEDPG
    seed: int = 0
    # non-sampled clients also fold the new Z into their duals
    dual_update_all: bool = False
    # "sum": f_i = ||(I - UU^T) X_i||_F^2; "mean": the same divided by D_i
    objective_scale: str = "mean"
    # "shared": every client starts from one broadcast basis; "independent": one draw per client
    init: str = "shared"
    max_backtracks: int = 40
    workers: int = 1

    def validate(self, n_clients=None):
        if not self.rho > 0:
            raise ConfigurationError(f"rho must be positive, got {self.rho}")
        if not self.eta >= 0:
            raise ConfigurationError(f"eta must be non-negative, got {self.eta}")
        if self.local_rounds < 0 or self.global_rounds < 0:
            raise ConfigurationError("round counts must be non-negative")
        if not 0 < self.sample_fraction <= 1:
            raise ConfigurationError(f"sample_fraction must be in (0, 1], got {self.sample_fraction}")
        if self.k < 1:
            raise ConfigurationError(f"k must be positive, got {self.k}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.objective_scale not in ("sum", "mean"):
            raise ConfigurationError(f"objective_scale must be 'sum' or 'mean', got {self.objective_scale!r}")
        if self.init not in INITS:
            raise ConfigurationError(f"init must be one of {INITS}, got {self.init!r}")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")
        if n_clients is not None:
            if n_clients < 1:
                raise ConfigurationError("need at least one client")
            if self.sample_fraction * n_clients < 1 - 1e-12:
                raise ConfigurationError(
                    f"sample_fraction * N = {self.sample_fraction * n_clients:g} < 1")
        return self

    def n_sampled(self, n_clients):
        # guard against 0.1 * 30 = 3.0000000000000004
        return min(n_clients, max(1, math.ceil(round(self.sample_fraction * n_clients, 9))))


@dataclass(frozen=True, eq=False)
class ClientState:
    id: int
    u: np.ndarray
    y: np.ndarray
    t: np.ndarray
    gram: np.ndarray
    n_records: int
    weight: float = 1.0

    def __post_init__(self):
        d = self.gram.shape[0]
        if self.gram.shape != (d, d):
            raise DimensionError(f"gram must be square, got {self.gram.shape}")
        k = self.u.shape[1]
        if self.u.shape != (d, k) or self.y.shape != (d, k) or self.t.shape != (k, k):
            raise DimensionError("client state shapes do not conform")


@dataclass
class ServerState:
    z: np.ndarray
    round: int = 0
    history: list = field(default_factory=list)

    def record(self, round_index, objective, residual):
        if self.history and round_index <= self.history[-1][0]:
            raise ValueError("history rounds must be strictly increasing")
        self.history.append((round_index, float(objective), float(residual)))


def gram_matrix(x):
    x = as_matrix(x, "x")
    s = x @ x.T
    return 0.5 * (s + s.T)


def make_client(client_id, x, u0, objective_scale="sum"):
    """Client with zero duals and a cached Gram matrix of its d x D_i data."""
    x = as_matrix(x, "x")
    u0 = as_matrix(u0, "u0")
    d, k = u0.shape
    if x.shape[0] != d:
        raise DimensionError(f"data has {x.shape[0]} features, basis has {d} rows")
    n = x.shape[1]
    weight = 1.0 if objective_scale == "sum" else 1.0 / max(n, 1)
    return ClientState(client_id, u0.copy(), np.zeros((d, k)), np.zeros((k, k)),
                       gram_matrix(x), n, weight)


def penalty(u):
    """h(U) = max(0, U^T U - I)^2, componentwise."""
    m = u.T @ u - np.eye(u.shape[1])
    p = np.maximum(m, 0.0)
    return p * p


def reconstruction_objective(gram, u, weight=1.0):
    """||(I - UU^T) X||_F^2 from S = X X^T, exact for any U (orthonormal or not)."""
    su = gram @ u
    a = u.T @ su
    val = np.trace(gram) - 2.0 * np.trace(a) + frobenius_inner(a, u.T @ u)
    return weight * float(val)


def reconstruction_gradient(gram, u, weight=1.0):
    """Euclidean gradient of :func:`reconstruction_objective`.

    f(U) = tr S - 2 tr(U^T S U) + tr(U^T S U U^T U), hence
    grad f = -4 S U + 2 S U (U^T U) + 2 U (U^T S U).
    """
    su = gram @ u
    return weight * (-4.0 * su + 2.0 * su @ (u.T @ u) + 2.0 * u @ (u.T @ su))


def _check_shapes(state, z, u):
    if z.shape != state.u.shape or u.shape != state.u.shape:
        raise DimensionError(f"expected {state.u.shape}, got z {z.shape} and u {u.shape}")


def local_objective_fedpe(state, z, cfg, u):
    """Client term of the FedPE augmented Lagrangian at ``u``."""
    u = as_matrix(u, "u")
    z = as_matrix(z, "z")
    _check_shapes(state, z, u)
    h = penalty(u)
    diff = u - z
    return (reconstruction_objective(state.gram, u, state.weight)
            + frobenius_inner(state.y, diff)
            + frobenius_inner(state.t, h)
            + 0.5 * cfg.rho * frobenius_norm_sq(diff)
            + 0.5 * cfg.rho * frobenius_norm_sq(h))


def fedpe_gradient(state, z, cfg, u):
    """Gradient of :func:`local_objective_fedpe` (subgradient 0 on the penalty kink)."""
    u = as_matrix(u, "u")
    z = as_matrix(z, "z")
    _check_shapes(state, z, u)
    m = u.T @ u - np.eye(u.shape[1])
    p = np.maximum(m, 0.0)
    # d/dM of <T, P∘P> + (rho/2)||P∘P||^2, then chain rule through M = U^T U
    g_m = 2.0 * state.t * p + 2.0 * cfg.rho * p ** 3
    return (reconstruction_gradient(state.gram, u, state.weight)
            + state.y + cfg.rho * (u - z) + u @ (g_m + g_m.T))


def fedpe_local_solve(state, z, cfg, round_index=None):
    """C gradient steps on the FedPE local objective with halving backtracking.

    The step starts at ``cfg.eta`` each iteration and is halved until the
    objective does not increase; when no halving helps the solve stops early.
    """
    u = state.u
    if cfg.local_rounds == 0 or cfg.eta == 0:
        return u
    obj = local_objective_fedpe(state, z, cfg, u)
    if not math.isfinite(obj):
        raise DivergenceError(f"client {state.id}: non-finite FedPE objective", round_index)
    for _ in range(cfg.local_rounds):
        g = fedpe_gradient(state, z, cfg, u)
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"client {state.id}: non-finite FedPE gradient", round_index)
        if not np.any(g):
            break
        step = cfg.eta
        for _ in range(cfg.max_backtracks + 1):
            cand = u - step * g
            cand_obj = local_objective_fedpe(state, z, cfg, cand)
            if math.isfinite(cand_obj) and cand_obj <= obj:
                break
            step *= 0.5
        else:
            break
        u, obj = cand, cand_obj
    return u


def local_objective_fedpg(state, z, cfg, u):
    """F_i(U) = f_i(U) + <Y_i, U - Z> + (rho/2)||U - Z||_F^2."""
    u = as_matrix(u, "u")
    z = as_matrix(z, "z")
    _check_shapes(state, z, u)
    diff = u - z
    return (reconstruction_objective(state.gram, u, state.weight)
            + frobenius_inner(state.y, diff)
            + 0.5 * cfg.rho * frobenius_norm_sq(diff))


def fedpg_euclidean_gradient(state, z, cfg, u):
    """-2 S U + Y + rho (U - Z): the gradient of F_i using tr(U^T S U) for the
    data term, which agrees with f_i on the manifold."""
    return state.weight * (-2.0 * (state.gram @ u)) + state.y + cfg.rho * (u - z)


def fedpg_riemannian_gradient(state, z, cfg, point):
    g = fedpg_euclidean_gradient(state, z, cfg, point.basis)
    return project_to_tangent(point, g)


def fedpg_local_solve(state, z, cfg, round_index=None):
    """C projected-gradient steps with QR retraction; returns a GrassmannPoint."""
    point = GrassmannPoint(state.u)
    if cfg.local_rounds == 0 or cfg.eta == 0:
        return point
    for _ in range(cfg.local_rounds):
        v = fedpg_riemannian_gradient(state, z, cfg, point)
        if not np.all(np.isfinite(v.delta)):
            raise DivergenceError(f"client {state.id}: non-finite FedPG gradient", round_index)
        try:
            point = retract(point, v, cfg.eta)
        except DegenerateStepError as exc:
            raise DivergenceError(f"client {state.id}: {exc}", round_index) from exc
    return point


def local_solve(state, z, cfg, round_index=None):
    """Dispatch on ``cfg.algorithm``; always returns a plain matrix."""
    if cfg.algorithm == FEDPG:
        return fedpg_local_solve(state, z, cfg, round_index).basis.copy()
    return fedpe_local_solve(state, z, cfg, round_index)


def server_aggregate(us, n_total=None):
    """Arithmetic mean of the participating clients' matrices, summed in order."""
    us = list(us)
    if not us:
        raise ConfigurationError("no participating clients to aggregate")
    if n_total is not None and len(us) > n_total:
        raise ConfigurationError(f"{len(us)} participants exceed N={n_total}")
    shape = us[0].shape
    acc = np.zeros(shape)
    for u in us:
        if u.shape != shape:
            raise DimensionError(f"aggregate shape mismatch: {u.shape} vs {shape}")
        acc = acc + u
    return acc / len(us)


def dual_update(state, new_u, new_z, rho):
    """Y += rho (U - Z), T += rho h(U); returns the updated state."""
    new_u = as_matrix(new_u, "new_u")
    new_z = as_matrix(new_z, "new_z")
    if new_u.shape != state.u.shape or new_z.shape != state.u.shape:
        raise DimensionError("dual update shapes do not conform")
    return replace(state, u=new_u,
                   y=state.y + rho * (new_u - new_z),
                   t=state.t + rho * penalty(new_u))


def global_objective(clients, u_eval):
    """Sum of client reconstruction errors at one basis (or one per client).

    Always the unscaled sum, whatever weight the local solvers use, so it
    equals the centralized objective on the pooled data.
    """
    total = 0.0
    for i, c in enumerate(clients):
        u = u_eval[i] if isinstance(u_eval, (list, tuple)) else u_eval
        total += reconstruction_objective(c.gram, u)
    return total


def consensus_residual(clients, z):
    return float(sum(frobenius_norm_sq(c.u - z) for c in clients))


def consensus_basis(z):
    """Orthonormalized consensus matrix used for detection and diagnostics."""
    return thin_qr(z)[0]
