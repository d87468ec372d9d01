"""Wasserstein distributionally robust losses on finite sample spaces.

On a finite space every sup and inf is a max or min, so the duality between
the worst case over a 1-Wasserstein ball and the surrogate

    phi_gamma(z) = max_zeta l(zeta) - gamma d(zeta, z)
    robust_loss  = E_P[phi_gamma] + gamma rho

can be checked exactly. The ball supremum is computed three ways: an exact
greedy over per-source concave hulls (hand-written), a best plan on a mass
grid of resolution 1/m (integer program, a lower bound), and a plain LP used
only as a cross-check in tests.
"""
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckFailure, ConfigurationError, DataFormatError, DimensionError

MAX_POINTS = 6
MAX_GRID = 200
MIN_GRID = 10
WEIGHT_TOL = 1e-12
METRIC_TOL = 1e-12
NUM_TOL = 1e-9


# -- domain types ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FiniteSpace:
    points: np.ndarray
    metric: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        d = np.array(self.metric, dtype=np.float64)
        n = pts.shape[0]
        if n < 1:
            raise ValueError("a space needs at least one point")
        if d.shape != (n, n):
            raise DimensionError(f"metric is {d.shape}, expected {(n, n)}")
        if not np.all(np.isfinite(d)):
            raise ValueError("metric has non-finite entries")
        scale = max(1.0, float(np.abs(d).max()))
        if np.any(np.abs(np.diag(d)) > 0):
            raise ValueError("metric diagonal must be zero")
        if np.any(np.abs(d - d.T) > METRIC_TOL * scale):
            raise ValueError("metric is not symmetric")
        off = ~np.eye(n, dtype=bool)
        if np.any(d[off] <= 0):
            raise ValueError("distinct points must be at positive distance")
        # d[i, j] <= d[i, k] + d[k, j] for every k
        via = (d[:, :, None] + d[None, :, :]).min(axis=1)
        if np.any(d > via + METRIC_TOL * scale):
            i, j = np.argwhere(d > via + METRIC_TOL * scale)[0]
            raise ValueError(f"triangle inequality fails for points {i} and {j}")
        d.setflags(write=False)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "metric", d)

    @classmethod
    def from_points(cls, points, p=2):
        """Space with the l_p distance between the given points."""
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        diff = pts[:, None, :] - pts[None, :, :]
        return cls(pts, np.linalg.norm(diff, ord=p, axis=2))

    @property
    def size(self):
        return self.metric.shape[0]

    @property
    def min_gap(self):
        if self.size == 1:
            return math.inf
        return float(self.metric[~np.eye(self.size, dtype=bool)].min())

    @property
    def diameter(self):
        return float(self.metric.max())


@dataclass(frozen=True, eq=False)
class DiscreteDistribution:
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).ravel()
        if w.size == 0 or np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and non-negative")
        if abs(w.sum() - 1) > WEIGHT_TOL:
            raise ValueError(f"weights sum to {w.sum()!r}, not 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def point_mass(cls, n, i):
        w = np.zeros(n)
        w[i] = 1.0
        return cls(w)

    def expect(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.weights.shape:
            raise DimensionError(f"{values.shape[0]} values vs {self.weights.shape[0]} weights")
        return float(self.weights @ values)


@dataclass(frozen=True, eq=False)
class LossTable:
    """Loss of a fixed hypothesis at every point, with Lipschitz and sup bounds."""

    values: np.ndarray
    lipschitz: float
    bound: float

    @classmethod
    def on(cls, space, values, lipschitz=None, bound=None):
        """Build and certify a table; omitted constants are set to their tightest values."""
        v = np.array(values, dtype=np.float64).ravel()
        if v.shape != (space.size,):
            raise DimensionError(f"{v.size} losses for {space.size} points")
        if not np.all(np.isfinite(v)):
            raise ValueError("losses must be finite")
        tight_l = lipschitz_constant(space, v)
        tight_m = float(np.abs(v).max())
        lipschitz = tight_l if lipschitz is None else float(lipschitz)
        bound = tight_m if bound is None else float(bound)
        if lipschitz < tight_l * (1 - 1e-12):
            raise ValueError(f"losses are not {lipschitz}-Lipschitz (need {tight_l})")
        if bound < tight_m:
            raise ValueError(f"|loss| reaches {tight_m}, above the bound {bound}")
        v.setflags(write=False)
        return cls(v, lipschitz, bound)


def lipschitz_constant(space, values):
    n = space.size
    if n == 1:
        return 0.0
    off = ~np.eye(n, dtype=bool)
    diff = np.abs(values[:, None] - values[None, :])
    return float((diff[off] / space.metric[off]).max())


# -- surrogate and robust loss ------------------------------------------------------

def phi_gamma_all(space, loss, gamma):
    """phi_gamma at every point of the space."""
    if not gamma >= 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    # rows: candidate zeta, columns: anchor z
    return (loss.values[:, None] - gamma * space.metric).max(axis=0)


def phi_gamma(space, loss, gamma, z):
    return float(phi_gamma_all(space, loss, gamma)[z])


def robust_loss(space, loss, dist, gamma, rho):
    if not rho >= 0:
        raise ValueError(f"rho must be non-negative, got {rho}")
    return dist.expect(phi_gamma_all(space, loss, gamma)) + gamma * rho


def gamma_breakpoints(space, loss):
    """Every gamma where the maximizer of some phi_gamma(z) can switch."""
    l, d = loss.values, space.metric
    out = []
    n = space.size
    for z in range(n):
        for a in range(n):
            for b in range(a + 1, n):
                dd = d[a, z] - d[b, z]
                if dd != 0:
                    g = (l[a] - l[b]) / dd
                    if g > 0:
                        out.append(g)
    return np.unique(out)


def gamma_grid(space, loss, n=201):
    """Uniform grid on [0, 2 M / min-gap] merged with the exact breakpoints.

    robust_loss is convex piecewise linear in gamma with kinks only at the
    breakpoints, so its minimum over this grid is the exact minimum over
    gamma >= 0.
    """
    top = 2 * loss.bound / space.min_gap if space.size > 1 else 0.0
    uniform = np.linspace(0.0, top, n) if top > 0 else np.zeros(1)
    return np.unique(np.concatenate((uniform, gamma_breakpoints(space, loss))))


def dual_minimum(space, loss, center, rho, grid=None):
    """(min robust_loss over the grid, minimizing gamma); ties go to the smallest gamma."""
    grid = gamma_grid(space, loss) if grid is None else np.asarray(grid, dtype=np.float64)
    vals = np.array([robust_loss(space, loss, center, g, rho) for g in grid])
    best = float(vals.min())
    # smallest gamma whose value is within rounding of the minimum
    j = int(np.flatnonzero(vals <= best + NUM_TOL * max(1.0, abs(best)))[0])
    return float(vals[j]), float(grid[j])


# -- ball supremum ---------------------------------------------------------------------

def _upper_hull(costs, gains):
    """Indices on the upper concave hull from (0, 0), with increasing gain."""
    order = np.lexsort((-gains, costs))
    hull = []
    for j in order:
        c, g = costs[j], gains[j]
        if hull and costs[hull[-1]] == c:
            continue  # same cost, lower or equal gain
        if hull and g <= gains[hull[-1]]:
            continue  # dominated: more cost, no more gain
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            # drop b if it lies on or below the chord a -> j
            if (gains[b] - gains[a]) * (c - costs[a]) <= (g - gains[a]) * (costs[b] - costs[a]):
                hull.pop()
            else:
                break
        hull.append(j)
    return hull


def ball_sup_exact(space, loss, center, rho):
    """Exact max of E_Q[l] over plans of cost <= rho, with an optimal plan.

    Each source i may send its mass w_i anywhere; with budget b_i spent on
    it the best gain is w_i g_i(b_i / w_i), where g_i is the upper concave
    hull of the (distance, loss gain) pairs of its destinations. Taking hull
    segments in order of decreasing slope is optimal because every g_i is
    concave.
    """
    if not rho >= 0:
        raise ValueError(f"rho must be non-negative, got {rho}")
    d, l, w = space.metric, loss.values, center.weights
    n = space.size
    plan = np.diag(w).astype(np.float64)
    segments = []
    for i in range(n):
        if w[i] == 0:
            continue
        hull = _upper_hull(d[i], l - l[i])
        for a, b in zip(hull, hull[1:]):
            dc, dg = d[i, b] - d[i, a], l[b] - l[a]
            segments.append((dg / dc, i, a, b, w[i] * dc))
    # stable: equal slopes keep per-source order, so hull segments stay sequential
    segments.sort(key=lambda s: -s[0])
    budget = float(rho)
    for slope, i, a, b, cost in segments:
        if budget <= 0:
            break
        frac = min(1.0, budget / cost)
        moved = frac * w[i]
        plan[i, a] -= moved
        plan[i, b] += moved
        budget -= frac * cost
    plan[np.abs(plan) < 1e-15] = 0.0
    q = plan.sum(axis=0)
    return float(q @ l), plan


def ball_sup_grid(space, loss, center, rho, m=100):
    """Best plan whose moved masses are multiples of 1/m; a lower bound on the sup.

    The search over integer plans is solved exactly by branch and bound.
    """
    from scipy.optimize import Bounds, LinearConstraint, milp

    if m < MIN_GRID:
        raise ConfigurationError(f"grid resolution m={m} is too coarse (minimum {MIN_GRID})")
    if m > MAX_GRID or space.size > MAX_POINTS:
        raise ConfigurationError(f"grid search is capped at |Z| <= {MAX_POINTS} and m <= {MAX_GRID}")
    if not rho >= 0:
        raise ValueError(f"rho must be non-negative, got {rho}")
    d, l, w = space.metric, loss.values, center.weights
    n = space.size
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j and w[i] > 0]
    if not pairs:
        return center.expect(l), np.diag(w).astype(np.float64)
    gain = np.array([(l[j] - l[i]) / m for i, j in pairs])
    rows = np.zeros((n + 1, len(pairs)))
    for col, (i, j) in enumerate(pairs):
        rows[i, col] = 1.0 / m
        rows[n, col] = d[i, j] / m
    upper = np.concatenate((w, [rho])) + 1e-12
    res = milp(-gain, constraints=LinearConstraint(rows, -np.inf, upper),
               integrality=np.ones(len(pairs)), bounds=Bounds(0, m))
    if res.status != 0:
        raise RuntimeError(f"grid search failed: {res.message}")
    counts = np.round(res.x)
    plan = np.diag(w).astype(np.float64)
    for (i, j), c in zip(pairs, counts):
        plan[i, j] += c / m
        plan[i, i] -= c / m
    plan[np.abs(plan) < 1e-15] = 0.0
    q = plan.sum(axis=0)
    return float(q @ l), plan


def ball_sup(space, loss, center, rho, m=100, method="grid"):
    """(value, witness Q) for the worst case of E_Q[l] over the rho-ball.

    ``method="grid"`` searches plans on the 1/m mass grid (a lower bound that
    tightens as m grows); ``method="exact"`` uses the concave-hull greedy.
    """
    if method == "grid":
        value, plan = ball_sup_grid(space, loss, center, rho, m)
    elif method == "exact":
        value, plan = ball_sup_exact(space, loss, center, rho)
    else:
        raise ConfigurationError(f"unknown method {method!r}")
    return value, DiscreteDistribution(_normalize(plan.sum(axis=0)))


def _normalize(q):
    q = np.clip(q, 0, None)
    return q / q.sum()


def plan_cost(space, plan):
    return float(np.sum(plan * space.metric))


def wasserstein1(space, p, q):
    """W_1(p, q) by the transport linear program."""
    from scipy.optimize import linprog

    n = space.size
    a_eq = np.zeros((2 * n, n * n))
    for i in range(n):
        a_eq[i, i * n:(i + 1) * n] = 1.0
        a_eq[n + i, i::n] = 1.0
    b_eq = np.concatenate((p.weights, q.weights))
    res = linprog(space.metric.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def ball_members(space, loss, center, rho, *, n_random=20, seed=0, m=100):
    """Distributions within W_1 <= rho of ``center``, each given by a plan of cost <= rho.

    Includes the center, every single-pair mass move that fits the budget,
    random plans shrunk onto the budget, and both ball_sup witnesses.
    """
    w = center.weights
    n = space.size
    out = [center]
    for i in range(n):
        for j in range(n):
            if i != j and w[i] > 0:
                moved = min(w[i], rho / space.metric[i, j])
                if moved > 0:
                    q = w.copy()
                    q[i] -= moved
                    q[j] += moved
                    out.append(DiscreteDistribution(_normalize(q)))
    rng = np.random.default_rng(seed)
    for _ in range(n_random):
        rand = rng.dirichlet(np.ones(n), size=n) * w[:, None]
        cost = plan_cost(space, rand)
        t = min(1.0, rho / cost) if cost > 0 else 1.0
        plan = (1 - t) * np.diag(w) + t * rand
        out.append(DiscreteDistribution(_normalize(plan.sum(axis=0))))
    out.append(ball_sup(space, loss, center, rho, method="exact")[1])
    if space.size <= MAX_POINTS:
        out.append(ball_sup(space, loss, center, rho, m=m)[1])
    return out


# -- checks ------------------------------------------------------------------------------

@dataclass
class CheckReport:
    name: str
    passed: bool
    n_checked: int
    details: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)

    def to_dict(self):
        return {"name": self.name, "passed": self.passed, "n_checked": self.n_checked,
                "details": self.details, "violations": self.violations}

    def raise_if_failed(self):
        if not self.passed:
            raise CheckFailure(f"{self.name}: {len(self.violations)} violation(s)", self)
        return self


def check_duality(space, loss, center, rho, grid=None, *, m=100, tol=None):
    """Weak duality, and a small gap at the best gamma of the grid.

    Asserts grid-primal <= exact-primal <= dual min (up to rounding), and
    dual min - exact-primal <= tol (default 1e-2 M).
    """
    tol = 1e-2 * loss.bound if tol is None else tol
    grid = gamma_grid(space, loss) if grid is None else np.asarray(grid, dtype=np.float64)
    dual, g_star = dual_minimum(space, loss, center, rho, grid)
    exact, _ = ball_sup_exact(space, loss, center, rho)
    approx, _ = ball_sup_grid(space, loss, center, rho, m)
    eps = NUM_TOL * max(1.0, loss.bound)
    violations = []
    if approx > exact + eps:
        violations.append({"kind": "grid primal above exact primal", "grid": approx, "exact": exact})
    if exact > dual + eps:
        violations.append({"kind": "weak duality", "primal": exact, "dual": dual})
    if dual - exact > tol:
        violations.append({"kind": "duality gap", "gap": dual - exact, "tol": tol})
    details = {"primal_exact": exact, "primal_grid": approx, "dual": dual, "gamma_star": g_star,
               "gap": dual - exact, "grid_gap": dual - approx, "tol": tol, "m": m}
    return CheckReport("duality", not violations, 3, details, violations)


def check_sandwich(space, loss, center, rho, gamma, members=None, *, tol=None):
    """Lower and upper sandwich around robust_loss over the generated ball members.

    Lower: E_Q[l] <= robust_loss(gamma*) for every member Q. Upper:
    robust_loss(gamma) <= E_Q[l] + (2L + gamma [gamma != gamma*]) rho.
    The upper side is only guaranteed for gamma >= gamma*; below gamma*
    the surrogate can exceed it (gamma = 0 gives max l for any rho).
    """
    tol = NUM_TOL * max(1.0, loss.bound) if tol is None else tol
    members = ball_members(space, loss, center, rho) if members is None else members
    r_star, g_star = dual_minimum(space, loss, center, rho)
    r_gamma = robust_loss(space, loss, center, gamma, rho)
    off = 0.0 if abs(gamma - g_star) <= NUM_TOL * max(1.0, g_star) else 1.0
    slack = (2 * loss.lipschitz + gamma * off) * rho
    violations = []
    for idx, q in enumerate(members):
        e = q.expect(loss.values)
        if e > r_star + tol:
            violations.append({"kind": "lower", "member": idx, "E_Q": e, "robust": r_star,
                               "Q": q.weights.tolist()})
        if r_gamma > e + slack + tol:
            violations.append({"kind": "upper", "member": idx, "E_Q": e, "robust": r_gamma,
                               "slack": slack, "Q": q.weights.tolist()})
    details = {"gamma": gamma, "gamma_star": g_star, "robust_star": r_star,
               "robust_gamma": r_gamma, "slack": slack}
    return CheckReport("sandwich", not violations, len(members), details, violations)


def check_excess_risk_transfer(space, losses, center, rho, gamma, members=None, *, tol=None):
    """Excess risk under any ball member Q against excess robust loss at ``gamma``.

    Checks E_Q[f'] - min_f E_Q[f] <= R_{f'}(gamma) - min_f R_f(gamma)
    + (2L + gamma [gamma differs from some f's gamma*]) rho for every f'
    in the family, with L the largest Lipschitz constant. The bound is
    guaranteed once gamma is at least every member's gamma*.
    """
    losses = list(losses)
    if not losses:
        raise ValueError("empty loss family")
    bound = max(f.bound for f in losses)
    tol = NUM_TOL * max(1.0, bound) if tol is None else tol
    if members is None:
        members = []
        for j, f in enumerate(losses):
            members.extend(ball_members(space, f, center, rho, seed=j))
    stars = [dual_minimum(space, f, center, rho)[1] for f in losses]
    off = 0.0 if all(abs(gamma - s) <= NUM_TOL * max(1.0, s) for s in stars) else 1.0
    lip = max(f.lipschitz for f in losses)
    slack = (2 * lip + gamma * off) * rho
    robust = np.array([robust_loss(space, f, center, gamma, rho) for f in losses])
    excess_robust = robust - robust.min()
    violations = []
    for idx, q in enumerate(members):
        risk = np.array([q.expect(f.values) for f in losses])
        excess = risk - risk.min()
        for j in range(len(losses)):
            if excess[j] > excess_robust[j] + slack + tol:
                violations.append({"member": idx, "loss": j, "excess": float(excess[j]),
                                   "excess_robust": float(excess_robust[j]), "slack": slack,
                                   "Q": q.weights.tolist()})
    details = {"gamma": gamma, "gamma_stars": stars, "slack": slack, "lipschitz": lip}
    return CheckReport("excess_risk_transfer", not violations, len(members) * len(losses),
                       details, violations)


# -- instances ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Instance:
    space: FiniteSpace
    losses: tuple
    center: DiscreteDistribution
    rho: float

    @property
    def loss(self):
        return self.losses[0]

    def to_dict(self):
        return {"points": self.space.points.tolist(), "metric": self.space.metric.tolist(),
                "losses": [f.values.tolist() for f in self.losses],
                "lipschitz": [f.lipschitz for f in self.losses],
                "bounds": [f.bound for f in self.losses],
                "weights": self.center.weights.tolist(), "rho": self.rho}

    @classmethod
    def from_dict(cls, obj):
        try:
            points = obj["points"]
            space = (FiniteSpace(points, obj["metric"]) if "metric" in obj
                     else FiniteSpace.from_points(points))
            raw = obj["losses"]
            lips = obj.get("lipschitz", [None] * len(raw))
            bounds = obj.get("bounds", [None] * len(raw))
            losses = tuple(LossTable.on(space, v, l, b) for v, l, b in zip(raw, lips, bounds))
            center = DiscreteDistribution(obj["weights"])
            if center.weights.size != space.size:
                raise DimensionError(f"{center.weights.size} weights for {space.size} points")
            rho = float(obj["rho"])
            if not rho >= 0:
                raise ValueError("rho must be non-negative")
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"invalid instance: {exc}") from exc
        if not losses:
            raise DataFormatError("invalid instance: no losses")
        return cls(space, losses, center, rho)


def save_instance(path, inst):
    with open(path, "w") as fh:
        json.dump(inst.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_instance(path):
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    return Instance.from_dict(obj)


def two_point_instance():
    """Z = {0, 1}, l = (0, 1), center at 0, rho = 0.4."""
    space = FiniteSpace.from_points([0.0, 1.0])
    return Instance(space, (LossTable.on(space, [0.0, 1.0]),),
                    DiscreteDistribution([1.0, 0.0]), 0.4)


def random_instance(seed, max_points=5, n_losses=3, dim=None):
    """Random points in the unit cube, uniform losses in [-1, 1] and a Dirichlet center."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, max_points + 1))
    dim = int(rng.integers(1, 3)) if dim is None else dim
    while True:
        pts = rng.uniform(0, 1, (n, dim))
        dist = np.linalg.norm(pts[:, None] - pts[None], axis=2)
        if dist[~np.eye(n, dtype=bool)].min() > 1e-3:
            break
    space = FiniteSpace.from_points(pts)
    losses = tuple(LossTable.on(space, rng.uniform(-1, 1, n)) for _ in range(n_losses))
    center = DiscreteDistribution(_normalize(rng.dirichlet(np.ones(n))))
    rho = float(rng.uniform(0, space.diameter))
    return Instance(space, losses, center, rho)


def check_instance(inst, *, m=100, gammas=None):
    """Run every check on an instance; returns a list of CheckReports.

    Sandwich checks run at gamma* and at each extra gamma in ``gammas``
    (default: gamma* and L for each loss); the transfer check runs at the
    largest gamma* of the family.
    """
    reports = []
    for j, f in enumerate(inst.losses):
        rep = check_duality(inst.space, f, inst.center, inst.rho, m=m)
        rep.name = f"duality[{j}]"
        reports.append(rep)
        g_star = rep.details["gamma_star"]
        members = ball_members(inst.space, f, inst.center, inst.rho, seed=j, m=m)
        for g in ([g_star, max(g_star, f.lipschitz)] if gammas is None else gammas):
            rep = check_sandwich(inst.space, f, inst.center, inst.rho, g, members)
            rep.name = f"sandwich[{j}, gamma={g:.6g}]"
            reports.append(rep)
    stars = [dual_minimum(inst.space, f, inst.center, inst.rho)[1] for f in inst.losses]
    rep = check_excess_risk_transfer(inst.space, inst.losses, inst.center, inst.rho, max(stars))
    reports.append(rep)
    return reports
