"""Single-process federation: T global rounds of FedPE or FedPG over client shards.

Randomness is derived from ``(seed, purpose, index)`` through
``numpy.random.SeedSequence``: client ``i``'s initial basis uses
``(seed, 0, i)`` (``(seed, 0, 0)`` for everyone under shared init) and the
participant draw of round ``r`` uses ``(seed, 1, r)``. A run is therefore reproducible from its configuration,
independent of worker count, and resumable from any checkpoint.
"""
import csv
import dataclasses
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import dataio, solvers
from .archive import read_archive, write_archive
from .errors import ConfigurationError, DataFormatError, DivergenceError
from .pca import PcaModel
from .solvers import ClientState, ServerState, SolverConfig

_INIT, _SAMPLE = 0, 1
CHECKPOINT_VERSION = 1


def _rng(seed, purpose, index):
    return np.random.default_rng(np.random.SeedSequence([seed, purpose, index]))


def initial_basis(seed, client_id, d, k):
    g = _rng(seed, _INIT, client_id).standard_normal((d, k))
    return solvers.consensus_basis(g)


def sample_clients(seed, round_index, n_clients, n_sampled):
    """Sorted ids of the clients taking part in ``round_index``."""
    if n_sampled >= n_clients:
        return np.arange(n_clients)
    pick = _rng(seed, _SAMPLE, round_index).choice(n_clients, size=n_sampled, replace=False)
    return np.sort(pick)


def build_clients(shards, cfg):
    """ClientStates with cached Gram matrices and the initial consensus Z^0."""
    cfg.validate(len(shards))
    d = shards[0].shape[0]
    if not cfg.k < d:
        raise ConfigurationError(f"k={cfg.k} must be below the feature dimension {d}")
    shared = cfg.init == "shared"
    clients = [solvers.make_client(i, x, initial_basis(cfg.seed, 0 if shared else i, d, cfg.k),
                                   cfg.objective_scale)
               for i, x in enumerate(shards)]
    z = solvers.server_aggregate([c.u for c in clients])
    return clients, z


@dataclass
class RunResult:
    model: PcaModel
    history: list
    clients: list
    server: ServerState
    elapsed: float = 0.0
    client_seconds: list = field(default_factory=list)
    round_seconds: list = field(default_factory=list)

    @property
    def mean_client_seconds(self):
        """Mean wall time of one client's local phase in one round."""
        return float(np.mean(self.client_seconds)) if self.client_seconds else 0.0

    def timing(self):
        return {"elapsed_s": self.elapsed,
                "mean_client_round_s": self.mean_client_seconds,
                "local_solves": len(self.client_seconds)}


class RoundLog:
    """Flushes one CSV line per round so aborted runs leave usable history."""

    def __init__(self, history_path=None, timing_path=None, append=False):
        mode = "a" if append else "w"
        self._hist = open(history_path, mode, newline="") if history_path else None
        self._time = open(timing_path, mode, newline="") if timing_path else None
        if not append:
            if self._hist:
                self._hist.write("round,objective,consensus_residual\n")
            if self._time:
                self._time.write("round,wall_time_s,client_mean_s\n")

    def write(self, round_index, objective, residual, wall, client_mean):
        if self._hist:
            self._hist.write(f"{round_index},{objective!r},{residual!r}\n")
            self._hist.flush()
        if self._time:
            self._time.write(f"{round_index},{wall:.6f},{client_mean:.6f}\n")
            self._time.flush()

    def close(self):
        for fh in (self._hist, self._time):
            if fh:
                fh.close()


def _snapshot(clients, z):
    basis = solvers.consensus_basis(z)
    return solvers.global_objective(clients, basis), solvers.consensus_residual(clients, z)


def run_rounds(clients, server, cfg, n_rounds=None, *, log=None, on_round=None,
               checkpoint_path=None, checkpoint_every=0):
    """Advance ``server`` by ``n_rounds`` (default: up to ``cfg.global_rounds``).

    Returns ``(clients, client_seconds, round_seconds)``; ``server`` is
    updated in place.
    """
    n = len(clients)
    m = cfg.n_sampled(n)
    stop = cfg.global_rounds if n_rounds is None else server.round + n_rounds
    client_seconds, round_seconds = [], []
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None

    def solve(c, z, r):
        t0 = time.perf_counter()
        u = solvers.local_solve(c, z, cfg, r)
        return u, time.perf_counter() - t0

    try:
        while server.round < stop:
            r = server.round + 1
            t0 = time.perf_counter()
            ids = sample_clients(cfg.seed, r, n, m)
            z = server.z
            jobs = [(clients[i], z, r) for i in ids]
            results = list(pool.map(lambda a: solve(*a), jobs)) if pool else [solve(*a) for a in jobs]
            new_us = [u for u, _ in results]
            new_z = solvers.server_aggregate(new_us, n)
            if not np.all(np.isfinite(new_z)):
                raise DivergenceError("non-finite consensus matrix", r)
            for i, u in zip(ids, new_us):
                clients[i] = solvers.dual_update(clients[i], u, new_z, cfg.rho)
            if cfg.dual_update_all:
                sampled = set(ids.tolist())
                for i in range(n):
                    if i not in sampled:
                        c = clients[i]
                        clients[i] = dataclasses.replace(c, y=c.y + cfg.rho * (c.u - new_z))
            server.z = new_z
            server.round = r
            obj, res = _snapshot(clients, new_z)
            if not np.isfinite(obj):
                raise DivergenceError("non-finite global objective", r)
            server.record(r, obj, res)
            secs = [s for _, s in results]
            client_seconds.extend(secs)
            wall = time.perf_counter() - t0
            round_seconds.append(wall)
            if log:
                log.write(r, obj, res, wall, float(np.mean(secs)))
            if on_round:
                on_round(r, server.z)
            if checkpoint_path and checkpoint_every and r % checkpoint_every == 0:
                save_checkpoint(checkpoint_path, clients, server, cfg)
    finally:
        if pool:
            pool.shutdown()
    return clients, client_seconds, round_seconds


def run_federated(shards, cfg, *, log=None, on_round=None, checkpoint_path=None,
                  checkpoint_every=0, manifest_digest=bytes(32)):
    """Run ``cfg.global_rounds`` rounds from scratch over d x D_i shards.

    The history starts with the round-0 snapshot, so it holds T + 1 entries.
    """
    t0 = time.perf_counter()
    clients, z = build_clients(shards, cfg)
    server = ServerState(z)
    obj, res = _snapshot(clients, z)
    server.record(0, obj, res)
    if log:
        log.write(0, obj, res, 0.0, 0.0)
    clients, cs, rs = run_rounds(clients, server, cfg, log=log, on_round=on_round,
                                 checkpoint_path=checkpoint_path, checkpoint_every=checkpoint_every)
    return _result(clients, server, time.perf_counter() - t0, cs, rs, manifest_digest)


def resume(checkpoint_path, *, log=None, on_round=None, checkpoint_every=0,
           manifest_digest=bytes(32), cfg_override=None):
    """Continue a checkpointed run up to its configured number of rounds."""
    clients, server, cfg = load_checkpoint(checkpoint_path)
    if cfg_override is not None:
        cfg = cfg_override
    t0 = time.perf_counter()
    clients, cs, rs = run_rounds(clients, server, cfg, log=log, on_round=on_round,
                                 checkpoint_path=checkpoint_path if checkpoint_every else None,
                                 checkpoint_every=checkpoint_every)
    return _result(clients, server, time.perf_counter() - t0, cs, rs, manifest_digest)


def _result(clients, server, elapsed, client_seconds, round_seconds, digest):
    model = PcaModel.from_basis(solvers.consensus_basis(server.z), digest)
    return RunResult(model, list(server.history), clients, server, elapsed,
                     client_seconds, round_seconds)


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, clients, server, cfg):
    arrays = {"z": server.z,
              "history": np.asarray(server.history, dtype=np.float64).reshape(-1, 3)}
    for c in clients:
        arrays[f"c{c.id:05d}_u"] = c.u
        arrays[f"c{c.id:05d}_y"] = c.y
        arrays[f"c{c.id:05d}_t"] = c.t
        arrays[f"c{c.id:05d}_gram"] = c.gram
    meta = {"version": CHECKPOINT_VERSION, "round": server.round,
            "config": dataclasses.asdict(cfg),
            "clients": [{"id": c.id, "n_records": c.n_records, "weight": c.weight.hex()}
                        for c in clients]}
    write_archive(path, arrays, meta)


def load_checkpoint(path):
    arrays, meta = read_archive(path)
    if not meta or meta.get("version") != CHECKPOINT_VERSION:
        raise DataFormatError(f"{path}: not a solver checkpoint")
    cfg = SolverConfig(**meta["config"])
    clients = []
    for info in meta["clients"]:
        key = f"c{info['id']:05d}"
        clients.append(ClientState(info["id"], arrays[f"{key}_u"], arrays[f"{key}_y"],
                                   arrays[f"{key}_t"], arrays[f"{key}_gram"],
                                   info["n_records"], float.fromhex(info["weight"])))
    history = [(int(r), float(o), float(e)) for r, o, e in arrays["history"]]
    server = ServerState(arrays["z"], meta["round"], history)
    return clients, server, cfg


# -- diagnostics -----------------------------------------------------------------

def rounds_to_within(history, fraction=0.05):
    """First round whose objective lies within ``fraction`` of the final objective."""
    objs = [(r, o) for r, o, _ in history]
    final = objs[-1][1]
    for r, o in objs:
        if abs(o - final) <= fraction * abs(final):
            return r
    return objs[-1][0]


def read_history(path):
    with open(path, newline="") as fh:
        return [(int(row["round"]), float(row["objective"]), float(row["consensus_residual"]))
                for row in csv.DictReader(fh)]


def measure_local_cost_scaling(d, k, sizes, local_rounds=30, repeats=5, seed=0, algorithm=solvers.FEDPG):
    """Seconds per local iteration, with Gram matrices built before timing.

    Returns a list of ``(n_records, seconds_per_iteration)`` rows, one per
    entry of ``sizes``; each value is the best of ``repeats`` timed solves.
    """
    cfg = SolverConfig(k=k, local_rounds=local_rounds, algorithm=algorithm, seed=seed)
    rows = []
    for j, n in enumerate(sizes):
        rng = _rng(seed, 2, j)
        x = rng.standard_normal((d, n)) / np.sqrt(max(n, 1))
        state = solvers.make_client(j, x, initial_basis(seed, j, d, k))
        z = state.u.copy()
        solvers.local_solve(state, z, cfg)  # warm-up
        best = np.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            solvers.local_solve(state, z, cfg)
            best = min(best, time.perf_counter() - t0)
        rows.append((int(n), best / max(local_rounds, 1)))
    return rows


# -- experiments -------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    solver: SolverConfig
    partition: dataio.PartitionSpec
    cache_path: str
    threshold_p: float = 0.5
    out_dir: str = None
    per_client_stats: bool = False

    def validate(self):
        import os

        if not os.path.exists(self.cache_path):
            raise ConfigurationError(f"dataset cache not found: {self.cache_path}")
        if not 0 < self.threshold_p < 1:
            raise ConfigurationError(f"threshold p must lie in (0, 1), got {self.threshold_p}")
        if self.out_dir is not None and not os.path.isdir(self.out_dir):
            raise ConfigurationError(f"output directory not found: {self.out_dir}")
        self.solver.validate(self.partition.n_clients)
        return self


def experiment_shards(cache, partition, per_client_stats=False):
    """d x D_i matrices of the training normals, one per client."""
    normals = cache.train.normals()
    shards = dataio.partition(normals, partition)
    return dataio.client_matrices(normals, shards, per_client_stats)


def run_experiment(cfg, *, cache=None, log=None, on_round=None, checkpoint_path=None,
                   checkpoint_every=0):
    """Federated training on the normal records of a dataset cache."""
    cfg.validate()
    cache = dataio.load_cache(cfg.cache_path) if cache is None else cache
    shards = experiment_shards(cache, cfg.partition, cfg.per_client_stats)
    return run_federated(shards, cfg.solver, log=log, on_round=on_round,
                         checkpoint_path=checkpoint_path, checkpoint_every=checkpoint_every,
                         manifest_digest=cache.digest)
