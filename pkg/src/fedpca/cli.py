"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure
(divergence, degenerate numerics, I/O), 3 a check found a counterexample.
"""
import argparse
import csv
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import dataio, detection, evaluation, simulator, wdro
from .errors import (CheckFailure, ConfigurationError, DataFormatError,
                     DegenerateFactorizationError, DimensionError, DivergenceError,
                     ManifestMismatchError)
from .pca import fit_centralized, load_model, model_to_bytes, save_model
from .solvers import SolverConfig

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3
DATA_ENV = "FEDPCA_DATA"
CACHE_NAME = "dataset.cache"
ALGORITHMS = ("centralized", "fedpe", "fedpg", "self-learning")

# key: (type, default); flags and config files share these names
TRAIN_KEYS = {
    "algorithm": (str, "fedpg"),
    "seed": (int, 0),
    "clients": (int, 20),
    "k": (int, 30),
    "rounds": (int, 1000),
    "local_rounds": (int, 30),
    "sample_fraction": (float, 0.1),
    "rho": (float, 1.0),
    "eta": (float, 1e-3),
    "threshold_p": (float, 0.5),
    "partition_feature": (str, "dst_bytes"),
    "partition_strategy": (str, "sorted_by_feature"),
    "objective_scale": (str, "mean"),
    "init": (str, "shared"),
    "dual_update_all": (bool, False),
    "per_client_stats": (bool, False),
    "workers": (int, 1),
    "eval_every": (int, 0),
    "checkpoint_every": (int, 0),
    "data": (str, None),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


# -- helpers -------------------------------------------------------------------------

def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False, default=_jsonable)
        fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _read_config(path):
    """(parsed dict, verbatim text) of a flat JSON config, or ({}, None)."""
    if path is None:
        return {}, None
    if not os.path.exists(path):
        raise ConfigurationError(f"config file not found: {path}")
    with open(path) as fh:
        text = fh.read()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigurationError(f"{path}: expected a JSON object")
    return obj, text


def _merge(keys, config, args):
    """Defaults, then config file, then explicit flags."""
    out = {}
    unknown = sorted(set(config) - set(keys))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {unknown}")
    for key, (kind, default) in keys.items():
        value = config.get(key, default)
        flag = getattr(args, key, None)
        if flag is not None:
            value = flag
        if value is not None:
            if kind is bool and not isinstance(value, bool):
                raise ConfigurationError(f"{key} must be true or false")
            if kind is int and (isinstance(value, bool) or not float(value).is_integer()):
                raise ConfigurationError(f"{key} must be an integer, got {value!r}")
            try:
                value = kind(value)
            except (TypeError, ValueError) as exc:
                raise ConfigurationError(f"{key}: {exc}") from exc
        out[key] = value
    return out


def _default_cache(explicit):
    if explicit:
        return explicit
    root = os.environ.get(DATA_ENV)
    if root:
        return os.path.join(root, CACHE_NAME)
    raise ConfigurationError(f"no dataset cache given: pass --data or set {DATA_ENV}")


def _load_cache(path):
    if not os.path.exists(path):
        raise ConfigurationError(f"dataset cache not found: {path}")
    return dataio.load_cache(path)


def _load_model(path):
    if not os.path.exists(path):
        raise ConfigurationError(f"model file not found: {path}")
    return load_model(path)


def _sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _truncate_log(path, last_round):
    """Drop rows after ``last_round`` so a resumed run does not repeat them."""
    if not os.path.exists(path):
        return
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= last_round]
    _write_csv(path, keep[0], keep[1:])


# -- prepare-data ------------------------------------------------------------------

def cmd_prepare_data(args):
    root = os.environ.get(DATA_ENV)
    train_path = args.train or (root and os.path.join(root, "KDDTrain+.txt"))
    test_path = args.test or (root and os.path.join(root, "KDDTest+.txt"))
    if not train_path or not test_path:
        raise ConfigurationError(f"pass --train and --test or set {DATA_ENV}")
    for p in (train_path, test_path):
        if not os.path.exists(p):
            raise ConfigurationError(f"input file not found: {p}")
    out = _ensure_dir(args.out or root or "out")
    manifest = dataio.load_manifest(args.manifest)
    raw_train = dataio.load_nslkdd(train_path)
    raw_test = dataio.load_nslkdd(test_path)
    train, stats = dataio.select_and_normalize(raw_train, manifest=manifest)
    test, _ = dataio.select_and_normalize(raw_test, stats, manifest=manifest)
    cache_path = os.path.join(out, CACHE_NAME)
    dataio.save_cache(cache_path, train, test, stats, manifest)
    table = dataio.format_label_table(train, test)
    with open(os.path.join(out, "labels.txt"), "w") as fh:
        fh.write(table + "\n")
    print(f"train records: {len(train):,}")
    print(f"test records: {len(test):,}")
    print(table)
    print(f"features: {len(manifest)} (manifest sha256 {dataio.manifest_digest(manifest).hex()})")
    print(f"cache: {cache_path} sha256 {_sha256(cache_path)}")
    return EXIT_OK


# -- train ---------------------------------------------------------------------------

def _solver_config(opts):
    algo = opts["algorithm"]
    return SolverConfig(rho=opts["rho"], eta=opts["eta"], local_rounds=opts["local_rounds"],
                        global_rounds=opts["rounds"], sample_fraction=opts["sample_fraction"],
                        k=opts["k"], algorithm=algo if algo in ("fedpe", "fedpg") else "fedpg",
                        seed=opts["seed"], dual_update_all=opts["dual_update_all"],
                        objective_scale=opts["objective_scale"], init=opts["init"],
                        workers=opts["workers"])


def _partition_spec(opts):
    return dataio.PartitionSpec(opts["clients"], opts["partition_strategy"],
                                opts["partition_feature"], opts["seed"])


def cmd_train(args):
    config, text = _read_config(args.config)
    opts = _merge(TRAIN_KEYS, config, args)
    if opts["algorithm"] not in ALGORITHMS:
        raise ConfigurationError(f"unknown algorithm {opts['algorithm']!r}; expected one of {ALGORITHMS}")
    if not 0 < opts["threshold_p"] < 1:
        raise ConfigurationError(f"threshold p must lie in (0, 1), got {opts['threshold_p']}")
    cache_path = _default_cache(opts["data"])
    cache = _load_cache(cache_path)
    out = _ensure_dir(args.out)
    algo, p = opts["algorithm"], opts["threshold_p"]
    summary = {"command": "train", "algorithm": algo, "config": opts, "config_text": text,
               "dataset_manifest_sha256": cache.digest.hex()}
    timing = {}
    t0 = time.perf_counter()
    if algo == "centralized":
        x = cache.train.normals().features.T
        model = fit_centralized(x, opts["k"], cache.digest)
        save_model(model, os.path.join(out, "model.bin"))
        summary["model_sha256"] = hashlib.sha256(model_to_bytes(model)).hexdigest()
        summary["evaluation"] = evaluation.evaluate_model(model, cache, p)
    elif algo == "self-learning":
        spec = _partition_spec(opts)
        shards = dataio.partition(cache.train.normals(), spec)
        models, evals, avg = evaluation.self_learning(cache, shards, opts["k"], p)
        mdir = _ensure_dir(os.path.join(out, "models"))
        for i, m in enumerate(models):
            save_model(m, os.path.join(mdir, f"client_{i:03d}.bin"))
        summary["clients"] = [{"client": i, "records": len(s), "metrics": e["metrics"]}
                              for i, (s, e) in enumerate(zip(shards, evals))]
        summary["average_metrics"] = avg
    else:
        result = _train_federated(opts, cache, cache_path, out, resume=args.resume)
        model = result.model
        save_model(model, os.path.join(out, "model.bin"))
        summary["model_sha256"] = hashlib.sha256(model_to_bytes(model)).hexdigest()
        summary["final_objective"] = result.history[-1][1]
        summary["final_consensus_residual"] = result.history[-1][2]
        summary["rounds"] = result.history[-1][0]
        summary["rounds_to_within_5pct"] = simulator.rounds_to_within(
            simulator.read_history(os.path.join(out, "history.csv")))
        summary["evaluation"] = evaluation.evaluate_model(model, cache, p)
        timing.update(result.timing())
    timing["wall_time_s"] = time.perf_counter() - t0
    _write_json(os.path.join(out, "summary.json"), summary)
    _write_json(os.path.join(out, "timing.json"), timing)
    metrics = summary.get("average_metrics") or summary["evaluation"]["metrics"]
    print(f"{algo}: " + " ".join(f"{key}={metrics[key]:.4f}" for key in evaluation.METRIC_KEYS))
    print(f"artifacts in {out}")
    return EXIT_OK


def _train_federated(opts, cache, cache_path, out, resume=False):
    solver = _solver_config(opts)
    exp = simulator.ExperimentConfig(solver, _partition_spec(opts), cache_path,
                                     opts["threshold_p"], out, opts["per_client_stats"])
    exp.validate()
    hist_path = os.path.join(out, "history.csv")
    time_path = os.path.join(out, "timing.csv")
    acc_path = os.path.join(out, "accuracy.csv")
    ckpt = os.path.join(out, "checkpoint.ckpt")
    every = opts["eval_every"]
    train_normals = cache.train.normals()
    acc_rows = []

    def track(r, z):
        if every and (r % every == 0 or r == solver.global_rounds):
            from .pca import PcaModel
            from .solvers import consensus_basis

            m = PcaModel.from_basis(consensus_basis(z), cache.digest)
            acc = evaluation.accuracy_at(m, cache, opts["threshold_p"],
                                         evaluation.errors_of(m, train_normals))
            acc_rows.append((r, repr(acc)))

    if resume:
        if not os.path.exists(ckpt):
            raise ConfigurationError(f"no checkpoint to resume: {ckpt}")
        _, server, _ = simulator.load_checkpoint(ckpt)
        for path in (hist_path, time_path, acc_path):
            _truncate_log(path, server.round)
        if os.path.exists(acc_path):
            with open(acc_path, newline="") as fh:
                acc_rows.extend(tuple(r) for r in list(csv.reader(fh))[1:])
        log = simulator.RoundLog(hist_path, time_path, append=True)
        try:
            result = simulator.resume(ckpt, log=log, on_round=track,
                                      checkpoint_every=opts["checkpoint_every"],
                                      manifest_digest=cache.digest, cfg_override=solver)
        finally:
            log.close()
    else:
        log = simulator.RoundLog(hist_path, time_path)
        try:
            if every:
                track(0, simulator.build_clients(
                    simulator.experiment_shards(cache, exp.partition, exp.per_client_stats),
                    solver)[1])
            result = simulator.run_experiment(
                exp, cache=cache, log=log, on_round=track,
                checkpoint_path=ckpt if opts["checkpoint_every"] else None,
                checkpoint_every=opts["checkpoint_every"])
        finally:
            log.close()
    if every:
        _write_csv(acc_path, ("round", "accuracy"), acc_rows)
    return result


# -- evaluate / roc ----------------------------------------------------------------

def _p_option(args):
    config, text = _read_config(args.config)
    opts = _merge({"threshold_p": (float, 0.5), "data": (str, None)},
                  {k: v for k, v in config.items() if k in ("threshold_p", "data")}, args)
    if not 0 < opts["threshold_p"] < 1:
        raise ConfigurationError(f"threshold p must lie in (0, 1), got {opts['threshold_p']}")
    return opts, text


def cmd_evaluate(args):
    opts, text = _p_option(args)
    cache = _load_cache(_default_cache(opts["data"]))
    model = _load_model(args.model)
    out = _ensure_dir(args.out)
    res = evaluation.evaluate_model(model, cache, opts["threshold_p"])
    res["config_text"] = text
    _write_json(os.path.join(out, "metrics.json"), res)
    _write_csv(os.path.join(out, "per_class.csv"),
               ("class", "group", "attacks", "detected", "tpr", "fpr"),
               [(r["class"], r["group"], r["attacks"], r["detected"], repr(r["tpr"]), repr(r["fpr"]))
                for r in res["per_class"]])
    m = res["metrics"]
    print(" ".join(f"{key}={m[key]:.4f}" for key in evaluation.METRIC_KEYS)
          + f" threshold={res['threshold']:.6g}")
    return EXIT_OK


def cmd_roc(args):
    opts, text = _p_option(args)
    cache = _load_cache(_default_cache(opts["data"]))
    model = _load_model(args.model)
    evaluation.check_compatible(model, cache)
    out = _ensure_dir(args.out)
    errors = evaluation.errors_of(model, cache.test)
    filters = args.class_filter or ["all"]
    aucs = {}
    for which in filters:
        mask = detection.filter_for_roc(cache.test.main_class, cache.test.subclass, which)
        labels = cache.test.is_attack[mask]
        if not labels.any():
            raise ConfigurationError(f"class filter {which!r} leaves no attack records")
        if labels.all():
            raise ConfigurationError(f"class filter {which!r} leaves no normal records")
        curve = detection.roc(errors[mask], labels, args.points or None)
        _write_csv(os.path.join(out, f"roc_{which}.csv"), ("fpr", "tpr"),
                   [(repr(float(a)), repr(float(b))) for a, b in zip(curve.fpr, curve.tpr)])
        aucs[which] = curve.auc
        print(f"{which}: auc={curve.auc:.4f}")
    _write_json(os.path.join(out, "auc.json"), {"auc": aucs, "config_text": text})
    return EXIT_OK


# -- compare -------------------------------------------------------------------------

def _read_run(path):
    hist = os.path.join(path, "history.csv")
    if not os.path.exists(hist):
        raise ConfigurationError(f"no history.csv in {path}")
    history = simulator.read_history(hist)
    acc = None
    acc_path = os.path.join(path, "accuracy.csv")
    if os.path.exists(acc_path):
        with open(acc_path, newline="") as fh:
            acc = {int(r["round"]): float(r["accuracy"]) for r in csv.DictReader(fh)}
    client_s = None
    time_path = os.path.join(path, "timing.csv")
    if os.path.exists(time_path):
        with open(time_path, newline="") as fh:
            vals = [float(r["client_mean_s"]) for r in csv.DictReader(fh) if int(r["round"]) > 0]
        client_s = float(np.mean(vals)) if vals else None
    return history, acc, client_s


def cmd_compare(args):
    ha, acc_a, ta = _read_run(args.run_a)
    hb, acc_b, tb = _read_run(args.run_b)
    if [r for r, _, _ in ha] != [r for r, _, _ in hb]:
        raise ConfigurationError(f"runs cover different rounds ({ha[-1][0]} vs {hb[-1][0]})")
    out = _ensure_dir(args.out)
    header = ["round", "objective_a", "objective_b", "residual_a", "residual_b"]
    with_acc = acc_a is not None and acc_b is not None
    if with_acc:
        header += ["accuracy_a", "accuracy_b"]
    rows = []
    for (r, oa, ea), (_, ob, eb) in zip(ha, hb):
        row = [r, repr(oa), repr(ob), repr(ea), repr(eb)]
        if with_acc:
            row += [repr(acc_a[r]) if r in acc_a else "", repr(acc_b[r]) if r in acc_b else ""]
        rows.append(row)
    _write_csv(os.path.join(out, "compare.csv"), header, rows)
    stats = {"a": {"run": args.run_a, "rounds_to_within_5pct": simulator.rounds_to_within(ha),
                   "final_objective": ha[-1][1]},
             "b": {"run": args.run_b, "rounds_to_within_5pct": simulator.rounds_to_within(hb),
                   "final_objective": hb[-1][1]}}
    _write_json(os.path.join(out, "compare.json"), stats)
    _write_json(os.path.join(out, "compare_timing.json"),
                {"a_mean_client_round_s": ta, "b_mean_client_round_s": tb})
    print(f"rounds to within 5% of final objective: a={stats['a']['rounds_to_within_5pct']} "
          f"b={stats['b']['rounds_to_within_5pct']}")
    if ta is not None and tb is not None:
        print(f"mean client seconds per round: a={ta:.6f} b={tb:.6f}")
    return EXIT_OK


# -- wdro-check ------------------------------------------------------------------------

def cmd_wdro_check(args):
    if (args.instance is None) == (args.random is None):
        raise ConfigurationError("pass exactly one of --instance or --random")
    if args.instance is not None:
        if not os.path.exists(args.instance):
            raise ConfigurationError(f"instance file not found: {args.instance}")
        instances = [("file", wdro.load_instance(args.instance))]
    else:
        if args.random < 1:
            raise ConfigurationError("--random needs a positive count")
        ss = np.random.SeedSequence(args.seed)
        seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(args.random)]
        instances = [(f"random[{i}]", wdro.random_instance(s)) for i, s in enumerate(seeds)]
    gammas = args.gamma or None
    results, failed, max_gap = [], 0, 0.0
    for name, inst in instances:
        reports = wdro.check_instance(inst, m=args.m, gammas=gammas)
        bad = [r for r in reports if not r.passed]
        failed += bool(bad)
        for r in reports:
            if "gap" in r.details:
                max_gap = max(max_gap, r.details["gap"])
        entry = {"instance": name, "passed": not bad, "reports": [r.to_dict() for r in reports]}
        if bad:
            entry["counterexample"] = inst.to_dict()
        results.append(entry)
    report = {"instances": len(instances), "failed": failed, "max_duality_gap": max_gap,
              "m": args.m, "results": results}
    if args.out:
        _write_json(os.path.join(_ensure_dir(args.out), "wdro_report.json"), report)
    status = "pass" if not failed else "FAIL"
    print(f"wdro-check: {status} ({len(instances) - failed}/{len(instances)} instances, "
          f"max duality gap {max_gap:.3g})")
    if failed:
        raise CheckFailure(f"{failed} instance(s) with violations", report)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="fedpca", description="Federated PCA anomaly detection toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare-data", help="parse NSL-KDD CSVs into a normalized dataset cache")
    p.add_argument("--train", help=f"KDDTrain+ CSV (default ${DATA_ENV}/KDDTrain+.txt)")
    p.add_argument("--test", help=f"KDDTest+ CSV (default ${DATA_ENV}/KDDTest+.txt)")
    p.add_argument("--manifest", help="feature manifest overriding the bundled one")
    p.add_argument("--out", help=f"output directory (default ${DATA_ENV} or ./out)")
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train", help="train a model and score it at threshold p")
    p.add_argument("--config", help="flat JSON config; flags override its values")
    p.add_argument("--data", help=f"dataset cache (default ${DATA_ENV}/{CACHE_NAME})")
    p.add_argument("--algorithm", choices=ALGORITHMS)
    p.add_argument("--seed", type=int)
    p.add_argument("--clients", type=int, help="number of clients N")
    p.add_argument("--k", type=int, help="subspace dimension")
    p.add_argument("--rounds", type=int, help="global rounds T")
    p.add_argument("--local-rounds", type=int, help="local iterations C")
    p.add_argument("--sample-fraction", type=float, help="fraction of clients per round")
    p.add_argument("--rho", type=float, help="ADMM penalty")
    p.add_argument("--eta", type=float, help="local step size")
    p.add_argument("--threshold-p", type=float, help="quantile of training-normal errors")
    p.add_argument("--partition-feature", help="raw column the non-iid split sorts on")
    p.add_argument("--partition-strategy", choices=("sorted_by_feature", "iid_shuffle"))
    p.add_argument("--objective-scale", choices=("sum", "mean"))
    p.add_argument("--init", choices=("shared", "independent"))
    p.add_argument("--dual-update-all", action="store_true", default=None,
                   help="non-sampled clients also update their duals")
    p.add_argument("--per-client-stats", action="store_true", default=None,
                   help="re-standardize each shard locally")
    p.add_argument("--workers", type=int, help="threads for local solves")
    p.add_argument("--eval-every", type=int, help="log test accuracy every n rounds")
    p.add_argument("--checkpoint-every", type=int, help="checkpoint every n rounds")
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.ckpt")
    p.add_argument("--out", default="out", help="output directory")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("evaluate", cmd_evaluate, "score a model on the test set"),
                                 ("roc", cmd_roc, "ROC curves of a model per class filter")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--model", required=True)
        p.add_argument("--config", help="flat JSON config (threshold_p, data)")
        p.add_argument("--data", help=f"dataset cache (default ${DATA_ENV}/{CACHE_NAME})")
        p.add_argument("--threshold-p", type=float)
        p.add_argument("--out", default="out")
        if name == "roc":
            p.add_argument("--class-filter", action="append", choices=detection.CLASS_FILTERS,
                           help="repeatable; default all")
            p.add_argument("--points", type=int, default=0,
                           help="quantile thresholds (default: every distinct error)")
        p.set_defaults(func=func)

    p = sub.add_parser("compare", help="align the convergence logs of two runs")
    p.add_argument("--run-a", required=True)
    p.add_argument("--run-b", required=True)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("wdro-check", help="check robust-loss duality and bounds on finite spaces")
    p.add_argument("--instance", help="JSON instance file")
    p.add_argument("--random", type=int, help="number of random instances")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--m", type=int, default=100, help="mass grid resolution")
    p.add_argument("--gamma", type=float, action="append",
                   help="extra gamma for the sandwich check (repeatable)")
    p.add_argument("--out", help="directory for wdro_report.json")
    p.set_defaults(func=cmd_wdro_check)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CheckFailure as exc:
        print(f"fedpca: check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (ConfigurationError, DataFormatError, ManifestMismatchError, DimensionError,
            FileNotFoundError) as exc:
        print(f"fedpca: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (DivergenceError, DegenerateFactorizationError, RuntimeError, OSError) as exc:
        print(f"fedpca: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
