"""Scoring trained models against a dataset cache."""
import numpy as np

from . import detection
from .errors import ConfigurationError, ManifestMismatchError
from .pca import batch_errors, fit_centralized

METRIC_KEYS = ("acc", "precision", "tpr", "fpr", "f1")


def check_compatible(model, cache):
    if model.manifest_digest != cache.digest:
        raise ManifestMismatchError(
            f"model manifest {model.manifest_digest.hex()[:12]} does not match "
            f"dataset manifest {cache.digest.hex()[:12]}")
    if model.feature_dim != len(cache.manifest):
        raise ManifestMismatchError(
            f"model has {model.feature_dim} features, dataset has {len(cache.manifest)}")


def errors_of(model, data):
    return batch_errors(model, data.features.T)


def evaluate_model(model, cache, p, train_normals=None):
    """Threshold at the p-quantile of training-normal errors, then score the test set.

    ``train_normals`` overrides the records the threshold is fitted on
    (self-learning clients fit on their own shard).
    """
    check_compatible(model, cache)
    fit_on = cache.train.normals() if train_normals is None else train_normals
    th = detection.fit_threshold(errors_of(model, fit_on), p)
    test_err = errors_of(model, cache.test)
    flags = detection.classify(test_err, th)
    metrics, _ = detection.score(flags, cache.test.is_attack)
    rows = detection.per_class_eval(test_err, cache.test.main_class, cache.test.subclass, th)
    return {"threshold": th.value, "p": p, "metrics": metrics, "per_class": rows}


def self_learning(cache, shards, k, p):
    """One model per client shard, each fitted and thresholded on its own records.

    Returns (models, per-client evaluations, averaged metrics).
    """
    normals = cache.train.normals()
    models, evals = [], []
    for i, idx in enumerate(shards):
        if len(idx) < k:
            raise ConfigurationError(f"client {i} has {len(idx)} records, fewer than k={k}")
        local = normals.subset(np.isin(np.arange(len(normals)), idx))
        model = fit_centralized(local.features.T, k, cache.digest)
        models.append(model)
        evals.append(evaluate_model(model, cache, p, train_normals=local))
    avg = {key: float(np.mean([e["metrics"][key] for e in evals])) for key in METRIC_KEYS}
    return models, evals, avg


def accuracy_at(model, cache, p, train_errors=None):
    """Test accuracy of a model at threshold p, for per-round tracking."""
    train_errors = errors_of(model, cache.train.normals()) if train_errors is None else train_errors
    th = detection.fit_threshold(train_errors, p)
    flags = detection.classify(errors_of(model, cache.test), th)
    return float(np.mean(flags == cache.test.is_attack))
