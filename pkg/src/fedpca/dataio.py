"""NSL-KDD ingestion, feature selection, z-score normalization and client partitioning.

Records are stored row-wise (n x d) for I/O; the solvers take the transpose
(d x n, one column per record).
"""
import csv
import hashlib
import warnings
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .archive import read_archive, write_archive
from .errors import ConfigurationError, DataFormatError, DimensionError

COLUMNS = (
    "duration", "protocol_type", "service", "flag", "src_bytes", "dst_bytes",
    "land", "wrong_fragment", "urgent", "hot", "num_failed_logins", "logged_in",
    "num_compromised", "root_shell", "su_attempted", "num_root", "num_file_creations",
    "num_shells", "num_access_files", "num_outbound_cmds", "is_host_login",
    "is_guest_login", "count", "srv_count", "serror_rate", "srv_serror_rate",
    "rerror_rate", "srv_rerror_rate", "same_srv_rate", "diff_srv_rate",
    "srv_diff_host_rate", "dst_host_count", "dst_host_srv_count",
    "dst_host_same_srv_rate", "dst_host_diff_srv_rate", "dst_host_same_src_port_rate",
    "dst_host_srv_diff_host_rate", "dst_host_serror_rate", "dst_host_srv_serror_rate",
    "dst_host_rerror_rate", "dst_host_srv_rerror_rate",
)
CATEGORICAL = ("protocol_type", "service", "flag")
NUMERIC = tuple(c for c in COLUMNS if c not in CATEGORICAL)
MAIN_CLASSES = ("DoS", "Probe", "R2L", "U2R")
NORMAL = "normal"
UNKNOWN_CLASS = "Other"
CONSTANT_STD = 1e-12


def _package_text(name):
    return resources.files("fedpca").joinpath("data", name).read_text()


def load_manifest(path=None):
    """Ordered feature names; '#' starts a comment."""
    if path is None:
        text = _package_text("features.manifest")
    else:
        with open(path) as fh:
            text = fh.read()
    names = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    names = [n for n in names if n]
    unknown = [n for n in names if n not in NUMERIC]
    if unknown:
        raise ConfigurationError(f"manifest names non-numeric or unknown columns: {unknown}")
    if len(set(names)) != len(names):
        raise ConfigurationError("manifest lists a feature twice")
    return tuple(names)


def manifest_digest(names):
    return hashlib.sha256("\n".join(names).encode()).digest()


def normalize_subclass(name):
    return name.strip().rstrip(".").lower().replace("_", "").replace(" ", "").replace("-", "")


@dataclass(frozen=True)
class Taxonomy:
    main_class: dict    # normalized sub-class -> main class
    in_training: dict   # normalized sub-class -> bool

    @classmethod
    def load(cls, path=None):
        text = _package_text("taxonomy.csv") if path is None else open(path).read()
        main, known = {}, {}
        for row in csv.DictReader(text.splitlines()):
            key = normalize_subclass(row["subclass"])
            main[key] = row["main_class"]
            known[key] = row["in_training"].strip() == "1"
        return cls(main, known)

    def classify(self, subclass):
        """Main class of a label string; 'normal' maps to itself."""
        key = normalize_subclass(subclass)
        if key == NORMAL:
            return NORMAL
        return self.main_class.get(key, UNKNOWN_CLASS)

    def is_new(self, subclass):
        return not self.in_training.get(normalize_subclass(subclass), False)


@dataclass(frozen=True, eq=False)
class RawDataset:
    """Parsed NSL-KDD file held column-wise.

    ``numeric`` is (n, 38) in :data:`NUMERIC` order; ``labels`` keeps the raw
    sub-class string without a trailing period.
    """
    numeric: np.ndarray
    categorical: np.ndarray
    labels: np.ndarray
    difficulty: np.ndarray

    def __len__(self):
        return len(self.labels)

    def column(self, name):
        return self.numeric[:, NUMERIC.index(name)]

    def label_histogram(self):
        values, counts = np.unique(self.labels, return_counts=True)
        return dict(zip(values.tolist(), counts.tolist()))


def load_nslkdd(path):
    """Parse an NSL-KDD CSV (41 features + label, optionally + difficulty)."""
    numeric, categorical, labels, difficulty = [], [], [], []
    bad = []
    num_idx = [COLUMNS.index(c) for c in NUMERIC]
    cat_idx = [COLUMNS.index(c) for c in CATEGORICAL]
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) not in (42, 43):
                bad.append((lineno, f"expected 42 or 43 fields, got {len(row)}"))
                continue
            try:
                vals = [float(row[i]) for i in num_idx]
            except ValueError as exc:
                bad.append((lineno, str(exc)))
                continue
            if not all(np.isfinite(vals)):
                bad.append((lineno, "non-finite value"))
                continue
            numeric.append(vals)
            categorical.append([row[i].strip() for i in cat_idx])
            labels.append(row[41].strip().rstrip("."))
            difficulty.append(int(float(row[42])) if len(row) == 43 else -1)
    if bad:
        shown = "; ".join(f"line {n}: {msg}" for n, msg in bad[:10])
        more = f" (+{len(bad) - 10} more)" if len(bad) > 10 else ""
        raise DataFormatError(f"{path}: {len(bad)} malformed line(s): {shown}{more}")
    n = len(labels)
    return RawDataset(
        numeric=np.asarray(numeric, dtype=np.float64).reshape(n, len(NUMERIC)),
        categorical=np.asarray(categorical, dtype=str).reshape(n, len(CATEGORICAL)),
        labels=np.asarray(labels, dtype=str),
        difficulty=np.asarray(difficulty, dtype=np.int64),
    )


def write_nslkdd(path, raw):
    """Write a RawDataset back out in the 42/43-field layout."""
    num_pos = [COLUMNS.index(c) for c in NUMERIC]
    cat_pos = [COLUMNS.index(c) for c in CATEGORICAL]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for i in range(len(raw)):
            fields = [""] * len(COLUMNS)
            for p, v in zip(num_pos, raw.numeric[i]):
                fields[p] = repr(float(v))
            for p, v in zip(cat_pos, raw.categorical[i]):
                fields[p] = str(v)
            fields.append(str(raw.labels[i]))
            if raw.difficulty[i] >= 0:
                fields.append(str(int(raw.difficulty[i])))
            w.writerow(fields)


@dataclass(frozen=True, eq=False)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    features: tuple

    @property
    def constant(self):
        return self.std < CONSTANT_STD

    def apply(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.shape[-1] != len(self.mean):
            raise DimensionError(f"stats cover {len(self.mean)} features, data has {values.shape[-1]}")
        safe = np.where(self.constant, 1.0, self.std)
        out = (values - self.mean) / safe
        out[..., self.constant] = 0.0
        return out

    @classmethod
    def fit(cls, values, features):
        values = np.asarray(values, dtype=np.float64)
        if values.shape[0] == 0:
            raise ValueError("cannot compute statistics of an empty set")
        return cls(values.mean(axis=0), values.std(axis=0), tuple(features))


@dataclass(frozen=True, eq=False)
class LabeledData:
    """Selected, normalized features with labels.

    ``features`` is (n, d); ``main_class`` is 'normal' or a main attack class;
    ``subclass`` keeps the original label; ``raw`` holds all 38 numeric columns
    before selection and scaling (partitioning sorts on these).
    """
    features: np.ndarray
    main_class: np.ndarray
    subclass: np.ndarray
    raw: np.ndarray

    def __len__(self):
        return len(self.main_class)

    @property
    def is_attack(self):
        return self.main_class != NORMAL

    def subset(self, mask):
        return LabeledData(self.features[mask], self.main_class[mask],
                           self.subclass[mask], self.raw[mask])

    def normals(self):
        return self.subset(~self.is_attack)

    def raw_column(self, name):
        if name not in NUMERIC:
            raise ConfigurationError(f"unknown feature {name!r}")
        return self.raw[:, NUMERIC.index(name)]


def select_and_normalize(raw, stats=None, manifest=None, taxonomy=None):
    """Keep the manifest columns and z-score them.

    Without ``stats`` the statistics are computed from the normal records of
    ``raw`` and returned; with ``stats`` they are applied as given.
    """
    manifest = load_manifest() if manifest is None else tuple(manifest)
    taxonomy = Taxonomy.load() if taxonomy is None else taxonomy
    cols = [NUMERIC.index(f) for f in manifest]
    values = raw.numeric[:, cols]
    main = np.asarray([taxonomy.classify(s) for s in raw.labels], dtype=str).reshape(len(raw))
    if stats is None:
        stats = NormalizationStats.fit(values[main == NORMAL], manifest)
    elif len(stats.mean) != len(manifest):
        raise DimensionError(f"stats cover {len(stats.mean)} features, manifest has {len(manifest)}")
    unknown = sorted({s for s, m in zip(raw.labels, main) if m == UNKNOWN_CLASS})
    if unknown:
        warnings.warn(f"sub-classes missing from the taxonomy, counted as {UNKNOWN_CLASS!r}: {unknown}")
    data = LabeledData(stats.apply(values), main, raw.labels.copy(), raw.numeric.copy())
    return data, stats


@dataclass(frozen=True)
class PartitionSpec:
    n_clients: int
    strategy: str = "sorted_by_feature"
    feature: str = "dst_bytes"
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 1:
            raise ConfigurationError("n_clients must be >= 1")
        if self.strategy not in ("sorted_by_feature", "iid_shuffle"):
            raise ConfigurationError(f"unknown partition strategy {self.strategy!r}")


def partition(data, spec):
    """Split record indices into ``spec.n_clients`` contiguous near-equal shards.

    ``sorted_by_feature`` stable-sorts on the raw value of ``spec.feature``
    first; ``iid_shuffle`` permutes with ``spec.seed``. Returns index arrays.
    """
    n = len(data)
    if spec.n_clients > n:
        raise ConfigurationError(f"{spec.n_clients} clients but only {n} records")
    if spec.strategy == "sorted_by_feature":
        order = np.argsort(data.raw_column(spec.feature), kind="stable")
    else:
        order = np.random.default_rng(spec.seed).permutation(n)
    return np.array_split(order, spec.n_clients)


def client_matrices(data, shards, per_client_stats=False):
    """d x D_i training matrices, optionally re-standardized per shard."""
    out = []
    for idx in shards:
        x = data.features[idx]
        if per_client_stats:
            x = NormalizationStats.fit(x, ()).apply(x)
        out.append(np.ascontiguousarray(x.T))
    return out


def label_table(data, include_other=None):
    """Rows (category, count, rate %) of the per-class record counts."""
    total = len(data)
    other = int(np.sum(data.main_class == UNKNOWN_CLASS))
    cats = (NORMAL,) + MAIN_CLASSES
    if include_other or (include_other is None and other):
        cats += (UNKNOWN_CLASS,)
    rows = []
    for cat in cats:
        c = int(np.sum(data.main_class == cat))
        rows.append((cat, c, 100.0 * c / total if total else 0.0))
    rows.append(("Total", total, 100.0 if total else 0.0))
    return rows


def format_label_table(train, test):
    other = bool(np.any(train.main_class == UNKNOWN_CLASS) or np.any(test.main_class == UNKNOWN_CLASS))
    lines = [f"{'Category':<10}{'Train #':>10}{'Rate(%)':>9}{'Test #':>10}{'Rate(%)':>9}"]
    for (cat, a, ra), (_, b, rb) in zip(label_table(train, other), label_table(test, other)):
        lines.append(f"{cat:<10}{a:>10,}{ra:>9.2f}{b:>10,}{rb:>9.2f}")
    return "\n".join(lines)


# -- dataset cache -----------------------------------------------------------

CACHE_VERSION = 1


def save_cache(path, train, test, stats, manifest):
    arrays = {
        "train_features": train.features, "train_class": train.main_class,
        "train_subclass": train.subclass, "train_raw": train.raw,
        "test_features": test.features, "test_class": test.main_class,
        "test_subclass": test.subclass, "test_raw": test.raw,
        "stats_mean": stats.mean, "stats_std": stats.std,
    }
    meta = {
        "version": CACHE_VERSION,
        "manifest": list(manifest),
        "manifest_sha256": manifest_digest(manifest).hex(),
        "train_records": len(train),
        "test_records": len(test),
    }
    write_archive(path, arrays, meta)


@dataclass(frozen=True, eq=False)
class DatasetCache:
    train: LabeledData
    test: LabeledData
    stats: NormalizationStats
    manifest: tuple

    @property
    def digest(self):
        return manifest_digest(self.manifest)


def load_cache(path):
    arrays, meta = read_archive(path)
    if not meta or meta.get("version") != CACHE_VERSION:
        raise DataFormatError(f"{path}: not a dataset cache (version {meta and meta.get('version')})")
    manifest = tuple(meta["manifest"])
    if manifest_digest(manifest).hex() != meta["manifest_sha256"]:
        raise DataFormatError(f"{path}: manifest hash does not match manifest")

    def part(prefix):
        return LabeledData(arrays[f"{prefix}_features"], arrays[f"{prefix}_class"],
                           arrays[f"{prefix}_subclass"], arrays[f"{prefix}_raw"])

    stats = NormalizationStats(arrays["stats_mean"], arrays["stats_std"], manifest)
    return DatasetCache(part("train"), part("test"), stats, manifest)
