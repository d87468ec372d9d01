"""Synthetic traffic in the NSL-KDD CSV layout.

Normal records live near a low-dimensional subspace of the numeric columns
whose orientation drifts with ``dst_bytes``, so sorting on that column gives
non-iid client shards. Attack records add energy outside the normal
subspace. The files exercise the full pipeline when the real dataset is
unavailable; the numbers they produce say nothing about NSL-KDD itself.
"""
import csv

import numpy as np

from .dataio import CATEGORICAL, COLUMNS, NUMERIC, Taxonomy

_PROTOCOLS = ("tcp", "udp", "icmp")
_SERVICES = ("http", "smtp", "ftp_data", "private", "domain_u", "other")
_FLAGS = ("SF", "S0", "REJ", "RSTR")


def generate_records(n_normal, n_attack, *, seed=0, latent_dim=6, noise=0.05,
                     attack_scale=1.5, include_new=False, difficulty=True):
    """Return a list of CSV rows (lists of strings)."""
    rng = np.random.default_rng(seed)
    d = len(NUMERIC)
    # fixed geometry shared by train and test files: independent of ``seed``
    geo = np.random.default_rng(12345)
    base = np.linalg.qr(geo.standard_normal((d, latent_dim)))[0]
    tilt = np.linalg.qr(geo.standard_normal((d, latent_dim)))[0]
    attack_dirs = {c: geo.standard_normal(d) for c in ("DoS", "Probe", "R2L", "U2R")}
    taxonomy = Taxonomy.load()
    known, new = {}, {}
    for key, cls in sorted(taxonomy.main_class.items()):
        (known if taxonomy.in_training[key] else new).setdefault(cls, []).append(key)
    dst_col = NUMERIC.index("dst_bytes")

    def normal_block(n):
        pos = rng.uniform(0, 1, n)
        lat = rng.standard_normal((latent_dim, n)) * np.linspace(3, 1, latent_dim)[:, None]
        # orientation interpolates between two subspaces along ``pos``
        x = (base @ lat) * (1 - pos) + (tilt @ lat) * pos + noise * rng.standard_normal((d, n))
        x[dst_col] = np.abs(x[dst_col]) * 1000 * (1 + 9 * pos)
        return x

    rows = []
    normals = normal_block(n_normal)
    for j in range(n_normal):
        rows.append((normals[:, j], "normal"))
    classes = ("DoS", "Probe", "R2L", "U2R")
    weights = np.array([0.55, 0.25, 0.15, 0.05])
    attacks = normal_block(n_attack)
    for j in range(n_attack):
        cls = classes[rng.choice(4, p=weights)]
        pool = known[cls] + (new[cls] if include_new else [])
        sub = pool[rng.integers(len(pool))]
        x = attacks[:, j] + attack_scale * rng.standard_normal() * attack_dirs[cls]
        rows.append((x, sub))
    order = rng.permutation(len(rows))
    num_pos = [COLUMNS.index(c) for c in NUMERIC]
    cat_pos = [COLUMNS.index(c) for c in CATEGORICAL]
    out = []
    for idx in order:
        x, label = rows[idx]
        fields = [""] * len(COLUMNS)
        for p, v in zip(num_pos, x):
            fields[p] = repr(round(float(v), 6))
        for p, choices in zip(cat_pos, (_PROTOCOLS, _SERVICES, _FLAGS)):
            fields[p] = choices[rng.integers(len(choices))]
        fields.append(label)
        if difficulty:
            fields.append(str(int(rng.integers(1, 22))))
        out.append(fields)
    return out


def write_csv(path, rows):
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def write_dataset(directory, n_train_normal=2000, n_train_attack=600, n_test_normal=800,
                  n_test_attack=900, seed=0):
    """Write ``KDDTrain+.txt`` and ``KDDTest+.txt`` into ``directory``."""
    import os

    train = generate_records(n_train_normal, n_train_attack, seed=seed)
    test = generate_records(n_test_normal, n_test_attack, seed=seed + 1, include_new=True)
    paths = (os.path.join(directory, "KDDTrain+.txt"), os.path.join(directory, "KDDTest+.txt"))
    write_csv(paths[0], train)
    write_csv(paths[1], test)
    return paths


if __name__ == "__main__":
    import argparse

    ap = argparse.ArgumentParser(description="write synthetic NSL-KDD style CSVs")
    ap.add_argument("directory")
    ap.add_argument("--seed", type=int, default=0)
    ns = ap.parse_args()
    import os

    os.makedirs(ns.directory, exist_ok=True)
    for p in write_dataset(ns.directory, seed=ns.seed):
        print(p)
