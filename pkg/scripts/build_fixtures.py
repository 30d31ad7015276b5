#!/usr/bin/env python3
"""Rebuild the bundled data fixtures from public raw sources.

Two files are produced under ``data/``:

``a9a.gz`` / ``a9a.t.gz``
    The UCI Adult census data binarised into the 123 indicator features of the
    LIBSVM ``a9a`` encoding: continuous attributes cut into quantile bins,
    categorical attributes one-hot in ``adult.names`` order, missing values
    ("?") left as all-zero groups.  The bin edges are quintiles of the training
    split, so individual rows may land in a neighbouring bin compared with the
    canonical LIBSVM file.  Drop the canonical file in with ``--train/--test``
    paths in the experiment config when it is available.

``gisette_like.gz`` / ``gisette_like.t.gz``
    A 500-feature, gisette-style surrogate (MNIST 4 vs 9): high-variance
    pixels, pairwise pixel products, and permuted "probe" columns carrying no
    label information, column order shuffled, every feature scaled to [-1, 1].

Usage::

    python scripts/build_fixtures.py --adult-dir DIR --mnist PATH [--out data]

``DIR`` must hold ``adult.data`` and ``adult.test``; ``PATH`` is a CSV (gzip
ok) with 784 pixel columns and a trailing label column.
"""
from __future__ import annotations

import argparse
import gzip
from pathlib import Path

import numpy as np

CONTINUOUS_BINS = {"age": 5, "fnlwgt": 5, "education-num": 5, "hours-per-week": 5}

CATEGORIES = {
    "workclass": ["Private", "Self-emp-not-inc", "Self-emp-inc", "Federal-gov",
                  "Local-gov", "State-gov", "Without-pay", "Never-worked"],
    "education": ["Bachelors", "Some-college", "11th", "HS-grad", "Prof-school",
                  "Assoc-acdm", "Assoc-voc", "9th", "7th-8th", "12th", "Masters",
                  "1st-4th", "10th", "Doctorate", "5th-6th", "Preschool"],
    "marital-status": ["Married-civ-spouse", "Divorced", "Never-married", "Separated",
                       "Widowed", "Married-spouse-absent", "Married-AF-spouse"],
    "occupation": ["Tech-support", "Craft-repair", "Other-service", "Sales",
                   "Exec-managerial", "Prof-specialty", "Handlers-cleaners",
                   "Machine-op-inspct", "Adm-clerical", "Farming-fishing",
                   "Transport-moving", "Priv-house-serv", "Protective-serv",
                   "Armed-Forces"],
    "relationship": ["Wife", "Own-child", "Husband", "Not-in-family", "Other-relative",
                     "Unmarried"],
    "race": ["White", "Asian-Pac-Islander", "Amer-Indian-Eskimo", "Other", "Black"],
    "sex": ["Female", "Male"],
    "native-country": ["United-States", "Cambodia", "England", "Puerto-Rico", "Canada",
                       "Germany", "Outlying-US(Guam-USVI-etc)", "India", "Japan", "Greece",
                       "South", "China", "Cuba", "Iran", "Honduras", "Philippines", "Italy",
                       "Poland", "Jamaica", "Vietnam", "Mexico", "Portugal", "Ireland",
                       "France", "Dominican-Republic", "Laos", "Ecuador", "Taiwan", "Haiti",
                       "Columbia", "Hungary", "Guatemala", "Nicaragua", "Scotland",
                       "Thailand", "Yugoslavia", "El-Salvador", "Trinadad&Tobago", "Peru",
                       "Hong", "Holand-Netherlands"],
}

# (attribute, kind) in a9a column order; "nonzero" is a zero / nonzero indicator pair.
LAYOUT = [
    ("age", "bins"), ("workclass", "cat"), ("fnlwgt", "bins"), ("education", "cat"),
    ("education-num", "bins"), ("marital-status", "cat"), ("occupation", "cat"),
    ("relationship", "cat"), ("race", "cat"), ("sex", "cat"),
    ("capital-gain", "nonzero"), ("capital-loss", "nonzero"),
    ("hours-per-week", "bins"), ("native-country", "cat"),
]
COLUMNS = ["age", "workclass", "fnlwgt", "education", "education-num", "marital-status",
           "occupation", "relationship", "race", "sex", "capital-gain", "capital-loss",
           "hours-per-week", "native-country", "income"]


def _read_adult(path):
    rows = []
    for line in Path(path).read_text().splitlines():
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != len(COLUMNS):
            continue
        rows.append(dict(zip(COLUMNS, parts)))
    return rows


def _quantile_edges(values, n_bins):
    # Heavily tied attributes collapse quintile edges; refine the grid until
    # n_bins - 1 distinct cut points exist.
    for m in (1, 2, 4, 8, 16):
        qs = np.unique(np.quantile(values, np.linspace(0, 1, n_bins * m + 1)[1:-1]))
        if len(qs) >= n_bins - 1:
            pick = np.round(np.linspace(0, len(qs) - 1, n_bins - 1)).astype(int)
            return qs[pick]
    return qs


def encode_adult(train_rows, test_rows):
    edges = {
        name: _quantile_edges(np.array([float(r[name]) for r in train_rows]), k)
        for name, k in CONTINUOUS_BINS.items()
    }

    def encode(row):
        feats, offset = [], 0
        for name, kind in LAYOUT:
            raw = row[name]
            if kind == "bins":
                k = CONTINUOUS_BINS[name]
                b = int(np.searchsorted(edges[name], float(raw), side="right"))
                feats.append(offset + min(b, k - 1) + 1)
                offset += k
            elif kind == "nonzero":
                feats.append(offset + (1 if float(raw) == 0 else 2))
                offset += 2
            else:
                cats = CATEGORIES[name]
                if raw in cats:
                    feats.append(offset + cats.index(raw) + 1)
                offset += len(cats)
        label = "+1" if row["income"].startswith(">50K") else "-1"
        return label + " " + " ".join(f"{j}:1" for j in feats)

    return [encode(r) for r in train_rows], [encode(r) for r in test_rows]


def build_gisette_like(pixels, labels, seed=20190612):
    rng = np.random.default_rng(seed)
    keep = np.isin(labels, (4, 9))
    X = pixels[keep] / 255.0
    y = np.where(labels[keep] == 9, 1, -1)

    var_order = np.argsort(-X.var(axis=0), kind="stable")
    base = X[:, var_order[:200]]
    pairs = rng.choice(200, size=(100, 2), replace=True)
    products = base[:, pairs[:, 0]] * base[:, pairs[:, 1]]
    real = np.hstack([base, products])
    probe_src = rng.choice(real.shape[1], size=200, replace=True)
    probes = np.column_stack([rng.permutation(real[:, j]) for j in probe_src])
    feats = np.hstack([real, probes])[:, rng.permutation(500)]

    lo, hi = feats.min(axis=0), feats.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    feats = 2.0 * (feats - lo) / span - 1.0

    order = rng.permutation(len(y))
    n_train = int(0.8 * len(y))
    return (feats[order[:n_train]], y[order[:n_train]]), (feats[order[n_train:]], y[order[n_train:]])


def _libsvm_lines(X, y):
    for row, label in zip(X, y):
        nz = np.flatnonzero(row)
        body = " ".join(f"{j + 1}:{row[j]:.6g}" for j in nz)
        yield (f"{int(label):+d} " + body).rstrip()


def _write_gz(path, lines):
    with gzip.open(path, "wt", compresslevel=9) as fh:
        for line in lines:
            fh.write(line + "\n")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--adult-dir", type=Path, required=True)
    ap.add_argument("--mnist", type=Path, required=True)
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "data")
    args = ap.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)

    train = _read_adult(args.adult_dir / "adult.data")
    test = _read_adult(args.adult_dir / "adult.test")
    tr_lines, te_lines = encode_adult(train, test)
    _write_gz(args.out / "a9a.gz", tr_lines)
    _write_gz(args.out / "a9a.t.gz", te_lines)
    print(f"a9a: {len(tr_lines)} train / {len(te_lines)} test rows")

    opener = gzip.open if args.mnist.suffix == ".gz" else open
    with opener(args.mnist, "rt") as fh:
        raw = np.loadtxt(fh, delimiter=",")
    (Xtr, ytr), (Xte, yte) = build_gisette_like(raw[:, :-1], raw[:, -1].astype(int))
    _write_gz(args.out / "gisette_like.gz", _libsvm_lines(Xtr, ytr))
    _write_gz(args.out / "gisette_like.t.gz", _libsvm_lines(Xte, yte))
    print(f"gisette_like: {len(ytr)} train / {len(yte)} test rows, 500 features")


if __name__ == "__main__":
    main()
