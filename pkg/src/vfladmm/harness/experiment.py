"""Experiment driver: data preparation, runs in each role, metrics and manifests."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import __version__, engine, kernels
from .. import objective as obj
from ..dataset import (LabeledDataset, PartitionSpec, PartyShard, load_libsvm, normalize_dataset_rows,
                       normalize_rows, vertical_split)
from ..engine import HyperParams, reduce_shares
from ..privacy import PrivacyParams, total_budget
from ..transport import (CoordinatorLog, PartyLog, TcpCoordinatorLink, TcpPartyLink, TransportTimeout,
                         assemble_trace, coordinator_serve, party_serve)
from .baselines import evaluate_scores
from .config import ConfigError, ExperimentConfig

log = logging.getLogger(__name__)

CSV_FIELDS = ("epoch", "train_objective", "test_log_loss", "test_accuracy", "primal_residual",
              "lyapunov", "epsilon_spent", "wall_ms")
SWEEP_FIELDS = ("multiplier", "seed", "test_log_loss", "test_accuracy", "train_objective", "epsilon_spent")


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    train_objective: float
    test_log_loss: float
    test_accuracy: float
    primal_residual: float
    lyapunov: float
    epsilon_spent: float
    wall_ms: float

    def __post_init__(self):
        vals = asdict(self)
        bad = [k for k, v in vals.items() if not math.isfinite(v)]
        if bad:
            raise ValueError(f"epoch {self.epoch}: non-finite metrics {bad}")

    def row(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(getattr(self, f))) for f in CSV_FIELDS[1:]]

    @classmethod
    def from_row(cls, row: dict) -> "MetricsRecord":
        return cls(int(row["epoch"]), *(float(row[f]) for f in CSV_FIELDS[1:]))


def write_metrics_csv(path: str | Path, records: Sequence[MetricsRecord]) -> None:
    epochs = [r.epoch for r in records]
    if any(b <= a for a, b in zip(epochs, epochs[1:])):
        raise ValueError("epochs must strictly increase")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for r in records:
            w.writerow(r.row())


def read_metrics_csv(path: str | Path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_FIELDS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [MetricsRecord.from_row(r) for r in reader]


def git_blob_sha1(path: str | Path) -> str:
    """Content hash as ``git hash-object`` computes it."""
    h = hashlib.sha1()
    size = os.path.getsize(path)
    h.update(b"blob %d\0" % size)
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def epsilon_spent(privacy: PrivacyParams | None, epoch: int) -> float:
    if privacy is None:
        return 0.0
    return total_budget(privacy.epsilon, privacy.delta, epoch, privacy.delta_prime)[0]


# ------------------------------------------------------------------ data

@dataclass
class PreparedData:
    train: LabeledDataset
    test: LabeledDataset
    partition: PartitionSpec
    shards: list[PartyShard]
    test_blocks: list[np.ndarray]

    @property
    def labels(self) -> np.ndarray:
        return self.train.labels


def prepare_data(config: ExperimentConfig, full_data: bool = False) -> PreparedData:
    for p in (config.train_path, config.test_path):
        if not Path(p).is_file():
            raise ConfigError(f"data file not found: {p}")
    spec = PartitionSpec(tuple(config.partition))
    d = config.n_features or spec.total
    max_rows = None if full_data else config.max_rows
    try:
        train = load_libsvm(config.train_path, n_features=d, max_rows=max_rows)
        test = load_libsvm(config.test_path, n_features=d, label_map=train.label_map)
    except ValueError as exc:
        raise ConfigError(f"dataset does not fit the configured {d} features: {exc}") from None
    if spec.total != d:
        raise ConfigError(f"partition widths sum to {spec.total}, datasets have {d} features")
    if config.row_normalization == "global":
        train, test = normalize_dataset_rows(train), normalize_dataset_rows(test)
    shards = vertical_split(train, spec)
    test_shards = vertical_split(test, spec)
    if config.row_normalization == "party":
        shards = [normalize_rows(s) for s in shards]
        test_shards = [normalize_rows(s) for s in test_shards]
    return PreparedData(train, test, spec, shards, [s.block for s in test_shards])


def resolve_hyper(config: ExperimentConfig, data: PreparedData) -> HyperParams:
    n = data.train.n_samples
    if config.hyper.rho == "recommend":
        if config.role != "local-sim":
            raise ConfigError("hyper.rho='recommend' needs every party's spectrum; give a number for distributed roles")
        lam = config.lam_for(n)
        profile = obj.loss_profile(obj.ObjectiveConfig(lam, config.loss_scale_for(n)))
        try:
            rho = engine.recommend_rho(data.shards, profile, lam)
        except ValueError as exc:
            raise ConfigError(f"hyper.rho: {exc}") from None
    else:
        rho = float(config.hyper.rho)
    return config.hyper_params(n, rho)


# --------------------------------------------------------------- running

@dataclass
class ExperimentResult:
    records: list[MetricsRecord]
    x: tuple[np.ndarray, ...] | None
    hyper: HyperParams
    trace: list = field(default_factory=list)
    assumption: object = None
    outputs: dict = field(default_factory=dict)


def _records(trace, test_scores, test_labels, privacy, wall) -> list[MetricsRecord]:
    out = []
    for rec, scores, ms in zip(trace, test_scores, wall):
        ll, acc = evaluate_scores(scores, test_labels)
        out.append(MetricsRecord(rec.epoch, rec.objective, ll, acc, rec.primal_residual, rec.lyapunov,
                                 epsilon_spent(privacy, rec.epoch), ms))
    return out


def run_local(config: ExperimentConfig, data: PreparedData, hyper: HyperParams | None = None,
              sigma_multiplier: float = 1.0, privacy: PrivacyParams | None = None) -> ExperimentResult:
    """In-process run; test metrics are evaluated after every epoch."""
    hyper = hyper or resolve_hyper(config, data)
    privacy = privacy if privacy is not None else config.privacy_params()
    test_scores, wall = [], []
    t0 = time.perf_counter()

    def observe(rec, state):
        wall.append((time.perf_counter() - t0) * 1e3)
        test_scores.append(reduce_shares([B @ x for B, x in zip(data.test_blocks, state.x)]))

    result = engine.run(data.shards, data.labels, hyper, privacy=privacy, callbacks=[observe],
                        sigma_multiplier=sigma_multiplier)
    records = _records(result.trace, test_scores, data.test.labels, privacy, wall)
    return ExperimentResult(records, result.state.x, hyper, result.trace, result.assumption)


def sidecar_path(out: str | Path, party_id: int) -> Path:
    return Path(f"{out}.party{party_id}.npz")


def _write_sidecar(path: Path, plog: PartyLog, test_shares) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, party_id=plog.party_id, x=plog.x,
                 reg=np.array([t.reg for t in plog.terms]),
                 grad_map_sq=np.array([t.grad_map_sq for t in plog.terms]),
                 stationarity=np.array([t.stationarity for t in plog.terms]),
                 test_shares=np.array(test_shares).reshape(len(test_shares), -1))
    os.replace(tmp, path)


def _read_sidecar(path: Path) -> tuple[PartyLog, np.ndarray]:
    with np.load(path) as z:
        terms = [engine.PartyTerms(float(r), float(g), float(s))
                 for r, g, s in zip(z["reg"], z["grad_map_sq"], z["stationarity"])]
        return PartyLog(int(z["party_id"]), z["x"].copy(), terms), z["test_shares"].copy()


def run_party(config: ExperimentConfig, data: PreparedData, hyper: HyperParams | None = None,
              out: str | Path | None = None) -> PartyLog:
    """Serve one party over TCP and leave its private diagnostics in a sidecar file."""
    hyper = hyper or resolve_hyper(config, data)
    k = config.party_id
    shard, test_block = data.shards[k], data.test_blocks[k]
    test_shares = []
    plog = party_serve(shard, TcpPartyLink(config.connect), hyper, config.privacy_params(),
                       timeout=config.timeout, on_round=lambda t, x: test_shares.append(test_block @ x))
    out = out or config.output_csv
    _write_sidecar(sidecar_path(out, k), plog, test_shares)
    return plog


def run_coordinator(config: ExperimentConfig, data: PreparedData, hyper: HyperParams | None = None,
                    out: str | Path | None = None) -> ExperimentResult:
    """Serve the central node; the metrics need every party's sidecar, awaited up to the timeout."""
    hyper = hyper or resolve_hyper(config, data)
    out = out or config.output_csv
    M = data.partition.n_parties
    link = TcpCoordinatorLink(config.listen, M)
    log.info("coordinator listening on %s for %d parties", link.address, M)
    wall = []
    t0 = time.perf_counter()
    try:
        clog: CoordinatorLog = coordinator_serve(
            link, data.labels, hyper, M, config.timeout,
            on_round=lambda t, c: wall.append((time.perf_counter() - t0) * 1e3))
    finally:
        link.close()
    if clog.widths != data.partition.boundaries:
        raise ConfigError(f"parties registered widths {clog.widths}, config says {data.partition.boundaries}")
    parties, shares = [], []
    deadline = time.monotonic() + config.timeout
    for k in range(M):
        path = sidecar_path(out, k)
        while not path.exists():
            if time.monotonic() > deadline:
                raise TransportTimeout(f"party {k} left no diagnostics at {path} within {config.timeout:g} s")
            time.sleep(0.05)
        plog, ts = _read_sidecar(path)
        parties.append(plog)
        shares.append(ts)
    trace = assemble_trace(clog, parties, hyper)
    test_scores = [reduce_shares([s[t] for s in shares]) for t in range(len(trace))]
    records = _records(trace, test_scores, data.test.labels, config.privacy_params(), wall)
    return ExperimentResult(records, tuple(p.x for p in parties), hyper, trace)


def manifest(config: ExperimentConfig, result: ExperimentResult | None, full_data: bool, **extra) -> dict:
    inputs = {}
    for p in (config.train_path, config.test_path):
        if Path(p).is_file():
            inputs[p] = git_blob_sha1(p)
    doc = {
        "package_version": __version__,
        "kernel_backend": kernels.BACKEND,
        "config": config.model_dump(mode="json"),
        "full_data": full_data,
        "inputs": inputs,
    }
    if result is not None:
        doc["resolved"] = {"rho": result.hyper.rho, "lam": result.hyper.lam,
                           "loss_scale": result.hyper.loss_scale, "epochs": len(result.records)}
        if result.assumption is not None:
            doc["assumption_check"] = {"passed": result.assumption.passed,
                                       "checks": dict(result.assumption.checks)}
        if result.records:
            doc["final"] = asdict(result.records[-1])
    doc.update(extra)
    return doc


def run_experiment(config: ExperimentConfig, full_data: bool = False, out: str | Path | None = None) -> ExperimentResult:
    """Run in the configured role and write the CSV, manifest and (when known) the model.

    Outputs for ``out = metrics.csv``: ``metrics.csv``,
    ``metrics.manifest.json`` and ``metrics.model.npz``.  A party writes
    only its sidecar ``metrics.csv.party<k>.npz``.
    """
    out = Path(out or config.output_csv)
    out.parent.mkdir(parents=True, exist_ok=True)
    data = prepare_data(config, full_data)
    hyper = resolve_hyper(config, data)
    if config.role == "party":
        plog = run_party(config, data, hyper, out)
        return ExperimentResult([], (plog.x,), hyper, outputs={"sidecar": str(sidecar_path(out, plog.party_id))})
    if config.role == "coordinator":
        result = run_coordinator(config, data, hyper, out)
    else:
        result = run_local(config, data, hyper)
    write_metrics_csv(out, result.records)
    model_path = out.with_suffix(".model.npz")
    np.savez(model_path, **{f"x{m}": x for m, x in enumerate(result.x)})
    man_path = out.with_suffix(".manifest.json")
    result.outputs = {"csv": str(out), "model": str(model_path), "manifest": str(man_path)}
    man_path.write_text(json.dumps(manifest(config, result, full_data, outputs=result.outputs), indent=2))
    return result


# ----------------------------------------------------------------- sweep

@dataclass(frozen=True)
class SweepRow:
    multiplier: float
    seed: int
    test_log_loss: float
    test_accuracy: float
    train_objective: float
    epsilon_spent: float


def noise_sweep(config: ExperimentConfig, sigma_multipliers: Sequence[float] | None = None,
                seeds: int | Sequence[int] | None = None, full_data: bool = False,
                out: str | Path | None = None) -> list[SweepRow]:
    """Final test metrics for every (noise multiplier, seed) pair.

    Seeds default to ``privacy.seed + i`` for ``i < sweep.seeds``.  Each
    multiplier scales the calibrated sigma; 0 keeps the ball constraint but
    adds no noise.
    """
    base = config.privacy_params()
    if base is None:
        raise ConfigError("noise sweep needs a privacy section")
    mults = list(config.sweep.multipliers if sigma_multipliers is None else sigma_multipliers)
    if seeds is None:
        seeds = config.sweep.seeds
    seed_list = [base.seed + i for i in range(seeds)] if isinstance(seeds, int) else list(seeds)
    data = prepare_data(config, full_data)
    hyper = resolve_hyper(config, data)
    rows = []
    for mult in mults:
        for seed in seed_list:
            priv = PrivacyParams(base.epsilon, base.delta, base.delta_prime, base.b1, base.c1, seed)
            res = run_local(config, data, hyper, sigma_multiplier=mult, privacy=priv)
            last = res.records[-1]
            rows.append(SweepRow(float(mult), seed, last.test_log_loss, last.test_accuracy,
                                 last.train_objective, last.epsilon_spent))
    if out is not None:
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SWEEP_FIELDS)
            for r in rows:
                w.writerow([repr(r.multiplier), r.seed] + [repr(getattr(r, f)) for f in SWEEP_FIELDS[2:]])
    return rows
