"""End-to-end run orchestration and metrics persistence.

A run is a pure function of (config, seed): datasets, partitions,
capacities, initialization and every per-client batch order derive from
named seed streams, and client results are reduced in client-id order,
so metrics.csv comes out byte-identical however work is scheduled.
"""
from __future__ import annotations

import json
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import __version__, baselines, protocol
from .config import RunConfig, snapshot
from .data import load_idx, partition_dirichlet, partition_k_of_k, synth_gaussian
from .decomp import supported_widths
from .errors import ConfigurationError, NumericError
from .model import CnnArch, ConvBlock, build_layout

CSV_HEADER = "round,client_id,capacity_r,width_p,train_loss,val_acc,test_acc,alpha_selected"


@dataclass
class RunRecord:
    config: RunConfig
    rounds: list          # RoundMetrics per completed round
    status: str           # ok | failed
    early_stopped: bool
    wall_time: float
    out_dir: str
    audits: list = None


def build_dataset(cfg: RunConfig):
    if cfg.dataset == "synth":
        seed = int(np.random.SeedSequence((cfg.seed, protocol.TAG_DATA)).generate_state(1)[0])
        return synth_gaussian(cfg.synth_classes, cfg.synth_per_class,
                              shape=tuple(cfg.synth_shape),
                              separation=cfg.synth_separation, seed=seed)
    return load_idx(cfg.idx_images, cfg.idx_labels)


def build_partition(cfg: RunConfig, dataset):
    seed = int(np.random.SeedSequence((cfg.seed, protocol.TAG_PARTITION)).generate_state(1)[0])
    if cfg.partition == "dirichlet":
        return partition_dirichlet(dataset, cfg.clients, cfg.dirichlet_alpha, seed)
    return partition_k_of_k(dataset, cfg.clients, cfg.classes_per_client, seed)


def build_arch(cfg: RunConfig, dataset) -> CnnArch:
    c, h, w = dataset.features.shape[1:]
    convs = tuple(ConvBlock(ch, cfg.conv_kernel, 1, cfg.conv_kernel // 2, True)
                  for ch in cfg.conv_channels)
    return CnnArch(c, h, w, convs=convs, hidden=tuple(cfg.fc_dims),
                   classes=dataset.classes)


def build_profiles(cfg: RunConfig, partition):
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, protocol.TAG_CAPACITY)))
    profiles = protocol.assign_capacities(
        cfg.clients, cfg.capacity, rng, supported_widths(cfg.min_width))
    for prof, cd in zip(profiles, partition.clients):
        prof.data = cd
    return profiles


def build_method(cfg: RunConfig, profiles, layout):
    if cfg.method == "Pa3dFL":
        return protocol.DecomposedFL(profiles, layout, cfg, cfg.seed)
    if cfg.method == "Pa3dFL_NoHNAgg":
        return protocol.DecomposedFL(profiles, layout, cfg, cfg.seed,
                                     hn_aggregation=False)
    if cfg.method == "Pa3dFL_FlancDecomp":
        return protocol.DecomposedFL(profiles, layout, cfg, cfg.seed,
                                     recovery="flanc")
    if cfg.method == "FedAvgMinWidth":
        return baselines.FedAvgMinWidth(profiles, layout, cfg, cfg.seed)
    if cfg.method == "PWidthNested":
        return baselines.PWidthNested(profiles, layout, cfg, cfg.seed)
    if cfg.method == "LocalOnly":
        return baselines.LocalOnly(profiles, layout, cfg, cfg.seed)
    raise ConfigurationError(f"unknown method {cfg.method!r}")


def run(cfg: RunConfig, audit=False) -> RunRecord:
    """Execute one configured run; writes metrics.csv and summary.json.

    On a numeric failure the partial record is flagged `failed` on disk
    and the error re-raised for the caller.
    """
    started = time.monotonic()
    dataset = build_dataset(cfg)
    arch = build_arch(cfg, dataset)
    layout = build_layout(arch, cfg.min_width)
    partition = build_partition(cfg, dataset)
    profiles = build_profiles(cfg, partition)
    method = build_method(cfg, profiles, layout)
    patience = None
    if cfg.patience_frac > 0 and cfg.rounds > 0:
        patience = max(1, int(round(cfg.patience_frac * cfg.rounds)))
    executor = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    rounds, audits = [], []
    history = []
    early = False
    status = "ok"
    try:
        for t in range(cfg.rounds):
            metrics = method.run_round(t, executor=executor, audit=audit)
            rounds.append(metrics)
            if audit:
                audits.append(metrics.audit)
            history.append(metrics.mean_val)
            if patience is not None and protocol.early_stop(history, patience):
                early = True
                break
    except NumericError:
        status = "failed"
        record = RunRecord(cfg, rounds, status, early, time.monotonic() - started,
                           cfg.out_dir, audits)
        persist(record)
        raise
    finally:
        if executor is not None:
            executor.shutdown()
    record = RunRecord(cfg, rounds, status, early, time.monotonic() - started,
                       cfg.out_dir, audits)
    persist(record)
    return record


# ---------------------------------------------------------------------------
# persistence

def _atomic_write(path, text):
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x):
    return repr(float(x))


def metrics_csv(record: RunRecord) -> str:
    lines = [CSV_HEADER]
    for metrics in record.rounds:
        for row in metrics.rows:
            lines.append(",".join([
                str(metrics.round), str(row.client), _fmt(row.capacity),
                str(Fraction(row.width)), _fmt(row.train_loss),
                _fmt(row.val_acc), _fmt(row.test_acc), _fmt(row.alpha),
            ]))
    return "\n".join(lines) + "\n"


def summary_json(record: RunRecord) -> str:
    from .report import capacity_clusters

    final_rows = record.rounds[-1].rows if record.rounds else []
    tests = [r.test_acc for r in final_rows]
    clusters = capacity_clusters(
        [{"client_id": r.client, "capacity_r": r.capacity, "test_acc": r.test_acc}
         for r in final_rows]) if final_rows else []
    payload = {
        "version": __version__,
        "status": record.status,
        "config": snapshot(record.config),
        "rounds_completed": len(record.rounds),
        "early_stopped": record.early_stopped,
        "wall_time_s": record.wall_time,
        "params_exchanged_total": int(sum(m.params_exchanged for m in record.rounds)),
        "final": {
            "mean_test_acc": float(np.mean(tests)) if tests else None,
            "std_test_acc": float(np.std(tests)) if tests else None,
            "per_client": [
                {"client": r.client, "capacity": r.capacity, "width": str(Fraction(r.width)),
                 "val_acc": r.val_acc, "test_acc": r.test_acc,
                 "alpha": None if np.isnan(r.alpha) else r.alpha}
                for r in final_rows
            ],
            "capacity_clusters": clusters,
        },
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def persist(record: RunRecord):
    os.makedirs(record.out_dir, exist_ok=True)
    _atomic_write(os.path.join(record.out_dir, "metrics.csv"), metrics_csv(record))
    _atomic_write(os.path.join(record.out_dir, "summary.json"), summary_json(record))
