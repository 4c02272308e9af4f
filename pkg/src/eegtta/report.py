"""LOSO streaming evaluation: pretraining per fold, mode runs, reports.

A provider object supplies training records and target streams per fold;
``run_protocol`` pretrains (or loads a cached checkpoint), streams the
held-out subject through the requested mode, and aggregates per-subject
metrics into a RunReport. Folds can run in worker processes; aggregation
is an ordered reduction over subject ids, so reports are deterministic
regardless of worker count.
"""

import copy
import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .adapter import AdaptConfig, AdapterState, LogEntry, run_stream
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SynthConfig, loso_folds, synth_stream
from .losses import softmax
from .metrics import compute_metrics
from .network import build_eegnet
from .pretrain import pretrain, records_to_arrays

MODE_SOURCE_ONLY = "source_only"
ADAPT_MODES = ("full", "no_bn", "no_mem", "no_pl")
MODE_BN_SWEEP = "bn_sweep"
BN_SWEEP_MODES = ("batch_only", "track_running", "fixed_source")


@dataclass
class ProtocolConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 0.001
    pretrain_segments_per_subject: int | None = None
    pretrain_data_seed: int = 777
    pretrain_seed: int = 4242
    workers: int = 1
    checkpoint_dir: str | None = None


@dataclass
class RunReport:
    mode: str
    seed: int
    per_subject: list                  # [{subject, f1, auroc, ...}, ...]
    mean: dict
    std: dict
    latency_ms: dict
    config: dict
    name: str = "run"


class SynthProvider:
    """Folds over synthetic subjects; pretraining data and target streams
    come from independent seeds so evaluation seeds never leak into the
    source model."""

    def __init__(self, synth_cfg, protocol):
        self.cfg = synth_cfg
        self.protocol = protocol

    def subjects(self):
        return list(range(1, self.cfg.subjects + 1))

    def net_kwargs(self):
        return {"channels": self.cfg.channels, "samples": self.cfg.samples}

    def train_records(self, train_subjects):
        per = self.protocol.pretrain_segments_per_subject
        cfg = self.cfg
        if per is not None and per != cfg.stream_length:
            cfg = replace(cfg, stream_length=per)
        streams = synth_stream(cfg, seed=self.protocol.pretrain_data_seed,
                               subjects=train_subjects)
        return [r for s in train_subjects for r in streams[s]]

    def target_stream(self, subject, eval_seed):
        return synth_stream(self.cfg, seed=eval_seed,
                            subjects=[subject])[subject]

    def cache_token(self, target):
        return json.dumps({"synth": asdict(self.cfg), "target": target},
                          sort_keys=True)

    def config_snapshot(self):
        return {"synth": asdict(self.cfg)}


class DatasetProvider:
    """Folds over loaded (already labeled and filtered) per-subject streams."""

    def __init__(self, streams, protocol):
        if not streams:
            raise ValueError("no subjects in dataset")
        self.streams = {s: sorted(records, key=lambda r: r.trial)
                        for s, records in streams.items()}
        self.protocol = protocol
        any_record = next(iter(self.streams.values()))[0]
        self.channels, self.samples = any_record.segment.shape

    def subjects(self):
        return sorted(self.streams)

    def net_kwargs(self):
        return {"channels": self.channels, "samples": self.samples}

    def train_records(self, train_subjects):
        per = self.protocol.pretrain_segments_per_subject
        out = []
        for s in train_subjects:
            labeled = [r for r in self.streams[s] if r.label >= 0]
            out.extend(labeled if per is None else labeled[:per])
        return out

    def target_stream(self, subject, eval_seed):
        return [r for r in self.streams[subject] if r.label >= 0]

    def cache_token(self, target):
        h = hashlib.sha256()
        for s in self.subjects():
            if s == target:
                continue
            for r in self.streams[s]:
                h.update(r.segment.tobytes())
                h.update(bytes([r.label & 0xFF]))
        return h.hexdigest()

    def config_snapshot(self):
        return {"dataset_subjects": self.subjects()}


def _checkpoint_path(provider, protocol, target):
    if protocol.checkpoint_dir is None:
        return None
    key = hashlib.sha256()
    key.update(provider.cache_token(target).encode()
               if isinstance(provider.cache_token(target), str)
               else provider.cache_token(target))
    key.update(json.dumps([protocol.epochs, protocol.batch_size, protocol.lr,
                           protocol.pretrain_segments_per_subject,
                           protocol.pretrain_data_seed,
                           protocol.pretrain_seed], sort_keys=True).encode())
    return Path(protocol.checkpoint_dir) / f"ckpt_{key.hexdigest()[:20]}.sawt"


def checkpoint_for_fold(provider, protocol, fold):
    """Load the fold's cached source model or pretrain it now."""
    train_subjects, target = fold
    path = _checkpoint_path(provider, protocol, target)
    if path is not None and path.exists():
        return load_checkpoint(path)
    net = build_eegnet(seed=protocol.pretrain_seed + target,
                       **provider.net_kwargs())
    x, y = records_to_arrays(provider.train_records(train_subjects))
    pretrain(net, x, y, epochs=protocol.epochs,
             batch_size=protocol.batch_size, lr=protocol.lr,
             seed=protocol.pretrain_seed + target)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(net, path)
    return net


def source_only_stream(net, records):
    """Forward-only evaluation; parameters are never touched."""
    log = []
    for step, r in enumerate(records, start=1):
        t0 = time.perf_counter()
        x = np.asarray(r.segment, dtype=net.dtype)[np.newaxis, np.newaxis]
        res = net.forward(x, keep_cache=False)
        probs = softmax(res.logits)[0]
        log.append(LogEntry(
            step=step, true_label=None if r.label < 0 else int(r.label),
            pred=int(res.logits.argmax()),
            probs=[float(v) for v in probs], predictor="classifier",
            latency_ms=(time.perf_counter() - t0) * 1e3))
    return log


def _adapt_seed(eval_seed, subject):
    return int(np.random.SeedSequence([eval_seed, subject])
               .generate_state(1)[0])


def _run_fold(provider, adapt_cfg, mode, protocol, eval_seed, fold):
    train_subjects, target = fold
    net = checkpoint_for_fold(provider, protocol, fold)
    records = provider.target_stream(target, eval_seed)
    if mode == MODE_SOURCE_ONLY:
        log = source_only_stream(net, records)
    elif mode in ADAPT_MODES:
        cfg = replace(adapt_cfg, variant=mode,
                      seed=_adapt_seed(eval_seed, target))
        log = run_stream(AdapterState(net, cfg), records)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    result = compute_metrics(log)
    result["subject"] = target
    result["steps"] = len(log)
    return result, [e.latency_ms for e in log]


def run_protocol(provider, adapt_cfg, mode, protocol=None, eval_seed=0):
    """Stream every LOSO target through ``mode`` and aggregate a RunReport.

    ``bn_sweep`` runs the full method under the three BN statistic regimes
    and returns {regime: RunReport}.
    """
    protocol = protocol or ProtocolConfig()
    if mode == MODE_BN_SWEEP:
        return {bn: run_protocol(provider, replace(adapt_cfg, bn_mode=bn),
                                 "full", protocol, eval_seed)
                for bn in BN_SWEEP_MODES}
    folds = loso_folds(provider.subjects())
    jobs = [(provider, adapt_cfg, mode, protocol, eval_seed, fold)
            for fold in folds]
    if protocol.workers > 1:
        with ProcessPoolExecutor(max_workers=protocol.workers) as pool:
            outcomes = list(pool.map(_run_fold_star, jobs))
    else:
        outcomes = [_run_fold(*job) for job in jobs]
    outcomes.sort(key=lambda pair: pair[0]["subject"])
    per_subject = [m for m, _ in outcomes]
    latencies = np.concatenate([l for _, l in outcomes])
    metric_names = ("f1", "auroc", "precision", "recall")
    mean = {k: float(np.mean([m[k] for m in per_subject]))
            for k in metric_names}
    std = {k: float(np.std([m[k] for m in per_subject]))
           for k in metric_names}
    config = {"adapt": asdict(adapt_cfg),
              "protocol": {k: v for k, v in asdict(protocol).items()
                           if k != "checkpoint_dir"},
              "mode": mode, "eval_seed": eval_seed}
    config.update(provider.config_snapshot())
    return RunReport(
        mode=mode, seed=eval_seed, per_subject=per_subject, mean=mean,
        std=std,
        latency_ms={"mean": float(latencies.mean()),
                    "p50": float(np.percentile(latencies, 50)),
                    "max": float(latencies.max())},
        config=config)


def _run_fold_star(args):
    return _run_fold(*args)


# ---- emission ----------------------------------------------------------------

def emit_report(report, out_dir, features=None):
    """Write report.json and per_subject.csv (and features.csv on request).

    Emission is byte-stable: re-emitting the same report reproduces the
    files exactly. Percentages in the CSV carry two decimals.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    report_path = out / "report.json"
    with open(report_path, "w", encoding="utf-8") as f:
        json.dump(asdict(report), f, indent=2, sort_keys=True)
        f.write("\n")
    written.append(report_path)
    csv_path = out / "per_subject.csv"
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write("subject,f1,auroc,precision,recall\n")
        for row in report.per_subject:
            f.write(f"S{row['subject']},{row['f1']:.2f},{row['auroc']:.2f},"
                    f"{row['precision']:.2f},{row['recall']:.2f}\n")
        for name, stats in (("mean", report.mean), ("std", report.std)):
            f.write(f"{name},{stats['f1']:.2f},{stats['auroc']:.2f},"
                    f"{stats['precision']:.2f},{stats['recall']:.2f}\n")
    written.append(csv_path)
    if features:
        feat_path = out / "features.csv"
        dim = len(features[0][2])
        with open(feat_path, "w", encoding="utf-8") as f:
            header = ",".join(f"f{i}" for i in range(dim))
            f.write(f"step,class,{header}\n")
            for step, cls, vec in features:
                vals = ",".join(f"{float(v):.6g}" for v in vec)
                f.write(f"{step},{cls},{vals}\n")
        written.append(feat_path)
    return written
