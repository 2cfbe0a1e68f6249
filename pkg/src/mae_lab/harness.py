"""Experiment orchestration: participant splits, hyperparameter search, and
the 8-cell ablation grid with its two baselines."""

import csv
import hashlib
import io
import itertools
import json
import logging
import math
import os
import subprocess
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import classifier, mae, metrics, spectro, synth
from .classifier import FinetuneData, FinetuneHyper
from .mae import MaeConfig
from .synth import SynthConfig

log = logging.getLogger(__name__)

TEST_FRACTION = 0.2
VAL_FRACTION = 0.2
TUNE_GRID = {"lr": (1e-3, 5e-4, 1e-4), "batch_size": (32, 64, 128)}

# canonical cell order: (loss, norm, mask)
CELLS = tuple(itertools.product(("ma_error", "mse"), (True, False), ("content_aware", "random")))
BASELINE_STATIC = "Static features only (131-d)"
BASELINE_RANDOM = "Random-init encoder"


def cell_name(loss_kind, norm_targets, mask_strategy):
    parts = ["MA-Error" if loss_kind == "ma_error" else "MSE"]
    parts.append("Norm" if norm_targets else "NoNorm")
    parts.append("CA" if mask_strategy == "content_aware" else "Random")
    return "SSL-AST " + "+".join(parts)


def cell_slug(name):
    return "".join(ch.lower() if ch.isalnum() else "_" for ch in name).strip("_")


# ------------------------------------------------------------------ dataset

@dataclass
class Dataset:
    records: list
    data: FinetuneData
    corpus: mae.PatchCorpus

    def __len__(self):
        return len(self.records)

    def indices_for(self, participant_ids):
        keep = set(participant_ids)
        return np.array([i for i, r in enumerate(self.records) if r.participant_id in keep], dtype=np.int64)


def load_dataset(manifest_path, config):
    """Read a manifest and all its spectrograms into patch arrays."""
    records = synth.read_manifest(manifest_path)
    if not records:
        raise ValueError(f"manifest {manifest_path} is empty")
    specs = []
    for r in records:
        path = synth.resolve_path(manifest_path, r)
        if not path.exists():
            raise FileNotFoundError(f"spectrogram for {r.record_id} not found at {path}")
        specs.append(spectro.read_spectrogram(path, id=r.record_id))
    corpus = mae.build_corpus(specs, config)
    data = FinetuneData(
        ids=[r.record_id for r in records],
        participant_ids=[r.participant_id for r in records],
        static=np.stack([r.static_features for r in records]),
        labels=np.array([r.labels for r in records], dtype=bool),
        patches=corpus.patches,
    )
    return Dataset(records, data, corpus)


# ------------------------------------------------------------------- splits

def _participants(records):
    return sorted({r.participant_id for r in records})


def participant_split(records, test_fraction=TEST_FRACTION, seed=0):
    """Split records by participant; ``round(test_fraction * P)`` participants
    go to test. Returns ``(train_records, test_records)``."""
    pids = _participants(records)
    P = len(pids)
    if P < 2:
        raise ValueError(f"need at least 2 participants, got {P}")
    n_test = int(round(test_fraction * P))
    if not 0 < n_test < P:
        raise ValueError(f"test_fraction {test_fraction} leaves an empty side with {P} participants")
    perm = np.random.default_rng(seed).permutation(P)
    test_ids = {pids[i] for i in perm[:n_test]}
    train = [r for r in records if r.participant_id not in test_ids]
    test = [r for r in records if r.participant_id in test_ids]
    assert not ({r.participant_id for r in train} & test_ids)
    return train, test


def split_hash(*parts):
    """Short digest of the record ids on each side of a split."""
    h = hashlib.sha256()
    for part in parts:
        h.update(("\n".join(sorted(r.record_id for r in part)) + "\n--\n").encode())
    return h.hexdigest()[:16]


def participant_folds(records, folds=5, seed=0):
    """Partition participants into ``folds`` near-equal groups."""
    pids = _participants(records)
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if len(pids) < folds:
        raise ValueError(f"{len(pids)} participants cannot fill {folds} folds")
    perm = np.random.default_rng(seed).permutation(len(pids))
    return [sorted(pids[i] for i in perm[f::folds]) for f in range(folds)]


# ---------------------------------------------------------------- tuning

@dataclass
class TuneResult:
    best: FinetuneHyper
    scores: dict  # (lr, batch) -> mean validation Macro F1
    fits: int
    warnings: list
    refit: object = None


def tune_hyperparameters(encoder, dataset, train_records, grid=None, folds=5, seed=0, base=None,
                         fit=classifier.fit_classifier):
    """Participant-level k-fold search over ``grid`` (lr x batch_size).

    Each grid cell is fitted once per fold with early stopping on the held-out
    fold; the cell with the best mean validation Macro F1 wins (first in grid
    order on ties). The winner is refitted on all of ``train_records`` for the
    mean best epoch seen in its folds.
    """
    grid = grid or TUNE_GRID
    base = base or FinetuneHyper()
    cells = list(itertools.product(grid["lr"], grid["batch_size"]))
    if not cells:
        raise ValueError("empty grid")
    groups = participant_folds(train_records, folds, seed)
    all_idx = dataset.indices_for(_participants(train_records))
    scores, best_epochs, warnings = {}, {}, []
    fits = 0
    for lr, bs in cells:
        hyper = replace(base, lr=lr, batch_size=bs)
        fold_scores, epochs = [], []
        for f, held in enumerate(groups):
            va_idx = dataset.indices_for(held)
            tr_idx = np.setdiff1d(all_idx, va_idx)
            tr, va = dataset.data.subset(tr_idx), dataset.data.subset(va_idx)
            model = fit(encoder, tr, va, hyper, seed=seed)
            fits += 1
            rep = model.evaluate(va)
            warnings += [f"lr={lr} batch={bs} fold={f}: {w}" for w in rep.warnings]
            fold_scores.append(rep.macro_f1)
            epochs.append(max(1, max((h.get("best_epoch", 0) for h in model.history), default=1)))
        scores[(lr, bs)] = float(np.mean(fold_scores))
        best_epochs[(lr, bs)] = int(round(np.mean(epochs)))
    (lr, bs) = max(cells, key=lambda c: (scores[c], -cells.index(c)))
    best = replace(base, lr=lr, batch_size=bs, max_epochs=best_epochs[(lr, bs)])
    refit = fit(encoder, dataset.data.subset(all_idx), None, best, seed=seed)
    return TuneResult(best, scores, fits, warnings, refit)


# ------------------------------------------------------------- ablation

@dataclass
class AblationSpec:
    synth: SynthConfig = field(default_factory=SynthConfig)
    mae: MaeConfig = field(default_factory=MaeConfig)
    finetune: FinetuneHyper = field(default_factory=FinetuneHyper)
    seeds: tuple = tuple(range(10))
    pretrain_epochs: int = 30
    pretrain_seed: int = 0
    master_seed: int = 0
    cells: tuple = ()  # empty: all eight
    baselines: bool = True
    workers: int = 1

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ValueError("seed list must not be empty")
        if len(CELLS) != 8:
            raise AssertionError("ablation grid must have 8 cells")
        names = {cell_name(*c) for c in CELLS}
        unknown = [c for c in self.cells if c not in names and cell_slug(c) not in map(cell_slug, names)]
        if unknown:
            raise ValueError(f"unknown cells: {unknown}")

    def selected_cells(self):
        if not self.cells:
            return list(CELLS)
        wanted = {cell_slug(c) for c in self.cells}
        return [c for c in CELLS if cell_slug(cell_name(*c)) in wanted]

    def cell_config(self, cell):
        return mae.with_cell(self.mae, *cell)

    def to_dict(self):
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["cells"] = list(self.cells)
        return d

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class FixedSplit:
    train: list
    val: list
    test: list

    @property
    def hash(self):
        return split_hash(self.train, self.val, self.test)


def fixed_split(records, master_seed):
    """Test participants first, then a validation group carved from the rest."""
    train_val, test = participant_split(records, TEST_FRACTION, master_seed)
    train, val = participant_split(train_val, VAL_FRACTION, master_seed + 1)
    return FixedSplit(train, val, test)


def git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             timeout=10, cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def ensure_corpus(spec, out_dir):
    """Reuse ``out_dir/corpus`` when its config matches, else regenerate."""
    corpus_dir = Path(out_dir) / "corpus"
    manifest = corpus_dir / "manifest.jsonl"
    cfg_file = corpus_dir / "synth_config.json"
    want = json.loads(json.dumps(asdict(spec.synth), sort_keys=True))
    if manifest.exists() and cfg_file.exists():
        if json.loads(cfg_file.read_text()) == want:
            return manifest
    synth.generate_corpus(spec.synth, corpus_dir)
    return manifest


def pretrain_cell(config, dataset_corpus, epochs, seed, ckpt_path, log_path):
    """Pre-train one cell or load its cached encoder; returns (model, history)."""
    ckpt_path, log_path = Path(ckpt_path), Path(log_path)
    meta_path = ckpt_path.with_suffix(".json")
    key = {"config_hash": config.config_hash(), "epochs": epochs, "seed": seed, "n": len(dataset_corpus)}
    if ckpt_path.exists() and meta_path.exists():
        meta = json.loads(meta_path.read_text())
        if meta.get("key") == key:
            model = mae.MaeModel.load(ckpt_path, config)
            return model, meta["history"]
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    model = mae.MaeModel.init(config)
    with open(log_path, "w", encoding="utf-8") as fh:
        model, history = mae.pretrain(model, dataset_corpus, config, epochs, seed, log_fh=fh)
    model.save(ckpt_path)
    meta_path.write_text(json.dumps({"key": key, "history": history}, indent=1))
    return model, history


def _pretrain_job(args):
    config, corpus, epochs, seed, ckpt, logp = args
    model, history = pretrain_cell(config, corpus, epochs, seed, ckpt, logp)
    return history


def _worker_count(spec):
    cap = os.environ.get("MAE_LAB_THREADS")
    n = spec.workers
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


@dataclass
class CellResult:
    name: str
    reports: list
    aggregate: dict
    pretrain_history: list = None
    split_hash: str = ""


def evaluate_encoder(encoder, dataset, split, hyper, seeds, name):
    tr = dataset.data.subset(dataset.indices_for(_participants(split.train)))
    va = dataset.data.subset(dataset.indices_for(_participants(split.val)))
    te = dataset.data.subset(dataset.indices_for(_participants(split.test)))
    reports = []
    for s in seeds:
        fitted = classifier.fit_classifier(encoder, tr, va, hyper, seed=s)
        reports.append(fitted.evaluate(te, name))
    return reports


def _aggregate(reports):
    if len(reports) >= 2:
        return metrics.seed_aggregate(reports)
    r = reports[0]
    return {m: metrics.Aggregate(float(getattr(r, m)), math.nan, 1) for m in metrics.METRICS}


def run_ablation(spec, out_dir, manifest_path=None):
    """Run the grid and write ``ablation.csv`` (+ ``ablation.json`` sidecar and
    per-seed ``ablation_seeds.csv``) under ``out_dir``. Returns the CSV text."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = Path(manifest_path) if manifest_path else ensure_corpus(spec, out)
    dataset = load_dataset(manifest_path, spec.mae)
    split = fixed_split(dataset.records, spec.master_seed)
    s_hash = split.hash

    cells = spec.selected_cells()
    jobs = []
    for cell in cells:
        name = cell_name(*cell)
        d = out / "cells" / cell_slug(name)
        jobs.append((spec.cell_config(cell), dataset.corpus, spec.pretrain_epochs, spec.pretrain_seed,
                     d / "encoder.tgck", d / "pretrain_log.jsonl"))

    histories, failures = {}, {}
    workers = _worker_count(spec)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_pretrain_job, j) for j in jobs]
            for cell, fut in zip(cells, futures):
                try:
                    histories[cell] = fut.result()
                except Exception as err:  # recorded, run continues
                    failures[cell_name(*cell)] = f"pretrain: {type(err).__name__}: {err}"

    results = []
    for cell, job in zip(cells, jobs):
        name = cell_name(*cell)
        if name in failures:
            continue
        try:
            model, hist = pretrain_cell(*job)
            reports = evaluate_encoder(model, dataset, split, spec.finetune, spec.seeds, name)
            results.append(CellResult(name, reports, _aggregate(reports), hist, s_hash))
        except Exception as err:
            log.exception("cell %s failed", name)
            failures[name] = f"{type(err).__name__}: {err}"

    if spec.baselines:
        baselines = [(BASELINE_STATIC, None)]
        rand = mae.MaeModel.init(spec.mae, seed=spec.pretrain_seed)
        rand.input_mean, rand.input_std = mae.corpus_stats(dataset.corpus)
        baselines.append((BASELINE_RANDOM, rand))
        for name, enc in baselines:
            try:
                reports = evaluate_encoder(enc, dataset, split, spec.finetune, spec.seeds, name)
                results.append(CellResult(name, reports, _aggregate(reports), None, s_hash))
            except Exception as err:
                log.exception("baseline %s failed", name)
                failures[name] = f"{type(err).__name__}: {err}"

    # stable sort keeps canonical order among equal means
    results.sort(key=lambda r: -r.aggregate["macro_f1"].mean)
    text = metrics.aggregate_csv([(r.name, r.aggregate) for r in results])
    (out / "ablation.csv").write_text(text, encoding="utf-8")
    (out / "ablation_seeds.csv").write_text(_seed_csv(results, spec.seeds), encoding="utf-8")
    sidecar = {
        "master_seed": spec.master_seed,
        "split_hash": s_hash,
        "config_hash": spec.config_hash(),
        "git_describe": git_describe(),
        "rows": {r.name: {"split_hash": r.split_hash, "pretrain_history": r.pretrain_history} for r in results},
        "failures": failures,
        "split": {k: _participants(getattr(split, k)) for k in ("train", "val", "test")},
    }
    (out / "ablation.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True), encoding="utf-8")
    return text


def _seed_csv(results, seeds):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("model", "seed") + metrics.METRICS)
    for r in results:
        for s, rep in zip(seeds, r.reports):
            w.writerow([r.name, s] + [f"{getattr(rep, m):.6f}" for m in metrics.METRICS])
    return buf.getvalue()


def read_ablation_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.reader(fh))


def tiny_spec(**kw):
    """Small settings for smoke runs and protocol tests."""
    base = dict(
        synth=SynthConfig(n_participants=10, recordings_per_participant=2, n_frames=64, n_mels=32),
        mae=MaeConfig(n_mels=32, n_frames=64, patch_size=8, encoder_dim=16, encoder_heads=2,
                          decoder_dim=16, decoder_heads=2, batch_size=4),
        finetune=FinetuneHyper(max_epochs=3, patience=2, batch_size=8),
        seeds=(0, 1),
        pretrain_epochs=2,
    )
    base.update(kw)
    return AblationSpec(**base)
