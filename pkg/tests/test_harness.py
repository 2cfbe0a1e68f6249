import json
from types import SimpleNamespace

import numpy as np
import pytest

from mae_lab import harness, metrics, synth
from mae_lab.classifier import FinetuneData, FinetuneHyper


def _records(n_participants, per=2):
    return [synth.RecordManifest(f"P{p:02d}-{r}", f"P{p:02d}", "", (True, False, False, False), np.zeros(131))
            for p in range(n_participants) for r in range(per)]


def _pids(records):
    return {r.participant_id for r in records}


def test_participant_split_counts_and_disjointness():
    recs = _records(48, 3)
    train, test = harness.participant_split(recs, 0.2, 7)
    assert (len(_pids(test)), len(_pids(train))) == (10, 38)
    assert not _pids(train) & _pids(test)
    assert len(train) + len(test) == len(recs)
    again, _ = harness.participant_split(recs, 0.2, 7)
    assert [r.record_id for r in again] == [r.record_id for r in train]
    with pytest.raises(ValueError):
        harness.participant_split(_records(1), 0.2, 0)


def test_fixed_split_sizes_and_hash():
    split = harness.fixed_split(_records(48), 0)
    assert [len(_pids(getattr(split, k))) for k in ("test", "val", "train")] == [10, 8, 30]
    assert split.hash == harness.fixed_split(_records(48), 0).hash
    assert split.hash != harness.fixed_split(_records(48), 1).hash


def test_folds_partition_participants():
    recs = _records(38)
    folds = harness.participant_folds(recs, 5, 3)
    flat = [p for f in folds for p in f]
    assert sorted(flat) == sorted(_pids(recs)) and len(flat) == len(set(flat))
    assert max(map(len, folds)) - min(map(len, folds)) <= 1


def _dataset(n_participants, per=2):
    recs = _records(n_participants, per)
    data = FinetuneData([r.record_id for r in recs], [r.participant_id for r in recs],
                        np.zeros((len(recs), 131)), np.zeros((len(recs), 4), bool))
    return harness.Dataset(recs, data, None)


class _StubFit:
    """Records every call; scores favour lr=5e-4 with batch 64."""

    def __init__(self):
        self.calls = []

    def __call__(self, encoder, tr, va, hyper, seed=0):
        self.calls.append((hyper.lr, hyper.batch_size, va is None, hyper.max_epochs))
        if va is not None:
            assert not set(tr.participant_ids) & set(va.participant_ids)
        score = 1.0 - abs(hyper.lr - 5e-4) * 100 - abs(hyper.batch_size - 64) / 1000
        rep = metrics.MetricsReport(score, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5)
        return SimpleNamespace(evaluate=lambda data: rep, history=[{"best_epoch": 3}])


def test_tune_runs_45_fits_and_refits():
    ds = _dataset(20)
    stub = _StubFit()
    res = harness.tune_hyperparameters(None, ds, ds.records, folds=5, seed=0, fit=stub)
    assert res.fits == 45
    assert (res.best.lr, res.best.batch_size, res.best.max_epochs) == (5e-4, 64, 3)
    assert len(stub.calls) == 46 and stub.calls[-1][2]


def test_tune_single_cell_still_refits():
    ds = _dataset(10)
    stub = _StubFit()
    res = harness.tune_hyperparameters(None, ds, ds.records, grid={"lr": (1e-3,), "batch_size": (32,)},
                                       folds=2, fit=stub)
    assert res.fits == 2 and (res.best.lr, res.best.batch_size) == (1e-3, 32)
    assert stub.calls[-1][2] and res.refit is not None


def test_ablation_spec_validation():
    with pytest.raises(ValueError):
        harness.AblationSpec(seeds=())
    with pytest.raises(ValueError):
        harness.AblationSpec(cells=("SSL-AST Nope",))
    spec = harness.AblationSpec(cells=("SSL-AST MA-Error+Norm+CA",))
    assert spec.selected_cells() == [("ma_error", True, "content_aware")]
    assert len(harness.AblationSpec().selected_cells()) == 8


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("ablate")
    text = harness.run_ablation(harness.tiny_spec(), out)
    return out, text


def test_tiny_ablation_rows_and_columns(tiny_run):
    out, text = tiny_run
    rows = harness.read_ablation_csv(out / "ablation.csv")
    assert rows[0] == list(metrics.COLUMNS)
    assert len(rows) == 11
    names = [r[0] for r in rows[1:]]
    assert harness.BASELINE_STATIC in names and harness.BASELINE_RANDOM in names
    means = [float(r[1].split(" ")[0]) for r in rows[1:]]
    assert means == sorted(means, reverse=True)
    side = json.loads((out / "ablation.json").read_text())
    assert {"master_seed", "split_hash", "config_hash", "git_describe"} <= set(side)
    assert {v["split_hash"] for v in side["rows"].values()} == {side["split_hash"]}
    assert not side["failures"]
    seeds = (out / "ablation_seeds.csv").read_text().splitlines()
    assert len(seeds) == 1 + 10 * 2


def test_tiny_ablation_rerun_is_byte_identical(tiny_run, tmp_path):
    out, text = tiny_run
    # a fresh directory forces pre-training again instead of reading the cache
    assert harness.run_ablation(harness.tiny_spec(), tmp_path) == text
    assert (tmp_path / "ablation.csv").read_bytes() == (out / "ablation.csv").read_bytes()


def test_cell_failure_is_recorded(tiny_run, monkeypatch, tmp_path):
    out, _ = tiny_run
    real = harness.pretrain_cell

    def flaky(config, *a, **kw):
        if config.loss_kind == "mse" and not config.norm_targets and config.mask_strategy == "random":
            raise RuntimeError("boom")
        return real(config, *a, **kw)

    monkeypatch.setattr(harness, "pretrain_cell", flaky)
    spec = harness.tiny_spec(baselines=False)
    text = harness.run_ablation(spec, tmp_path, manifest_path=out / "corpus" / "manifest.jsonl")
    side = json.loads((tmp_path / "ablation.json").read_text())
    assert list(side["failures"]) == ["SSL-AST MSE+NoNorm+Random"]
    assert "boom" in side["failures"]["SSL-AST MSE+NoNorm+Random"]
    assert len(text.splitlines()) == 1 + 7


def test_worker_cap(monkeypatch):
    monkeypatch.setenv("MAE_LAB_THREADS", "2")
    assert harness._worker_count(harness.AblationSpec(workers=8)) == 2
    monkeypatch.delenv("MAE_LAB_THREADS")
    assert harness._worker_count(harness.AblationSpec(workers=3)) == 3
