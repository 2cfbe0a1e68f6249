import numpy as np
import pytest

from mae_lab import harness, metrics, spectro, synth
from mae_lab.synth import ParticipantProfile, SynthConfig

SMALL = SynthConfig(n_participants=6, recordings_per_participant=2, n_frames=64)


def prof(cues, pid="P9"):
    return ParticipantProfile(pid, tuple(cues))


def test_spectrogram_shape_and_determinism():
    p = prof([0.7, 0.2, 0.6, 0.1])
    a = synth.synth_spectrogram(p, 3, 42)
    b = synth.synth_spectrogram(p, 3, 42)
    assert a.values.shape == (128, 256)
    assert a.values.tobytes() == b.values.tobytes()
    assert synth.synth_spectrogram(p, 4, 42).values.tobytes() != a.values.tobytes()


def test_clean_stack_variance_sits_on_harmonics():
    s = synth.synth_spectrogram(prof([0, 0, 0, 0]), 0, 1)
    g = spectro.patchify(s)
    # patches that hold a harmonic peak (within 30 dB of the loudest bin)
    peak = g.patches.max(axis=1) > s.values.max() - 30
    assert g.per_patch_var[peak].mean() > 10 * g.per_patch_var[~peak].mean()


def test_respiratory_cue_fills_inter_harmonic_regions():
    for seed in range(20):
        clean = synth.synth_spectrogram(prof([0, 0, 0, 0]), 0, seed).values
        breathy = synth.synth_spectrogram(prof([0, 1, 0, 0]), 0, seed).values
        low = clean < np.median(clean)
        assert breathy[low].mean() > clean[low].mean()


def _upper_band_var(cues, seed):
    v = spectro.patchify(synth.synth_spectrogram(prof(cues), 0, seed)).per_patch_var
    return v.reshape(8, 16)[4:].mean()


@pytest.mark.parametrize("k", [0, 2])
def test_modulation_cues_raise_patch_variance(k):
    # shimmer and voice breaks act on the weak upper harmonics, which is
    # where they add patch variance; paired over seeds
    cues = [0.0] * 4
    cues[k] = 1.0
    for seed in range(10):
        assert _upper_band_var(cues, seed) > _upper_band_var([0] * 4, seed)


def test_breath_noise_flattens_harmonic_patches():
    # a noise floor fills the valleys between harmonics, so within-patch
    # variance goes down where the harmonics are
    for seed in range(5):
        lo = spectro.patchify(synth.synth_spectrogram(prof([0] * 4), 0, seed)).per_patch_var
        hi = spectro.patchify(synth.synth_spectrogram(prof([0, 1, 0, 0]), 0, seed)).per_patch_var
        assert hi.reshape(8, 16)[:2].mean() < lo.reshape(8, 16)[:2].mean()


def test_static_features():
    p = prof([0, 0, 0, 0])
    v = synth.synth_static_features(p, 0, 5, noise=0.0)
    assert v.shape == (131,)
    assert np.all(v[:8] == 0.0)
    np.testing.assert_array_equal(synth.synth_static_features(p, 1, 5), synth.synth_static_features(p, 1, 5))
    q = prof([0.8, 0.3, 0.55, 0.1])
    w = synth.synth_static_features(q, 0, 5, noise=0.0)
    np.testing.assert_allclose(w[:8], [0.8, 0.8 * 0.8 + 0.2 * 0.3, 0.3, 0.8 * 0.3 + 0.2 * 0.55,
                                       0.55, 0.8 * 0.55 + 0.2 * 0.1, 0.1, 0.8 * 0.1 + 0.2 * 0.8])


def test_distractors_uncorrelated_with_labels():
    cfg = SynthConfig(n_participants=250)
    profiles = synth.make_profiles(cfg)
    X, Y = [], []
    for p in profiles:
        for r in range(cfg.recordings_per_participant):
            X.append(synth.synth_static_features(p, r, cfg.seed, cfg))
            Y.append(p.labels)
    X, Y = np.array(X), np.array(Y, dtype=float)
    assert len(X) >= 1000
    d = (X[:, 8:] - X[:, 8:].mean(0)) / X[:, 8:].std(0)
    y = (Y - Y.mean(0)) / Y.std(0)
    corr = d.T @ y / len(X)
    assert np.max(np.abs(corr)) < 0.1
    cue = (X[:, :8] - X[:, :8].mean(0)) / X[:, :8].std(0)
    assert np.all(np.abs(np.diag((cue[:, ::2].T @ y) / len(X))) > 0.5)


def test_profiles_labels_and_comorbidity():
    profiles = synth.make_profiles(SynthConfig())
    cues = np.array([p.cue_intensities for p in profiles])
    labels = np.array([p.labels for p in profiles])
    assert np.all((cues >= 0) & (cues <= 1))
    np.testing.assert_array_equal(labels, cues >= 0.5)
    assert np.any(labels.sum(axis=1) >= 2)
    target = np.array([52.0, 51.1, 36.2, 32.8])
    assert np.all(np.abs(100 * labels.mean(axis=0) - target) <= 10)


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(n_participants=3).validate()
    with pytest.raises(ValueError):
        SynthConfig(shimmer_depth=1.5).validate()


def test_generate_corpus_files_and_determinism(tmp_path):
    recs, profiles = synth.generate_corpus(SMALL, tmp_path / "a")
    synth.generate_corpus(SMALL, tmp_path / "b")
    assert len(recs) == 12
    a = (tmp_path / "a" / "manifest.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "manifest.jsonl").read_bytes()
    back = synth.read_manifest(tmp_path / "a" / "manifest.jsonl")
    assert [r.record_id for r in back] == sorted(r.record_id for r in back)
    for r in back:
        s = spectro.read_spectrogram(synth.resolve_path(tmp_path / "a" / "manifest.jsonl", r))
        assert s.values.shape == (128, 64)
        assert r.static_features.shape == (131,)
        assert r.labels == next(p.labels for p in profiles if p.participant_id == r.participant_id)


def test_default_corpus_is_384_records():
    cfg = SynthConfig()
    assert len(synth.make_profiles(cfg)) * cfg.recordings_per_participant == 384


def test_manifest_rejects_duplicates(tmp_path):
    r = synth.RecordManifest("a", "P0", "x.spgm", (True, False, False, False), np.zeros(131))
    with pytest.raises(ValueError):
        synth.write_manifest([r, r], tmp_path / "m.jsonl")


def test_stump_oracle_learns_cues():
    profiles = synth.make_profiles(SynthConfig())
    recs = [synth.RecordManifest(p.participant_id, p.participant_id, "", p.labels, np.zeros(131)) for p in profiles]
    train, test = harness.participant_split(recs, 0.2, 0)
    cues = {p.participant_id: p.cue_intensities for p in profiles}
    xtr = np.array([cues[r.participant_id] for r in train])
    ytr = np.array([r.labels for r in train])
    rules = synth.fit_stump_oracle(xtr, ytr)
    xte = np.array([cues[r.participant_id] for r in test])
    pred = synth.predict_stump_oracle(rules, xte)
    assert metrics.macro_f1(pred.astype(float), np.array([r.labels for r in test])) >= 0.95
