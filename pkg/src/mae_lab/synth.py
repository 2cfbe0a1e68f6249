"""Synthetic pathological-voice corpus with known labels.

Every participant carries four cue intensities in [0, 1] (voice,
respiratory, neurological, mood); label k is ``cue[k] >= 0.5``. Each
recording is a harmonic stack rendered on a 128-band mel axis (16 kHz audio,
10 ms hop) and converted to decibels. The cues act on the rendering as:

    voice         amplitude shimmer
    respiratory   bursty broadband breath noise, strongest above ~2 kHz
    neurological  F0 jitter plus occasional voice breaks
    mood          slow sinusoidal tremor in F0 and loudness

The random modulations are low-passed over a few frames (``CUE_SMOOTH_FRAMES``)
so they read as short-lived irregularities rather than white noise; a
10 ms-hop spectrogram cannot resolve true cycle-to-cycle variation anyway.

Random streams are always drawn in full and then scaled by the cue, so two
profiles that differ only in one cue share every other random component
under the same seed.
"""

import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .spectro import Spectrogram, write_spectrogram

LABEL_NAMES = ("voice", "respiratory", "neurological", "mood")
# prevalence among participants (Table 1 of the source study)
TABLE1_PREVALENCE = (0.520, 0.511, 0.362, 0.328)
N_STATIC = 131
N_CUE_STATIC = 8

SAMPLE_RATE = 16000
HOP_SECONDS = 0.010
DB_FLOOR_POWER = 1e-10
# voice breaks: fraction of frames at full neurological cue, and their depth
BREAK_RATE = 0.2
BREAK_DB = 30.0
FLOOR_BAND_DB = 3.0
FLOOR_TEXTURE_DB = 0.3
BREATH_TEXTURE_SHAPE = 8.0
CUE_SMOOTH_FRAMES = 3.0
# (centre Hz, bandwidth Hz, peak gain dB) of a neutral vowel
FORMANTS = ((500.0, 120.0, 12.0), (1500.0, 180.0, 10.0), (2500.0, 250.0, 8.0))


@dataclass
class ParticipantProfile:
    participant_id: str
    cue_intensities: tuple
    recordings_per_participant: int = 8

    @property
    def labels(self):
        return tuple(bool(c >= 0.5) for c in self.cue_intensities)


@dataclass
class SynthConfig:
    n_participants: int = 48
    recordings_per_participant: int = 8
    n_frames: int = 256
    n_mels: int = 128
    seed: int = 0
    jitter_depth: float = 0.01
    shimmer_depth: float = 0.2
    breath_noise_floor: float = 0.5
    tremor_rate: float = 5.0
    tremor_depth: float = 0.02
    static_noise: float = 0.1
    comorbidity_corr: float = 0.35
    prevalence: tuple = TABLE1_PREVALENCE

    def validate(self):
        if self.n_participants < 4:
            raise ValueError("n_participants must be >= 4")
        if self.recordings_per_participant < 1:
            raise ValueError("recordings_per_participant must be >= 1")
        for name in ("jitter_depth", "shimmer_depth", "breath_noise_floor", "tremor_depth"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if len(self.prevalence) != 4 or not all(0 < p < 1 for p in self.prevalence):
            raise ValueError("prevalence must be four values in (0, 1)")
        return self


def _stream(seed, *keys):
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, *keys])


def _pid_key(participant_id):
    return zlib.crc32(participant_id.encode("utf-8"))


# ------------------------------------------------------------------ mel axis

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_axis(n_mels):
    """Center frequencies and Gaussian half-widths (Hz) of the mel bands."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(SAMPLE_RATE / 2), n_mels + 2))
    centers = edges[1:-1]
    width = 0.5 * (edges[2:] - edges[:-2])
    return centers, np.maximum(0.5 * width, 8.0)


# ---------------------------------------------------------------- rendering

def _smooth(z, sd):
    """Circular Gaussian low-pass of white noise, rescaled to unit variance."""
    n = z.shape[-1]
    lag = np.minimum(np.arange(n), n - np.arange(n))
    k = np.exp(-0.5 * (lag / sd) ** 2)
    k /= math.sqrt(np.sum(k * k))
    return np.fft.irfft(np.fft.rfft(z, axis=-1) * np.fft.rfft(k), n=n, axis=-1)


def _channel_profile(seed, n_mels):
    """Per-band floor offsets shared by every recording of a corpus, as if all
    were captured through the same microphone chain."""
    return _stream(seed, 0, 0, 3).standard_normal(n_mels)


def _formant_gain(f, shift):
    """Power gain of a fixed three-resonance vocal-tract envelope, scaled in
    frequency by ``1 + shift`` (speaker-to-speaker variation)."""
    g = np.ones_like(f)
    for centre, bw, peak_db in FORMANTS:
        z = (f - centre * (1.0 + shift)) / bw
        g = g + (10.0 ** (peak_db / 10.0) - 1.0) * np.exp(-0.5 * z * z)
    return g


def _normal_cdf(z):
    return 0.5 * (1.0 + np.vectorize(math.erf)(z / math.sqrt(2.0)))


def synth_spectrogram(profile, recording_index, seed, config=None):
    cfg = config or SynthConfig()
    voice, resp, neuro, mood = (float(c) for c in profile.cue_intensities)
    rng = _stream(seed, _pid_key(profile.participant_id), recording_index, 1)
    n_frames, n_mels = cfg.n_frames, cfg.n_mels

    # draw every stream up front so cues only scale them
    f0_mel = rng.uniform(hz_to_mel(80.0), hz_to_mel(260.0))
    gain_db = rng.uniform(-6.0, 6.0)
    tremor_phase = rng.uniform(0.0, 2 * math.pi)
    jitter_z = rng.standard_normal(n_frames)
    shimmer_z = rng.standard_normal(n_frames)
    breath_tex = rng.gamma(BREATH_TEXTURE_SHAPE, 1.0 / BREATH_TEXTURE_SHAPE, size=(n_mels, n_frames))
    burst_z = rng.standard_normal(n_frames)
    break_z = rng.standard_normal(n_frames)
    formant_shift = rng.uniform(-0.08, 0.08)
    floor_z = rng.standard_normal((n_mels, n_frames))

    jitter_z = _smooth(jitter_z, CUE_SMOOTH_FRAMES)
    shimmer_z = _smooth(shimmer_z, CUE_SMOOTH_FRAMES)
    burst_z = _smooth(burst_z, CUE_SMOOTH_FRAMES)
    # thresholding a smooth field gives breaks that last several frames
    break_u = _normal_cdf(_smooth(break_z, CUE_SMOOTH_FRAMES))

    f0 = float(mel_to_hz(f0_mel))
    t = np.arange(n_frames) * HOP_SECONDS
    wobble = np.sin(2 * math.pi * cfg.tremor_rate * t + tremor_phase)
    tremor = cfg.tremor_depth * mood * wobble
    jitter = cfg.jitter_depth * neuro * jitter_z
    f0_t = f0 * (1.0 + tremor) * (1.0 + jitter)  # (T,)
    amp_db = 10.0 * cfg.shimmer_depth * voice * shimmer_z
    amp_db += 60.0 * cfg.tremor_depth * mood * wobble
    amp_db -= np.where(break_u < BREAK_RATE * neuro, BREAK_DB, 0.0)
    amp_t = 10.0 ** (amp_db / 20.0)

    centers, sd = mel_axis(n_mels)
    n_harm = int((SAMPLE_RATE / 2) // 80.0)
    h = np.arange(1, n_harm + 1, dtype=np.float64)
    fh = f0_t[:, None] * h[None, :]  # (T, H)
    # -6 dB/octave tilt with a soft high-frequency rolloff
    hpow = (1.0 / h ** 2)[None, :] * np.exp(-(fh / 3000.0) ** 2) * (amp_t ** 2)[:, None]
    hpow = np.where(fh < SAMPLE_RATE / 2, hpow, 0.0)
    hpow = hpow * _formant_gain(fh, formant_shift)
    z = (centers[None, None, :] - fh[:, :, None]) / sd[None, None, :]
    power = np.einsum("th,thm->mt", hpow, np.exp(-0.5 * z * z))

    # low floor near -90 dB: the corpus-wide channel profile plus faint texture
    floor_db = FLOOR_BAND_DB * _channel_profile(seed, n_mels)[:, None] + FLOOR_TEXTURE_DB * floor_z
    power += 1e-9 * 10.0 ** (floor_db / 10.0)
    # breath noise: tilted upward in frequency, bursty in time, mildly textured
    shape = 0.3 + 0.7 / (1.0 + np.exp(-(centers - 2000.0) / 400.0))
    burst = np.exp(1.2 * burst_z)
    level = (cfg.breath_noise_floor * resp) ** 2 * 1e-3
    power += level * shape[:, None] * burst[None, :] * breath_tex

    db = 10.0 * np.log10(power + DB_FLOOR_POWER) + gain_db
    meta = {"f0_hz": f0, "gain_db": gain_db, "n_fft": 400, "win_ms": 25, "hop_ms": 10}
    return Spectrogram(db, id=f"{profile.participant_id}-r{recording_index:03d}", meta=meta)


def synth_static_features(profile, recording_index, seed, config=None, noise=None):
    """131-d static vector: 8 cue-driven dims, then 123 standard-normal distractors.

    Dim ``2k`` is cue ``k`` itself and dim ``2k+1`` mixes in a 0.2 share of
    the next cue, both with Gaussian noise of std ``static_noise``.
    """
    cfg = config or SynthConfig()
    sigma = cfg.static_noise if noise is None else noise
    rng = _stream(seed, _pid_key(profile.participant_id), recording_index, 2)
    c = np.asarray(profile.cue_intensities, dtype=np.float64)
    eps = rng.standard_normal(N_CUE_STATIC)
    distract = rng.standard_normal(N_STATIC - N_CUE_STATIC)
    cue_part = np.empty(N_CUE_STATIC)
    for k in range(4):
        cue_part[2 * k] = c[k]
        cue_part[2 * k + 1] = 0.8 * c[k] + 0.2 * c[(k + 1) % 4]
    return np.concatenate([cue_part + sigma * eps, distract])


# ------------------------------------------------------------------ corpus

def make_profiles(config):
    """Participant cue draws with exact label counts round(prevalence * P).

    A shared Gaussian factor correlates the four latent scores so comorbid
    participants are common. Within each label the latent score is ranked;
    the top ``round(p * P)`` participants get cues in [0.5, 1], the rest in
    [0, 0.5), spread evenly by rank with a little jitter.
    """
    cfg = config.validate()
    P = cfg.n_participants
    rng = _stream(cfg.seed, 0, 0, 0)
    shared = rng.standard_normal(P)
    own = rng.standard_normal((P, 4))
    rho = cfg.comorbidity_corr
    latent = math.sqrt(rho) * shared[:, None] + math.sqrt(1 - rho) * own
    spread = rng.uniform(0.1, 0.9, size=(P, 4))
    cues = np.empty((P, 4))
    for k in range(4):
        n_pos = min(max(int(round(cfg.prevalence[k] * P)), 1), P - 1)
        order = np.argsort(-latent[:, k], kind="stable")
        pos, neg = order[:n_pos], order[n_pos:]
        # positives: rank 0 (highest latent) gets the largest cue
        cues[pos, k] = 0.5 + 0.5 * (n_pos - np.arange(n_pos) - 1 + spread[pos, k]) / n_pos
        m = neg.size
        cues[neg, k] = 0.5 * (m - np.arange(m) - 1 + spread[neg, k]) / m
    width = len(str(P - 1))
    profiles = [
        ParticipantProfile(f"P{i:0{width}d}", tuple(float(v) for v in cues[i]), cfg.recordings_per_participant)
        for i in range(P)
    ]
    if not any(sum(p.labels) >= 2 for p in profiles):
        raise RuntimeError("generated corpus has no comorbid participant; change seed")
    return profiles


@dataclass
class RecordManifest:
    record_id: str
    participant_id: str
    spectrogram_path: str
    labels: tuple
    static_features: np.ndarray = field(repr=False)

    def to_json(self):
        return json.dumps({
            "record_id": self.record_id,
            "participant_id": self.participant_id,
            "path": self.spectrogram_path,
            "labels": [bool(x) for x in self.labels],
            "static": [float(x) for x in self.static_features],
        })

    @classmethod
    def from_dict(cls, d):
        static = np.asarray(d["static"], dtype=np.float64)
        if static.shape != (N_STATIC,):
            raise ValueError(f"record {d['record_id']}: static must have {N_STATIC} values")
        labels = tuple(bool(x) for x in d["labels"])
        if len(labels) != 4:
            raise ValueError(f"record {d['record_id']}: expected 4 labels")
        return cls(d["record_id"], d["participant_id"], d["path"], labels, static)


def write_manifest(records, path):
    records = sorted(records, key=lambda r: r.record_id)
    ids = [r.record_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("record ids are not unique")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_manifest(path):
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(RecordManifest.from_dict(json.loads(line)))
    ids = [r.record_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("record ids are not unique")
    return records


def resolve_path(manifest_path, record):
    p = Path(record.spectrogram_path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


def generate_corpus(config, out_dir):
    """Write SPGM files, ``manifest.jsonl`` and ``participants.jsonl`` under ``out_dir``.

    Returns ``(records, profiles)``. Paths in the manifest are relative to
    ``out_dir`` so the manifest bytes do not depend on where it was written.
    """
    cfg = config.validate()
    out = Path(out_dir)
    (out / "spectrograms").mkdir(parents=True, exist_ok=True)
    profiles = make_profiles(cfg)
    records = []
    for prof in profiles:
        for r in range(cfg.recordings_per_participant):
            spec = synth_spectrogram(prof, r, cfg.seed, cfg)
            rel = f"spectrograms/{spec.id}.spgm"
            write_spectrogram(spec, out / rel)
            static = synth_static_features(prof, r, cfg.seed, cfg)
            records.append(RecordManifest(spec.id, prof.participant_id, rel, prof.labels, static))
    write_manifest(records, out / "manifest.jsonl")
    with open(out / "participants.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for prof in profiles:
            fh.write(json.dumps({
                "participant_id": prof.participant_id,
                "cues": list(prof.cue_intensities),
                "labels": list(prof.labels),
            }) + "\n")
    with open(out / "synth_config.json", "w", encoding="utf-8") as fh:
        json.dump(asdict(cfg), fh, indent=2, sort_keys=True)
    return sorted(records, key=lambda r: r.record_id), profiles


def read_profiles(path):
    profiles = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                profiles.append(ParticipantProfile(d["participant_id"], tuple(d["cues"])))
    return profiles


# ------------------------------------------------------- learnability oracle

def fit_stump_oracle(cues, labels):
    """Brute-force per-label threshold classifier on one cue coordinate.

    For each label, every (coordinate, midpoint threshold, direction) is
    enumerated and the one with the fewest training errors is kept (first
    found wins ties). Returns a list of ``(coord, threshold, sign)``.
    """
    X = np.asarray(cues, dtype=np.float64)
    Y = np.asarray(labels, dtype=bool)
    rules = []
    for k in range(Y.shape[1]):
        best = None
        for j in range(X.shape[1]):
            vals = np.unique(X[:, j])
            cands = np.r_[vals[0] - 1.0, 0.5 * (vals[1:] + vals[:-1]), vals[-1] + 1.0]
            for thr in cands:
                for sign in (1, -1):
                    pred = (sign * (X[:, j] - thr)) > 0
                    err = int(np.sum(pred != Y[:, k]))
                    if best is None or err < best[0]:
                        best = (err, j, float(thr), sign)
        rules.append(best[1:])
    return rules


def predict_stump_oracle(rules, cues):
    X = np.asarray(cues, dtype=np.float64)
    return np.stack([(s * (X[:, j] - t)) > 0 for j, t, s in rules], axis=1)
