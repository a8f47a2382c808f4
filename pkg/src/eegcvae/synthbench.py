"""Synthetic EEG with known class-specific band-power drops, and a separability score.

Every trial carries two shared oscillatory sources (alpha and beta) spread over
the 15 channels with a per-subject spatial gain, on top of independent 1/f plus
white background noise. A class rule scales the source amplitude on its target
channels from the cue sample onwards.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import (CHANNELS_15, CLASSES, EpochStore, Recording, extract_resting_epochs)
from .dsp import ALPHA_HZ, BETA_HZ, POST_INTERVAL_S, bandpower_change_array, epoch_tfr_maps


@dataclass(frozen=True)
class ModulationRule:
    label: str
    band: str                 # "alpha" or "beta"
    channels: tuple
    ratio: float              # post-cue amplitude / pre-cue amplitude


DEFAULT_RULES = (
    ModulationRule("RIGHT", "beta", ("C3", "C1", "CP3"), 0.3),
    ModulationRule("LEFT", "alpha", ("C4", "C2", "CP4"), 0.3),
    ModulationRule("FEET", "alpha", ("Cz", "FCz", "CPz"), 0.3),
)

BAND_RANGES = {"alpha": ALPHA_HZ, "beta": BETA_HZ}


@dataclass(frozen=True)
class SynthSpec:
    n_subjects: int = 5
    trials_per_class: int = 20
    sample_rate_hz: float = 160.0
    channels: tuple = CHANNELS_15
    n_samples: int = 400
    cue_sample: int = 80
    rules: tuple = DEFAULT_RULES
    alpha_hz: tuple = (9.5, 11.0)      # per-subject peak frequency drawn from this range
    beta_hz: tuple = (21.0, 23.0)
    alpha_amp: float = 4.0
    beta_amp: float = 3.0
    amp_jitter: float = 0.15           # log-normal sigma of per-trial source amplitude
    gain_jitter: float = 0.1           # log-normal sigma of per-subject channel gains
    pink_amp: float = 1.0
    white_amp: float = 0.5
    noise_band_hz: tuple = (4.0, 30.0)
    resting_s: float = 60.0
    phase_drift: float = 0.02          # rad/sample random-walk step of resting sources
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 1 or self.trials_per_class < 1:
            raise ValueError("need at least one subject and one trial per class")
        if not 0 <= self.cue_sample < self.n_samples:
            raise ValueError("cue sample outside the epoch")
        for rule in self.rules:
            if rule.label not in CLASSES:
                raise ValueError(f"rule label {rule.label!r} not in {CLASSES}")
            if rule.band not in BAND_RANGES:
                raise ValueError(f"rule band must be alpha or beta, got {rule.band!r}")
            if not 0 < rule.ratio <= 1:
                raise ValueError(f"amplitude ratio must lie in (0, 1], got {rule.ratio}")
            missing = set(rule.channels) - set(self.channels)
            if missing:
                raise ValueError(f"rule channels not in layout: {sorted(missing)}")
        lo, hi = self.noise_band_hz
        for name, (a, b) in (("alpha", self.alpha_hz), ("beta", self.beta_hz), ("noise", (lo, hi))):
            if not 4.0 <= a <= b <= 30.0:
                raise ValueError(f"{name} range {a}-{b} Hz must lie within 4-30 Hz")

    def rule_for(self, label: str) -> ModulationRule | None:
        return next((r for r in self.rules if r.label == label), None)

    def subject_ids(self) -> list[str]:
        return [f"S{i + 1:03d}" for i in range(self.n_subjects)]


@dataclass
class SubjectModel:
    subject_id: str
    alpha_hz: float
    beta_hz: float
    gains: dict               # band -> per-channel gain vector


@dataclass
class TrialTruth:
    index: int
    subject_id: str
    label: str
    band: str
    channels: tuple
    ratio: float
    alpha_hz: float
    beta_hz: float
    alpha_phase: float
    beta_phase: float
    alpha_amp: float
    beta_amp: float


@dataclass
class SynthDataset:
    store: EpochStore
    truth: list
    subjects: dict = field(default_factory=dict)

    def truth_csv(self) -> str:
        buf = io.StringIO()
        cols = [f.name for f in TrialTruth.__dataclass_fields__.values()]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for t in self.truth:
            row = asdict(t)
            row["channels"] = " ".join(t.channels)
            w.writerow(row)
        return buf.getvalue()


def _topography(channels) -> np.ndarray:
    """Sensorimotor weighting: central row strongest, frontal/parietal rows weaker."""
    row_gain = {"FC": 0.6, "C": 1.0, "CP": 0.7}
    out = []
    for ch in channels:
        prefix = ch.rstrip("0123456789z")
        out.append(row_gain.get(prefix, 0.5))
    return np.array(out)


def _subject_models(spec: SynthSpec, rng) -> dict:
    base = _topography(spec.channels)
    models = {}
    for sid in spec.subject_ids():
        gains = {b: base * np.exp(spec.gain_jitter * rng.standard_normal(len(spec.channels)))
                 for b in ("alpha", "beta")}
        models[sid] = SubjectModel(sid, float(rng.uniform(*spec.alpha_hz)),
                                   float(rng.uniform(*spec.beta_hz)), gains)
    return models


def background_noise(rng, n_channels: int, n_samples: int, fs: float, pink_amp: float,
                     white_amp: float, band_hz=(4.0, 30.0)) -> np.ndarray:
    """Independent per-channel noise: 1/f power inside ``band_hz`` plus a white floor.

    The 1/f part is white noise shaped in the frequency domain, normalised to
    unit variance before scaling.
    """
    white = rng.standard_normal((n_channels, n_samples))
    spec = np.fft.rfft(rng.standard_normal((n_channels, n_samples)), axis=-1)
    f = np.fft.rfftfreq(n_samples, 1.0 / fs)
    shape = np.zeros_like(f)
    inside = (f >= band_hz[0]) & (f <= band_hz[1])
    shape[inside] = 1.0 / np.sqrt(f[inside])
    pink = np.fft.irfft(spec * shape, n=n_samples, axis=-1)
    pink /= pink.std(axis=-1, keepdims=True) + 1e-12
    return pink_amp * pink + white_amp * white


def _envelope(spec: SynthSpec, rule: ModulationRule | None, band: str) -> np.ndarray:
    """(n_channels, n_samples) amplitude multiplier for one band."""
    env = np.ones((len(spec.channels), spec.n_samples))
    if rule is not None and rule.band == band:
        idx = [spec.channels.index(ch) for ch in rule.channels]
        env[idx, spec.cue_sample:] = rule.ratio
    return env


def make_synthetic_dataset(spec: SynthSpec = SynthSpec()) -> SynthDataset:
    """Cue-aligned trials for every subject and class, with per-trial ground truth."""
    rng = np.random.default_rng(spec.seed)
    subjects = _subject_models(spec, rng)
    t = np.arange(spec.n_samples) / spec.sample_rate_hz
    data, labels, sids, truth = [], [], [], []
    for sid in spec.subject_ids():
        sm = subjects[sid]
        for label in CLASSES:
            rule = spec.rule_for(label)
            for _ in range(spec.trials_per_class):
                x = background_noise(rng, len(spec.channels), spec.n_samples, spec.sample_rate_hz,
                                     spec.pink_amp, spec.white_amp, spec.noise_band_hz)
                params = {}
                for band, freq, amp0 in (("alpha", sm.alpha_hz, spec.alpha_amp),
                                         ("beta", sm.beta_hz, spec.beta_amp)):
                    phase = float(rng.uniform(0, 2 * np.pi))
                    amp = float(amp0 * np.exp(spec.amp_jitter * rng.standard_normal()))
                    wave = np.sin(2 * np.pi * freq * t + phase)
                    x += amp * sm.gains[band][:, None] * _envelope(spec, rule, band) * wave
                    params[band] = (phase, amp)
                truth.append(TrialTruth(
                    len(truth), sid, label,
                    rule.band if rule else "", tuple(rule.channels) if rule else (),
                    rule.ratio if rule else 1.0, sm.alpha_hz, sm.beta_hz,
                    params["alpha"][0], params["beta"][0], params["alpha"][1], params["beta"][1]))
                data.append(x)
                labels.append(label)
                sids.append(sid)
    store = EpochStore(np.array(data, dtype=np.float32), labels, sids, ["cue_aligned"] * len(data),
                       spec.sample_rate_hz, spec.channels,
                       extra={"synthbench_seed": spec.seed})
    return SynthDataset(store, truth, subjects)


def make_resting_recording(spec: SynthSpec, subject_id: str, seed: int | None = None) -> Recording:
    """Continuous unmodulated recording for one subject; source phases drift slowly."""
    rng_subjects = np.random.default_rng(spec.seed)
    subjects = _subject_models(spec, rng_subjects)
    if subject_id not in subjects:
        raise KeyError(f"unknown subject {subject_id!r}")
    sm = subjects[subject_id]
    rng = np.random.default_rng([spec.seed, 1 + spec.subject_ids().index(subject_id),
                                 0 if seed is None else seed + 1])
    n = int(round(spec.resting_s * spec.sample_rate_hz))
    t = np.arange(n) / spec.sample_rate_hz
    x = background_noise(rng, len(spec.channels), n, spec.sample_rate_hz,
                         spec.pink_amp, spec.white_amp, spec.noise_band_hz)
    for band, freq, amp0 in (("alpha", sm.alpha_hz, spec.alpha_amp), ("beta", sm.beta_hz, spec.beta_amp)):
        phase = rng.uniform(0, 2 * np.pi) + np.cumsum(spec.phase_drift * rng.standard_normal(n))
        amp = amp0 * np.exp(spec.amp_jitter * rng.standard_normal())
        x += amp * sm.gains[band][:, None] * np.sin(2 * np.pi * freq * t + phase)
    return Recording(spec.sample_rate_hz, spec.channels, x, subject_id)


def make_resting_store(spec: SynthSpec = SynthSpec(), seed: int | None = None) -> EpochStore:
    """Resting epochs from one synthetic recording per subject."""
    epochs = []
    for sid in spec.subject_ids():
        epochs.extend(extract_resting_epochs(make_resting_recording(spec, sid, seed)))
    return EpochStore.from_epochs(epochs, spec.sample_rate_hz, spec.channels)


# ---------------------------------------------------------------- separability


@dataclass
class SeparabilityResult:
    accuracy: float
    fold_accuracies: list
    n_per_class: dict
    degenerate_features: list   # names of zero-variance features (ignored by the classifier)
    paired: bool = False

    def __float__(self):
        return self.accuracy


def feature_names(channels=CHANNELS_15) -> list[str]:
    return [f"{band}:{ch}" for band in ("alpha", "beta") for ch in channels]


def separability_features(data, fs_hz: float = 160.0, interval_s=POST_INTERVAL_S) -> np.ndarray:
    """Per-epoch alpha and beta band-power change for every channel: (n_epochs, 2 * n_channels)."""
    data = np.asarray(data, dtype=np.float64)
    values, spec = epoch_tfr_maps(data, [""] * data.shape[1], fs_hz=fs_hz)
    parts = [bandpower_change_array(values, spec.freqs_hz, spec.frame_times_s, band, interval_s)
             for band in (ALPHA_HZ, BETA_HZ)]
    return np.concatenate(parts, axis=1)


def _stratified_folds(y, k, rng) -> np.ndarray:
    fold = np.empty(len(y), dtype=np.int64)
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        rng.shuffle(idx)
        fold[idx] = np.arange(idx.size) % k
    return fold


def ridge_one_vs_rest(x_train, y_train, x_test, n_classes, lam=1.0) -> np.ndarray:
    """Predicted class indices from regularised least squares on +/-1 targets."""
    mu = x_train.mean(axis=0)
    sd = x_train.std(axis=0)
    ok = sd > 0
    xs = np.zeros_like(x_train)
    xs[:, ok] = (x_train[:, ok] - mu[ok]) / sd[ok]
    xt = np.zeros_like(x_test)
    xt[:, ok] = (x_test[:, ok] - mu[ok]) / sd[ok]
    xs = np.hstack([xs, np.ones((xs.shape[0], 1))])
    xt = np.hstack([xt, np.ones((xt.shape[0], 1))])
    targets = -np.ones((xs.shape[0], n_classes))
    targets[np.arange(xs.shape[0]), y_train] = 1.0
    reg = lam * np.eye(xs.shape[1])
    reg[-1, -1] = 0.0           # intercept is not penalised
    w = np.linalg.solve(xs.T @ xs + reg, xs.T @ targets)
    return np.argmax(xt @ w, axis=1)


def _grouped_folds(groups, k, rng) -> np.ndarray:
    ids = np.unique(groups)
    rng.shuffle(ids)
    fold_of = {g: i % k for i, g in enumerate(ids)}
    return np.array([fold_of[g] for g in groups], dtype=np.int64)


def cross_validated_accuracy(features, y, n_folds=5, lam=1.0, seed=0, groups=None) -> tuple[float, list]:
    """Mean held-out accuracy. With ``groups``, epochs sharing a group never straddle train and test."""
    y = np.asarray(y)
    n_classes = int(y.max()) + 1
    rng = np.random.default_rng(seed)
    folds = _stratified_folds(y, n_folds, rng) if groups is None else _grouped_folds(np.asarray(groups), n_folds, rng)
    accs = []
    for k in range(n_folds):
        test = folds == k
        pred = ridge_one_vs_rest(features[~test], y[~test], features[test], n_classes, lam)
        accs.append(float(np.mean(pred == y[test])))
    return float(np.mean(accs)), accs


def _as_arrays(sets) -> list:
    if isinstance(sets, Mapping):
        sets = [sets[name] for name in CLASSES] if set(CLASSES) <= set(sets) else list(sets.values())
    out = []
    for s in sets:
        store = getattr(s, "store", s)
        out.append(np.asarray(getattr(store, "data", store)))
    return out


def evaluate_separability(sets, n_folds: int = 5, lam: float = 1.0, seed: int = 0,
                          fs_hz: float = 160.0, channels: Sequence[str] = CHANNELS_15,
                          paired: bool | None = None) -> SeparabilityResult:
    """Cross-validated accuracy of telling the generated condition sets apart.

    ``sets`` holds one collection per class, in class order: a mapping keyed by
    class name, or a sequence of ArtificialEpochSets, EpochStores or arrays.

    Sets generated from one resting store are paired: epoch i of every set
    comes from the same source. Paired epochs are kept in the same fold, since
    otherwise a test epoch's siblings sit in the training data under the other
    labels and push the score below chance. ``paired=None`` assumes pairing
    whenever all sets have the same length, which is then also stratified.
    """
    arrays = _as_arrays(sets)
    if len(arrays) < 2:
        raise ValueError("need at least two sets to separate")
    for a in arrays:
        if a.shape[0] < 10:
            raise ValueError(f"each set needs at least 10 epochs, got {a.shape[0]}")
    feats = np.concatenate([separability_features(a, fs_hz) for a in arrays])
    y = np.concatenate([np.full(a.shape[0], i) for i, a in enumerate(arrays)])
    names = feature_names(channels)
    sd = feats.std(axis=0)
    degenerate = [names[i] if i < len(names) else str(i) for i in np.flatnonzero(~(sd > 0))]
    if not np.all(np.isfinite(feats)):
        bad = ~np.isfinite(feats)
        degenerate += [names[i] for i in np.flatnonzero(bad.any(axis=0)) if names[i] not in degenerate]
        feats = np.where(bad, 0.0, feats)
    if paired is None:
        paired = len({a.shape[0] for a in arrays}) == 1
    groups = np.concatenate([np.arange(a.shape[0]) for a in arrays]) if paired else None
    if paired and len({a.shape[0] for a in arrays}) != 1:
        raise ValueError("paired evaluation needs sets of equal length")
    acc, accs = cross_validated_accuracy(feats, y, n_folds, lam, seed, groups)
    counts = {(CLASSES[i] if len(arrays) == len(CLASSES) else str(i)): int(a.shape[0])
              for i, a in enumerate(arrays)}
    return SeparabilityResult(acc, accs, counts, degenerate, bool(paired))
