"""Recording ingestion, epoching, labeled epoch stores and stratified splits."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, IntegrityError, ShapeError, UnsupportedInputError

CLASSES = ("RIGHT", "LEFT", "FEET")

# Sensorimotor strip around Cz, row by row (fronto-central, central, centro-parietal).
CHANNELS_15 = (
    "FC3", "FC1", "FCz", "FC2", "FC4",
    "C3", "C1", "Cz", "C2", "C4",
    "CP3", "CP1", "CPz", "CP2", "CP4",
)

SAMPLE_RATE_HZ = 160.0
PRE_CUE_S = 0.5
POST_CUE_S = 2.0
RESTING_DISCARD_S = 5.0
RESTING_TOTAL_S = 60.0
RESTING_EPOCH_S = 2.5

STORE_FORMAT = "eegcvae-epochstore"
STORE_VERSION = 1
MANIFEST_NAME = "manifest.json"
PAYLOAD_NAME = "epochs.f32"


@dataclass(frozen=True)
class Recording:
    """A continuous multichannel recording.

    ``samples`` has shape (n_channels, n_samples) in microvolts.
    """

    sample_rate_hz: float
    channels: tuple[str, ...]
    samples: np.ndarray
    subject_id: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim == 1 and len(self.channels) == 0 and samples.size == 0:
            samples = samples.reshape(0, 0)
        if samples.ndim != 2:
            raise ShapeError(f"samples must be (n_channels, n_samples), got shape {samples.shape}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "channels", tuple(self.channels))
        if not self.sample_rate_hz > 0:
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if samples.shape[0] != len(self.channels):
            raise ShapeError(f"{len(self.channels)} channel names for {samples.shape[0]} signals")
        if len(set(self.channels)) != len(self.channels):
            raise ValueError("channel names must be unique")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate_hz

    @property
    def usable(self) -> bool:
        """False for zero-length recordings, which cannot be epoched."""
        return self.n_samples > 0


@dataclass(frozen=True)
class Epoch:
    """One channel x time trial matrix.

    kind is "cue_aligned" (label required), "resting" (no label) or
    "artificial" (decoder output, label = the requested condition).
    """

    data: np.ndarray
    label: str | None
    subject_id: str
    kind: str
    start_sample: int = -1

    def __post_init__(self):
        if self.kind not in ("cue_aligned", "resting", "artificial"):
            raise ValueError(f"unknown epoch kind {self.kind!r}")
        if self.kind == "resting" and self.label is not None:
            raise ValueError("resting epochs carry no label")
        if self.kind == "cue_aligned" and self.label is None:
            raise ValueError("cue-aligned epochs need a label")
        if self.label is not None and self.label not in CLASSES:
            raise ValueError(f"label must be one of {CLASSES}, got {self.label!r}")


def condition_vector(label: str) -> np.ndarray:
    """One-hot condition vector for a class name, e.g. RIGHT -> [1, 0, 0]."""
    name = parse_label(label)
    c = np.zeros(len(CLASSES))
    c[CLASSES.index(name)] = 1.0
    return c


def parse_label(label: str) -> str:
    name = str(label).strip().upper()
    if name not in CLASSES:
        raise ValueError(f"invalid condition {label!r}; expected one of {{{', '.join(CLASSES)}}}")
    return name


def is_one_hot(c) -> bool:
    c = np.asarray(c, dtype=np.float64)
    return c.shape == (len(CLASSES),) and np.all((c == 0) | (c == 1)) and c.sum() == 1


@dataclass
class EpochStore:
    """A collection of equally shaped epochs plus their metadata.

    ``data`` is float32 with shape (n_epochs, n_channels, n_samples).
    """

    data: np.ndarray
    labels: list
    subject_ids: list
    kinds: list
    sample_rate_hz: float = SAMPLE_RATE_HZ
    channels: tuple = CHANNELS_15
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ShapeError(f"store data must be 3-D, got {self.data.shape}")
        n = self.data.shape[0]
        if not (len(self.labels) == len(self.subject_ids) == len(self.kinds) == n):
            raise ValueError("metadata lengths must equal the epoch count")
        if self.data.shape[1] != len(self.channels):
            raise ShapeError(f"{len(self.channels)} channel names for {self.data.shape[1]} channels")
        self.channels = tuple(self.channels)
        self.labels = [None if lab is None else str(lab) for lab in self.labels]
        self.subject_ids = [str(s) for s in self.subject_ids]
        self.kinds = [str(k) for k in self.kinds]

    def __len__(self):
        return self.data.shape[0]

    @classmethod
    def from_epochs(cls, epochs: Sequence[Epoch], sample_rate_hz=SAMPLE_RATE_HZ, channels=CHANNELS_15):
        epochs = list(epochs)
        if epochs:
            data = np.stack([e.data for e in epochs])
        else:
            data = np.zeros((0, len(channels), int(round((PRE_CUE_S + POST_CUE_S) * sample_rate_hz))))
        return cls(
            data=data,
            labels=[e.label for e in epochs],
            subject_ids=[e.subject_id for e in epochs],
            kinds=[e.kind for e in epochs],
            sample_rate_hz=sample_rate_hz,
            channels=channels,
        )

    def epochs(self) -> list[Epoch]:
        return [
            Epoch(self.data[i], self.labels[i], self.subject_ids[i], self.kinds[i])
            for i in range(len(self))
        ]

    def take(self, indices) -> EpochStore:
        idx = np.asarray(indices, dtype=np.int64)
        return EpochStore(
            data=self.data[idx],
            labels=[self.labels[i] for i in idx],
            subject_ids=[self.subject_ids[i] for i in idx],
            kinds=[self.kinds[i] for i in idx],
            sample_rate_hz=self.sample_rate_hz,
            channels=self.channels,
            extra=dict(self.extra),
        )

    @staticmethod
    def concatenate(stores: Sequence[EpochStore]) -> EpochStore:
        first = stores[0]
        for s in stores[1:]:
            if s.channels != first.channels or s.sample_rate_hz != first.sample_rate_hz:
                raise ValueError("stores differ in channels or sample rate")
        return EpochStore(
            data=np.concatenate([s.data for s in stores]),
            labels=[lab for s in stores for lab in s.labels],
            subject_ids=[x for s in stores for x in s.subject_ids],
            kinds=[k for s in stores for k in s.kinds],
            sample_rate_hz=first.sample_rate_hz,
            channels=first.channels,
        )

    def counts(self) -> dict:
        out: dict = {}
        for subj, lab in zip(self.subject_ids, self.labels):
            key = lab if lab is not None else "resting"
            out.setdefault(subj, {}).setdefault(key, 0)
            out[subj][key] += 1
        return out

    def manifest(self) -> dict:
        n, n_ch, n_t = self.data.shape
        return {
            "format": STORE_FORMAT,
            "version": STORE_VERSION,
            "count": n,
            "n_channels": n_ch,
            "n_samples": n_t,
            "sample_rate_hz": self.sample_rate_hz,
            "channels": list(self.channels),
            "label_names": list(CLASSES),
            "labels": self.labels,
            "subject_ids": self.subject_ids,
            "subjects": sorted(set(self.subject_ids)),
            "kinds": self.kinds,
            "payload": PAYLOAD_NAME,
            "payload_dtype": "<f4",
            "payload_order": "trial-major, channel-major within trial",
            "payload_bytes": n * n_ch * n_t * 4,
            "payload_sha256": hashlib.sha256(self._payload_bytes()).hexdigest(),
            "extra": self.extra,
        }

    def _payload_bytes(self) -> bytes:
        return np.ascontiguousarray(self.data, dtype="<f4").tobytes()


# ---------------------------------------------------------------- ingestion


def _field(raw: bytes, name: str, offset: int, width: int) -> str:
    chunk = raw[offset:offset + width]
    if len(chunk) != width:
        raise FormatError(f"EDF header truncated in field {name!r}")
    try:
        return chunk.decode("ascii")
    except UnicodeDecodeError as exc:
        raise FormatError(f"EDF header field {name!r} is not ASCII") from exc


def _num(text: str, name: str, kind=float):
    try:
        return kind(text.strip())
    except ValueError as exc:
        raise FormatError(f"EDF header field {name!r} is not numeric: {text.strip()!r}") from exc


def clean_channel_name(name: str) -> str:
    """Strip padding and the trailing dots PhysioBank uses (``"C3.."`` -> ``"C3"``)."""
    return name.strip().rstrip(".").strip()


def read_edf(raw: bytes, subject_id: str = "") -> Recording:
    """Parse an EDF file held in memory.

    Only fixed-rate 16-bit signals are supported. EDF+ annotation signals are
    skipped. Digital values are mapped onto the physical range so that
    digital_min and digital_max land exactly on physical_min and physical_max.
    """
    raw = bytes(raw)
    if len(raw) < 256:
        raise FormatError("EDF header truncated: fewer than 256 bytes")
    version = _field(raw, "version", 0, 8)
    if version.strip() != "0":
        raise FormatError(f"EDF header field 'version' must be '0', got {version.strip()!r}")
    header_bytes = _num(_field(raw, "header_bytes", 184, 8), "header_bytes", int)
    n_records = _num(_field(raw, "n_records", 236, 8), "n_records", int)
    record_s = _num(_field(raw, "record_duration", 244, 8), "record_duration")
    ns = _num(_field(raw, "n_signals", 252, 4), "n_signals", int)
    if ns <= 0:
        raise FormatError(f"EDF header field 'n_signals' must be positive, got {ns}")
    if header_bytes != 256 * (ns + 1):
        raise FormatError(f"EDF header field 'header_bytes' is {header_bytes}, expected {256 * (ns + 1)}")
    if record_s <= 0:
        raise FormatError(f"EDF header field 'record_duration' must be positive, got {record_s}")

    layout = [
        ("label", 16), ("transducer", 80), ("physical_dimension", 8),
        ("physical_min", 8), ("physical_max", 8), ("digital_min", 8), ("digital_max", 8),
        ("prefilter", 80), ("samples_per_record", 8), ("reserved", 32),
    ]
    sig: dict[str, list[str]] = {}
    offset = 256
    for name, width in layout:
        sig[name] = [_field(raw, f"{name}[{i}]", offset + i * width, width) for i in range(ns)]
        offset += width * ns

    labels = [clean_channel_name(s) for s in sig["label"]]
    pmin = [_num(s, f"physical_min[{i}]") for i, s in enumerate(sig["physical_min"])]
    pmax = [_num(s, f"physical_max[{i}]") for i, s in enumerate(sig["physical_max"])]
    dmin = [_num(s, f"digital_min[{i}]", int) for i, s in enumerate(sig["digital_min"])]
    dmax = [_num(s, f"digital_max[{i}]", int) for i, s in enumerate(sig["digital_max"])]
    nspr = [_num(s, f"samples_per_record[{i}]", int) for i, s in enumerate(sig["samples_per_record"])]
    for i in range(ns):
        if dmax[i] <= dmin[i]:
            raise FormatError(f"EDF header field 'digital_max[{i}]' must exceed digital_min")
        if pmax[i] == pmin[i]:
            raise FormatError(f"EDF header field 'physical_max[{i}]' equals physical_min")
        if nspr[i] <= 0:
            raise FormatError(f"EDF header field 'samples_per_record[{i}]' must be positive")

    record_len = sum(nspr)
    body = raw[header_bytes:]
    available = len(body) // (2 * record_len)
    if n_records == -1:
        n_records = available
    elif n_records < 0 or available < n_records:
        raise FormatError(f"EDF header field 'n_records' claims {n_records} records, file holds {available}")

    keep = [i for i in range(ns) if labels[i] != "EDF Annotations"]
    if not keep:
        raise UnsupportedInputError("EDF file has no ordinary signals")
    if len({nspr[i] for i in keep}) != 1:
        rates = sorted({nspr[i] / record_s for i in keep})
        raise UnsupportedInputError(f"mixed sampling rates are not supported: {rates} Hz")

    digital = np.frombuffer(body[: n_records * record_len * 2], dtype="<i2").reshape(n_records, record_len)
    starts = np.concatenate([[0], np.cumsum(nspr)])
    rows = []
    for i in keep:
        d = digital[:, starts[i]:starts[i + 1]].reshape(-1).astype(np.float64)
        frac = (d - dmin[i]) / (dmax[i] - dmin[i])
        rows.append(pmax[i] * frac + pmin[i] * (1.0 - frac))
    return Recording(
        sample_rate_hz=nspr[keep[0]] / record_s,
        channels=tuple(labels[i] for i in keep),
        samples=np.vstack(rows),
        subject_id=subject_id,
    )


def write_edf(rec: Recording, physical_range=None, record_s: float = 1.0) -> bytes:
    """Encode a Recording as a minimal EDF file (16-bit, one rate).

    Mainly useful for tests and for exporting synthetic recordings.
    """
    fs = rec.sample_rate_hz
    spr = fs * record_s
    if abs(spr - round(spr)) > 1e-9:
        raise ValueError("record duration must hold an integer number of samples")
    spr = int(round(spr))
    n_rec = math.ceil(rec.n_samples / spr) if rec.n_samples else 0
    ns = len(rec.channels)
    if physical_range is None:
        lo = float(np.min(rec.samples)) if rec.n_samples else -1.0
        hi = float(np.max(rec.samples)) if rec.n_samples else 1.0
        if hi <= lo:
            hi = lo + 1.0
        physical_range = (lo, hi)
    pmin, pmax = physical_range
    dmin, dmax = -32768, 32767

    def pad(text, width):
        text = str(text)[:width]
        return text.ljust(width).encode("ascii")

    head = b"".join([
        pad("0", 8), pad("X X X X", 80), pad("Startdate X X X X", 80), pad("01.01.00", 8),
        pad("00.00.00", 8), pad(256 * (ns + 1), 8), pad("", 44), pad(n_rec, 8),
        pad(f"{record_s:g}", 8), pad(ns, 4),
    ])
    cols = [
        [pad(ch, 16) for ch in rec.channels], [pad("", 80)] * ns, [pad("uV", 8)] * ns,
        [pad(f"{pmin:.6g}"[:8], 8)] * ns, [pad(f"{pmax:.6g}"[:8], 8)] * ns,
        [pad(dmin, 8)] * ns, [pad(dmax, 8)] * ns, [pad("", 80)] * ns, [pad(spr, 8)] * ns, [pad("", 32)] * ns,
    ]
    head += b"".join(b"".join(c) for c in cols)
    pmin_s, pmax_s = float(f"{pmin:.6g}"[:8]), float(f"{pmax:.6g}"[:8])
    frac = (rec.samples - pmin_s) / (pmax_s - pmin_s)
    dig = np.clip(np.round(dmin + frac * (dmax - dmin)), dmin, dmax).astype("<i2")
    padded = np.zeros((ns, n_rec * spr), dtype="<i2")
    padded[:, : rec.n_samples] = dig
    body = padded.reshape(ns, n_rec, spr).transpose(1, 0, 2).tobytes()
    return head + body


def read_csv_recording(text, sample_rate_hz: float, subject_id: str = "") -> Recording:
    """Parse a CSV recording: header row of channel names, one row per sample."""
    if not isinstance(text, str):
        text = text.read()
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("CSV recording is empty (no header row)") from None
    names = [h.strip() for h in header]
    if not names or any(not n for n in names):
        raise FormatError("CSV header must list non-empty channel names")
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(names):
            raise FormatError(f"row {lineno}: expected {len(names)} values, got {len(row)}")
        try:
            rows.append([float(cell) for cell in row])
        except ValueError as exc:
            raise FormatError(f"row {lineno}: non-numeric cell ({exc})") from exc
    samples = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(names)).T
    return Recording(sample_rate_hz, tuple(names), samples, subject_id)


def read_events_csv(text) -> list[tuple[float, str]]:
    """Parse a sidecar cue file with columns ``onset_seconds,label``."""
    if not isinstance(text, str):
        text = text.read()
    reader = csv.reader(io.StringIO(text))
    events = []
    for lineno, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if lineno == 1 and row[0].strip().lower().startswith("onset"):
            continue
        if len(row) != 2:
            raise FormatError(f"events row {lineno}: expected 'onset_seconds,label'")
        try:
            onset = float(row[0])
        except ValueError as exc:
            raise FormatError(f"events row {lineno}: bad onset {row[0]!r}") from exc
        try:
            label = parse_label(row[1])
        except ValueError as exc:
            raise FormatError(f"events row {lineno}: {exc}") from exc
        events.append((onset, label))
    return events


def select_channels(rec: Recording, names: Sequence[str]) -> Recording:
    """Restrict a recording to ``names`` in the requested order.

    Exact matches win; otherwise names are matched case-insensitively, which
    covers the upper/lower-case variants found in EDF headers.
    """
    exact = {ch: i for i, ch in enumerate(rec.channels)}
    folded = {ch.upper(): i for i, ch in enumerate(rec.channels)}
    idx = []
    for name in names:
        if name in exact:
            idx.append(exact[name])
        elif name.upper() in folded:
            idx.append(folded[name.upper()])
        else:
            raise KeyError(f"channel {name!r} not found in recording")
    return Recording(rec.sample_rate_hz, tuple(names), rec.samples[idx], rec.subject_id)


# ---------------------------------------------------------------- epoching


def _samples_for(seconds: float, fs: float, what: str) -> int:
    n = seconds * fs
    if abs(n - round(n)) > 1e-9:
        raise UnsupportedInputError(f"{what} of {seconds} s is not an integer number of samples at {fs} Hz")
    return int(round(n))


def cue_sample(cue_time_s: float, fs: float) -> int:
    """Sample index of a cue; halves round up."""
    return int(math.floor(cue_time_s * fs + 0.5))


def extract_cue_epochs(rec: Recording, cue_times_s: Iterable[float], label: str,
                       pre_s: float = PRE_CUE_S, post_s: float = POST_CUE_S) -> list[Epoch]:
    """Cut [cue - pre_s, cue + post_s) windows; the cue lands on sample ``pre_s * fs``."""
    if not rec.usable:
        raise ValueError("recording has no samples and cannot be epoched")
    label = parse_label(label)
    fs = rec.sample_rate_hz
    n_pre = _samples_for(pre_s, fs, "pre-cue window")
    n_post = _samples_for(post_s, fs, "post-cue window")
    cues = list(cue_times_s)
    bad = []
    starts = []
    for k, t in enumerate(cues):
        c = cue_sample(t, fs)
        start, stop = c - n_pre, c + n_post
        if start < 0 or stop > rec.n_samples:
            bad.append(k)
        starts.append(start)
    if bad:
        raise IndexError(f"epoch window out of bounds for cue index(es) {bad}")
    return [
        Epoch(rec.samples[:, s:s + n_pre + n_post].copy(), label, rec.subject_id, "cue_aligned", s)
        for s in starts
    ]


def extract_resting_epochs(rec: Recording, discard_s: float = RESTING_DISCARD_S,
                           total_s: float = RESTING_TOTAL_S, epoch_s: float = RESTING_EPOCH_S) -> list[Epoch]:
    """Split the middle of a one-minute resting recording into 20 epochs.

    The first and last ``discard_s`` of the first ``total_s`` seconds are
    dropped; anything beyond ``total_s`` is ignored.
    """
    if not rec.usable:
        raise ValueError("recording has no samples and cannot be epoched")
    fs = rec.sample_rate_hz
    n_total = _samples_for(total_s, fs, "resting duration")
    n_discard = _samples_for(discard_s, fs, "discarded margin")
    n_epoch = _samples_for(epoch_s, fs, "epoch length")
    if rec.n_samples < n_total:
        raise ValueError(f"resting recording lasts {rec.duration_s:.3f} s; at least {total_s:g} s required")
    n_epochs = (n_total - 2 * n_discard) // n_epoch
    return [
        Epoch(rec.samples[:, s:s + n_epoch].copy(), None, rec.subject_id, "resting", s)
        for s in (n_discard + k * n_epoch for k in range(n_epochs))
    ]


# ---------------------------------------------------------------- splitting


def split_train_val(store: EpochStore, val_fraction: float, seed: int = 0) -> tuple[EpochStore, EpochStore]:
    """Stratified split by class label, spreading validation picks over subjects.

    Within each class the epochs are shuffled per subject and dealt out
    round-robin across subjects, so the validation share is drawn from every
    subject before any subject contributes twice.
    """
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie in (0, 1)")
    if any(lab is None for lab in store.labels):
        raise ValueError("every epoch needs a class label to stratify")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for label in CLASSES:
        members = [i for i, lab in enumerate(store.labels) if lab == label]
        if not members:
            continue
        if len(members) < 2:
            raise ValueError(f"class {label} has {len(members)} epoch(s); at least 2 required to split")
        by_subject: dict = {}
        for i in members:
            by_subject.setdefault(store.subject_ids[i], []).append(i)
        subjects = sorted(by_subject)
        rng.shuffle(subjects)
        queues = [list(rng.permutation(by_subject[s])) for s in subjects]
        dealt = []
        while any(queues):
            for q in queues:
                if q:
                    dealt.append(int(q.pop(0)))
        n_val = int(math.floor(len(members) * val_fraction + 0.5))
        n_val = min(max(n_val, 1), len(members) - 1)
        val_idx.extend(dealt[:n_val])
        train_idx.extend(dealt[n_val:])
    return store.take(sorted(train_idx)), store.take(sorted(val_idx))


# ---------------------------------------------------------------- persistence


def save_store(store: EpochStore, path) -> Path:
    """Write ``manifest.json`` and ``epochs.f32`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = store.manifest()
    (path / PAYLOAD_NAME).write_bytes(store._payload_bytes())
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_store(path) -> EpochStore:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_NAME).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise IntegrityError(f"no {MANIFEST_NAME} in {path}") from exc
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"unreadable manifest in {path}: {exc}") from exc
    if manifest.get("format") != STORE_FORMAT or manifest.get("version") != STORE_VERSION:
        raise IntegrityError(
            f"unsupported store format/version {manifest.get('format')!r}/{manifest.get('version')!r}"
        )
    n, n_ch, n_t = manifest["count"], manifest["n_channels"], manifest["n_samples"]
    expected = n * n_ch * n_t * 4
    payload_path = path / manifest.get("payload", PAYLOAD_NAME)
    size = os.path.getsize(payload_path) if payload_path.exists() else -1
    if size != expected:
        raise IntegrityError(f"payload is {size} bytes; manifest count {n} requires {expected}")
    raw = payload_path.read_bytes()
    digest = manifest.get("payload_sha256")
    if digest is not None and hashlib.sha256(raw).hexdigest() != digest:
        raise IntegrityError("payload checksum mismatch")
    data = np.frombuffer(raw, dtype="<f4").reshape(n, n_ch, n_t).astype(np.float32)
    return EpochStore(
        data=data,
        labels=manifest["labels"],
        subject_ids=manifest["subject_ids"],
        kinds=manifest["kinds"],
        sample_rate_hz=manifest["sample_rate_hz"],
        channels=tuple(manifest["channels"]),
        extra=manifest.get("extra", {}),
    )

