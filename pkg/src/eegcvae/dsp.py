"""Filtering, re-referencing, Slepian tapers and ERD/ERS time-frequency analysis."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import eigh_tridiagonal

from . import _backend
from .data import Epoch, Recording
from .errors import NumericError, ShapeError

log = logging.getLogger(__name__)

ALPHA_HZ = (8.0, 15.0)
BETA_HZ = (20.0, 30.0)
BANDS = {"alpha": ALPHA_HZ, "beta": BETA_HZ}

TFR_FMIN_HZ = 4.0
TFR_FMAX_HZ = 30.0
TFR_WIN_S = 0.5
TFR_STEP_S = 0.05
TFR_NW = 1.5
TFR_K = 2
TFR_TMIN_S = -0.5
BASELINE_S = (-0.5, 0.0)
POST_INTERVAL_S = (0.5, 1.5)

_TIME_TOL = 1e-9


# ---------------------------------------------------------------- IIR filters


@dataclass(frozen=True)
class IirFilter:
    """Cascade of second-order sections, rows ``[b0, b1, b2, 1, a1, a2]``."""

    sos: np.ndarray
    order: int
    band_hz: tuple[float, float]
    sample_rate_hz: float

    def __post_init__(self):
        sos = np.array(self.sos, dtype=np.float64)
        sos.setflags(write=False)
        object.__setattr__(self, "sos", sos)
        if sos.ndim != 2 or sos.shape[1] != 6:
            raise ShapeError(f"sos must be (n_sections, 6), got {sos.shape}")
        if not np.all(sos[:, 3] == 1.0):
            raise ValueError("sections must be normalized (a0 == 1)")

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots([1.0, a1, a2]) for a1, a2 in self.sos[:, 4:]])

    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0))

    def frequency_response(self, freqs_hz) -> np.ndarray:
        """Complex response H(e^{jw}) at the given frequencies."""
        f = np.asarray(freqs_hz, dtype=np.float64)
        zinv = np.exp(-2j * np.pi * f / self.sample_rate_hz)
        # land exactly on the unit-circle points z = +1 and z = -1
        zinv = np.where(f == 0.0, 1.0 + 0j, zinv)
        zinv = np.where(f == self.sample_rate_hz / 2, -1.0 + 0j, zinv)
        h = np.ones_like(zinv)
        for b0, b1, b2, a0, a1, a2 in self.sos:
            h = h * (b0 + zinv * (b1 + zinv * b2)) / (a0 + zinv * (a1 + zinv * a2))
        return h

    def to_json(self) -> str:
        return json.dumps({
            "type": "butterworth_bandpass",
            "order": self.order,
            "band_hz": list(self.band_hz),
            "sample_rate_hz": self.sample_rate_hz,
            "sections": [
                {"b": list(map(float, row[:3])), "a": list(map(float, row[3:]))} for row in self.sos
            ],
        }, indent=1)


def design_butterworth_bandpass(order: int, low_hz: float, high_hz: float, fs_hz: float) -> IirFilter:
    """Digital Butterworth bandpass via a prewarped bilinear transform.

    The order-``order`` analog lowpass prototype is shifted to a bandpass
    (doubling the pole count), both edges are prewarped so they keep their
    -3.01 dB gain after discretization, and poles are grouped into conjugate
    pairs. Each section gets one zero at z=+1 and one at z=-1.
    """
    if order < 1:
        raise ValueError(f"filter order must be >= 1, got {order}")
    if not 0 < low_hz < high_hz < fs_hz / 2:
        raise ValueError(f"band edges must satisfy 0 < low < high < fs/2; got {low_hz}, {high_hz} at fs={fs_hz}")

    k = 2.0 * fs_hz
    w_lo = k * np.tan(np.pi * low_hz / fs_hz)
    w_hi = k * np.tan(np.pi * high_hz / fs_hz)
    bw = w_hi - w_lo
    w0_sq = w_lo * w_hi

    proto = np.exp(1j * np.pi * (2 * np.arange(order) + order + 1) / (2 * order))
    half = proto * bw / 2
    disc = np.sqrt(half**2 - w0_sq)
    s_poles = np.concatenate([half + disc, half - disc])
    gain = bw**order

    z_poles = (k + s_poles) / (k - s_poles)
    # order zeros at s=0 -> z=+1, order zeros at s=inf -> z=-1
    gain = gain * np.real(k**order / np.prod(k - s_poles))

    sections = []
    for p1, p2 in _pair_poles(z_poles):
        a1 = -np.real(p1 + p2)
        a2 = np.real(p1 * p2)
        sections.append([1.0, 0.0, -1.0, 1.0, a1, a2])
    sos = np.array(sections)
    sos[0, :3] *= gain
    filt = IirFilter(sos, order, (float(low_hz), float(high_hz)), float(fs_hz))
    if not filt.is_stable():
        raise NumericError("designed filter is unstable")
    return filt


def _pair_poles(poles):
    """Conjugate pairs, then leftover real poles two at a time; closest to the unit circle last."""
    poles = np.asarray(poles)
    upper = [p for p in poles if p.imag > 1e-12]
    real = sorted((p.real for p in poles if abs(p.imag) <= 1e-12), key=abs)
    pairs = [(p, np.conj(p)) for p in upper]
    while len(real) >= 2:
        pairs.append((complex(real.pop(0)), complex(real.pop(0))))
    if real:
        raise ValueError("odd number of real poles cannot form second-order sections")
    return sorted(pairs, key=lambda pr: abs(pr[0]))


def filter_causal(filt: IirFilter, x):
    """Forward-only filtering with zero initial state along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1, x.shape[-1]) if x.ndim != 1 else x[None, :]
    y = _backend.sosfilt(filt.sos, flat).reshape(x.shape)
    if not np.all(np.isfinite(y)):
        log.warning("non-finite values in filter output (%d of %d)", np.count_nonzero(~np.isfinite(y)), y.size)
    return y


def bandpass_recording(rec: Recording, order=3, low_hz=4.0, high_hz=30.0) -> Recording:
    filt = design_butterworth_bandpass(order, low_hz, high_hz, rec.sample_rate_hz)
    return replace(rec, samples=filter_causal(filt, rec.samples))


def common_average_reference(obj):
    """Subtract the across-channel mean at every sample.

    Accepts a Recording, an Epoch, or an array whose channel axis is
    second-to-last.
    """
    if isinstance(obj, Recording):
        return replace(obj, samples=common_average_reference(obj.samples))
    if isinstance(obj, Epoch):
        return replace(obj, data=common_average_reference(np.asarray(obj.data)).astype(np.asarray(obj.data).dtype))
    x = np.asarray(obj, dtype=np.float64)
    if x.ndim < 2 or x.shape[-2] < 2:
        raise ValueError("common average reference needs at least 2 channels")
    return x - x.mean(axis=-2, keepdims=True)


# ---------------------------------------------------------------- Slepian tapers


@dataclass(frozen=True)
class TaperSet:
    tapers: np.ndarray
    concentrations: np.ndarray
    time_bandwidth: float

    @property
    def window_len(self) -> int:
        return self.tapers.shape[1]


def dpss(window_len: int, time_bandwidth: float, k: int) -> TaperSet:
    """First ``k`` discrete prolate spheroidal sequences of length ``window_len``.

    Computed from the symmetric tridiagonal matrix that commutes with the
    sinc concentration kernel. Even-order tapers are signed to have a positive
    sum, odd-order ones a positive first significant sample.
    """
    n = int(window_len)
    if n < 2:
        raise ValueError("window_len must be >= 2")
    if not 0 < time_bandwidth < n / 2:
        raise ValueError(f"time_bandwidth must lie in (0, {n / 2}), got {time_bandwidth}")
    if not 1 <= k <= int(np.floor(2 * time_bandwidth)):
        raise ValueError(f"k must lie in [1, floor(2*NW)] = [1, {int(np.floor(2 * time_bandwidth))}], got {k}")
    w = time_bandwidth / n
    idx = np.arange(n)
    diag = ((n - 1 - 2 * idx) / 2.0) ** 2 * np.cos(2 * np.pi * w)
    off = idx[1:] * (n - idx[1:]) / 2.0
    _, vecs = eigh_tridiagonal(diag, off, select="i", select_range=(n - k, n - 1))
    tapers = vecs[:, ::-1].T.copy()

    thresh = max(1e-7, 1.0 / n)
    for j, v in enumerate(tapers):
        if j % 2 == 0:
            if v.sum() < 0:
                v *= -1
        else:
            first = v[v * v > thresh][0]
            if first < 0:
                v *= -1
    tapers /= np.linalg.norm(tapers, axis=1, keepdims=True)

    lag = idx[:, None] - idx[None, :]
    kernel = np.where(lag == 0, 2 * w, np.sin(2 * np.pi * w * lag) / (np.pi * np.where(lag == 0, 1, lag)))
    conc = np.einsum("ki,ij,kj->k", tapers, kernel, tapers)
    order = np.argsort(-conc, kind="stable")
    return TaperSet(tapers[order], conc[order], float(time_bandwidth))


# ---------------------------------------------------------------- spectrograms


@dataclass(frozen=True)
class Spectrogram:
    """Multitaper power, shape (n_channels, n_freqs, n_frames)."""

    power: np.ndarray
    freqs_hz: np.ndarray
    frame_times_s: np.ndarray
    meta: dict = field(default_factory=dict)


def _as_int_samples(seconds, fs, what):
    n = seconds * fs
    if abs(n - round(n)) > 1e-9:
        raise ValueError(f"{what} of {seconds} s is not an integer number of samples at {fs} Hz")
    return int(round(n))


def multitaper_spectrogram(epoch, tapers: TaperSet | None = None, win_s: float = TFR_WIN_S,
                           step_s: float = TFR_STEP_S, fmin_hz: float = TFR_FMIN_HZ,
                           fmax_hz: float = TFR_FMAX_HZ, fs_hz: float = 160.0,
                           tmin_s: float = TFR_TMIN_S, df_hz: float = 1.0) -> Spectrogram:
    """Sliding-window multitaper power at ``df_hz`` bins.

    ``epoch`` is an Epoch or an array of shape (n_channels, n_samples) or
    (n_epochs, n_channels, n_samples). Each window is mean-removed, tapered
    and zero-padded to ``fs_hz / df_hz`` points; power is the taper average of
    |DFT|^2 / fs. Frame times are window centers relative to the cue, where
    the first sample sits at ``tmin_s``.
    """
    x = np.asarray(epoch.data if isinstance(epoch, Epoch) else epoch, dtype=np.float64)
    win = _as_int_samples(win_s, fs_hz, "window")
    step = _as_int_samples(step_s, fs_hz, "step")
    nfft = _as_int_samples(1.0 / df_hz, fs_hz, "1/df")
    if tapers is None:
        tapers = dpss(win, TFR_NW, TFR_K)
    if tapers.window_len != win:
        raise ShapeError(f"tapers have length {tapers.window_len}, window is {win} samples")
    if x.shape[-1] < win:
        raise ValueError(f"window of {win} samples exceeds epoch length {x.shape[-1]}")
    if not 0 <= fmin_hz <= fmax_hz <= fs_hz / 2:
        raise ValueError("frequency range must lie within [0, fs/2]")

    starts = np.arange(0, x.shape[-1] - win + 1, step)
    segs = np.lib.stride_tricks.sliding_window_view(x, win, axis=-1)[..., starts, :]
    segs = segs - segs.mean(axis=-1, keepdims=True)
    freqs = np.arange(nfft // 2 + 1) * (fs_hz / nfft)
    keep = (freqs >= fmin_hz - 1e-9) & (freqs <= fmax_hz + 1e-9)
    spec = np.fft.rfft(segs[..., None, :] * tapers.tapers, n=nfft, axis=-1)[..., keep]
    power = (np.abs(spec) ** 2).mean(axis=-2) / fs_hz
    # (..., frames, freqs) -> (..., freqs, frames)
    power = np.swapaxes(power, -1, -2)
    times = tmin_s + (starts + win / 2.0) / fs_hz
    meta = {"nw": tapers.time_bandwidth, "k": int(tapers.tapers.shape[0]), "win_s": win_s,
            "step_s": step_s, "nfft": nfft, "fs_hz": fs_hz, "detrend": "mean"}
    return Spectrogram(power, freqs[keep], times, meta)


# ---------------------------------------------------------------- ERD / ERS


@dataclass
class TfrMap:
    """Signed percent power change per (frequency bin, frame) for one electrode."""

    values: np.ndarray
    freqs_hz: np.ndarray
    frame_times_s: np.ndarray
    electrode: str = ""
    flagged_bins: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.freqs_hz = np.asarray(self.freqs_hz, dtype=np.float64)
        self.frame_times_s = np.asarray(self.frame_times_s, dtype=np.float64)
        if self.values.shape != (self.freqs_hz.size, self.frame_times_s.size):
            raise ShapeError(f"values {self.values.shape} do not match grid "
                             f"({self.freqs_hz.size}, {self.frame_times_s.size})")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        meta = {"electrode": self.electrode, **self.meta}
        w.writerow(["meta"] + [f"{k}={v}" for k, v in meta.items()])
        w.writerow(["freq_hz"] + [f"{t:.6g}" for t in self.frame_times_s])
        for f, row in zip(self.freqs_hz, self.values):
            w.writerow([f"{f:g}"] + [repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> TfrMap:
        rows = list(csv.reader(io.StringIO(text)))
        meta = dict(item.split("=", 1) for item in rows[0][1:])
        electrode = meta.pop("electrode", "")
        times = np.array([float(t) for t in rows[1][1:]])
        freqs = np.array([float(r[0]) for r in rows[2:]])
        values = np.array([[float(v) for v in r[1:]] for r in rows[2:]])
        return cls(values, freqs, times, electrode, meta=meta)


def _baseline_frames(frame_times, baseline_s):
    t0, t1 = baseline_s
    sel = (frame_times >= t0 - _TIME_TOL) & (frame_times <= t1 + _TIME_TOL)
    if not sel.any():
        raise ValueError(f"no frame center falls inside the baseline {baseline_s}")
    return sel


def erd_ers_array(power, frame_times_s, baseline_s=BASELINE_S):
    """Vectorized ERD/ERS over any leading axes; last two are (freqs, frames).

    Bins with zero baseline power come back as NaN.
    """
    power = np.asarray(power, dtype=np.float64)
    sel = _baseline_frames(np.asarray(frame_times_s), baseline_s)
    base = power[..., sel].mean(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 100.0 * (power - base) / base
    return np.where(base > 0, out, np.nan)


def erd_ers(power, baseline_interval_s, frame_times, freqs_hz=None, electrode: str = "") -> TfrMap:
    """Percent change of each frame's power relative to the mean baseline power, per bin."""
    power = np.asarray(power, dtype=np.float64)
    if power.ndim != 2:
        raise ShapeError("erd_ers expects one electrode's (n_freqs, n_frames) power grid")
    frame_times = np.asarray(frame_times, dtype=np.float64)
    values = erd_ers_array(power, frame_times, baseline_interval_s)
    if freqs_hz is None:
        freqs_hz = np.arange(power.shape[0], dtype=np.float64)
    flagged = tuple(float(f) for f, row in zip(freqs_hz, values) if np.isnan(row).all())
    if flagged:
        log.warning("zero baseline power in bins %s Hz; values undefined", flagged)
    return TfrMap(values, freqs_hz, frame_times, electrode, flagged)


def epoch_tfr_maps(epochs, channels: Sequence[str], fs_hz: float = 160.0, tapers=None,
                   baseline_s=BASELINE_S):
    """ERD/ERS values for a batch of epochs: array (n_epochs, n_channels, n_freqs, n_frames)."""
    spec = multitaper_spectrogram(np.asarray(epochs), tapers=tapers, fs_hz=fs_hz)
    return erd_ers_array(spec.power, spec.frame_times_s, baseline_s), spec


def average_tfr(maps: Sequence[TfrMap]) -> TfrMap:
    """Element-wise mean of maps that share grids and electrode."""
    maps = list(maps)
    if not maps:
        raise ValueError("nothing to average")
    ref = maps[0]
    for m in maps[1:]:
        if (m.electrode != ref.electrode or m.values.shape != ref.values.shape
                or not np.array_equal(m.freqs_hz, ref.freqs_hz)
                or not np.array_equal(m.frame_times_s, ref.frame_times_s)):
            raise ValueError("maps differ in grid or electrode")
    values = np.mean(np.stack([m.values for m in maps]), axis=0)
    return TfrMap(values, ref.freqs_hz, ref.frame_times_s, ref.electrode, ref.flagged_bins, dict(ref.meta))


def _band_mask(freqs, band):
    return (freqs >= band[0] - _TIME_TOL) & (freqs <= band[1] + _TIME_TOL)


def bandpower_change(tfr: TfrMap, band_hz, interval_s=POST_INTERVAL_S) -> float:
    """Mean map value over bins in ``band_hz`` and frames centred in ``interval_s`` (inclusive)."""
    fsel = _band_mask(tfr.freqs_hz, band_hz)
    tsel = _band_mask(tfr.frame_times_s, interval_s)
    if not fsel.any() or not tsel.any():
        raise ValueError(f"empty selection for band {band_hz} Hz and interval {interval_s} s")
    return float(tfr.values[np.ix_(fsel, tsel)].mean())


def bandpower_change_array(values, freqs_hz, frame_times_s, band_hz, interval_s=POST_INTERVAL_S):
    """Same as :func:`bandpower_change` over leading axes of a (..., freqs, frames) array."""
    fsel = _band_mask(np.asarray(freqs_hz), band_hz)
    tsel = _band_mask(np.asarray(frame_times_s), interval_s)
    if not fsel.any() or not tsel.any():
        raise ValueError(f"empty selection for band {band_hz} Hz and interval {interval_s} s")
    return np.asarray(values)[..., fsel, :][..., tsel].mean(axis=(-2, -1))


@dataclass(frozen=True)
class BoxStats:
    median: float
    q1: float
    q3: float
    minimum: float
    maximum: float
    n: int


def boxstats(values) -> BoxStats:
    """Median, quartiles (linear interpolation between order statistics) and extremes."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("boxstats of an empty sequence")
    q1, med, q3 = np.percentile(v, [25, 50, 75], method="linear")
    return BoxStats(float(med), float(q1), float(q3), float(v.min()), float(v.max()), int(v.size))


@dataclass
class BandSummary:
    band: str
    band_hz: tuple
    per_subject: dict
    stats: BoxStats


def summarize_band(per_subject: dict, band: str) -> BandSummary:
    return BandSummary(band, BANDS[band], dict(per_subject), boxstats(list(per_subject.values())))


def write_tfr_image(tfr: TfrMap, path, limit: float = 100.0):
    """Render a map with a symmetric diverging colour scale; needs matplotlib."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    mesh = ax.pcolormesh(tfr.frame_times_s, tfr.freqs_hz, tfr.values, cmap="RdBu_r",
                         vmin=-limit, vmax=limit, shading="nearest")
    ax.axvline(0.0, color="k", linestyle=":")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("frequency (Hz)")
    ax.set_title(tfr.electrode)
    fig.colorbar(mesh, ax=ax, label="% power change")
    fig.tight_layout()
    fig.savefig(Path(path))
    plt.close(fig)
