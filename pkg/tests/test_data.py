import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import build_edf, random_store
from eegcvae.data import (CHANNELS_15, CLASSES, Epoch, EpochStore, Recording, condition_vector,
                          cue_sample, extract_cue_epochs, extract_resting_epochs, is_one_hot,
                          load_store, parse_label, read_csv_recording, read_edf, read_events_csv,
                          save_store, select_channels, split_train_val, write_edf)
from eegcvae.errors import FormatError, IntegrityError, UnsupportedInputError


# ---------------------------------------------------------------- EDF


def _sig(label, digital, spr, dmin=-32768, dmax=32767, pmin=-1.0, pmax=1.0):
    return dict(label=label, digital=digital, spr=spr, dmin=dmin, dmax=dmax, pmin=pmin, pmax=pmax)


def test_edf_identity_scaling():
    raw = build_edf([_sig("A", [0, 1, 2, 3], 4, 0, 3, 0, 3), _sig("B", [3, 2, 1, 0], 4, 0, 3, 0, 3)], 1)
    rec = read_edf(raw)
    assert rec.channels == ("A", "B")
    np.testing.assert_array_equal(rec.samples, [[0, 1, 2, 3], [3, 2, 1, 0]])


def test_edf_endpoints_exact_and_affine():
    d = np.array([-32768, 0, 1000, 32767])
    rec = read_edf(build_edf([_sig("C3", d, 4)], 1))
    assert rec.samples[0, 0] == -1.0
    assert rec.samples[0, -1] == 1.0
    # independent affine map: p = pmin + (d - dmin) * (pmax - pmin) / (dmax - dmin)
    expected = -1.0 + (d + 32768) * 2.0 / 65535.0
    np.testing.assert_allclose(rec.samples[0], expected, rtol=0, atol=1e-15)


def test_edf_baseline_sample_count_from_header_arithmetic():
    n_records, spr = 60, 160
    sigs = [_sig(ch, np.arange(n_records * spr) % 100, spr) for ch in ("Fc3.", "C3..", "Cz..")]
    ann = dict(label="EDF Annotations", digital=np.zeros(n_records * 10), spr=10, dmin=-32768, dmax=32767,
               pmin=-1, pmax=1)
    raw = build_edf(sigs + [ann], n_records)
    # oracle: read n_records and samples-per-record straight from the header bytes
    ns = int(raw[252:256])
    hdr_records = int(raw[236:244])
    spr_field = 256 + ns * (16 + 80 + 8 + 8 + 8 + 8 + 8 + 80)
    hdr_spr = int(raw[spr_field:spr_field + 8])
    rec = read_edf(raw, "S001")
    assert rec.n_samples == hdr_records * hdr_spr == 9600
    assert rec.sample_rate_hz == 160
    assert rec.channels == ("Fc3", "C3", "Cz")


def test_edf_mixed_rates_rejected():
    raw = build_edf([_sig("A", np.zeros(4), 4), _sig("B", np.zeros(8), 8)], 1)
    with pytest.raises(UnsupportedInputError, match="mixed sampling"):
        read_edf(raw)


@pytest.mark.parametrize("field_offset,bad,name", [(0, b"9       ", "version"),
                                                   (252, b"xx  ", "n_signals"),
                                                   (236, b"abc     ", "n_records")])
def test_edf_malformed_header_names_field(field_offset, bad, name):
    raw = bytearray(build_edf([_sig("A", np.zeros(4), 4)], 1))
    raw[field_offset:field_offset + len(bad)] = bad
    with pytest.raises(FormatError, match=name):
        read_edf(bytes(raw))


def test_edf_truncated_records():
    raw = build_edf([_sig("A", np.zeros(8), 4)], 2)
    with pytest.raises(FormatError, match="n_records"):
        read_edf(raw[:-2])


def test_edf_writer_roundtrip(rng):
    rec = Recording(160.0, ("C3", "Cz"), rng.uniform(-50, 50, (2, 320)))
    back = read_edf(write_edf(rec, physical_range=(-100, 100)))
    assert back.channels == rec.channels
    np.testing.assert_allclose(back.samples, rec.samples, atol=200 / 65535)


# ---------------------------------------------------------------- CSV


def test_csv_recording_basic():
    rec = read_csv_recording("C3,Cz,C4\n1,2,3\n4,5,6\n", 160.0)
    assert rec.channels == ("C3", "Cz", "C4")
    assert rec.samples.shape == (3, 2)
    np.testing.assert_array_equal(rec.samples[:, 1], [4, 5, 6])


def test_csv_empty_body_unusable():
    rec = read_csv_recording("C3,Cz\n", 160.0)
    assert rec.n_samples == 0
    assert not rec.usable
    with pytest.raises(ValueError, match="no samples"):
        extract_resting_epochs(rec)


def test_csv_duration():
    text = "A\n" + "\n".join("0" for _ in range(400)) + "\n"
    assert read_csv_recording(text, 160.0).duration_s == 2.5


def test_csv_ragged_row_reports_row():
    with pytest.raises(FormatError, match="row 3"):
        read_csv_recording("A,B\n1,2\n3\n", 160.0)


def test_csv_non_numeric():
    with pytest.raises(FormatError, match="non-numeric"):
        read_csv_recording("A,B\n1,x\n", 160.0)


def test_events_csv():
    ev = read_events_csv("onset_seconds,label\n1.5,left\n4.0,FEET\n")
    assert ev == [(1.5, "LEFT"), (4.0, "FEET")]
    with pytest.raises(FormatError, match="row 2"):
        read_events_csv("onset_seconds,label\n1.0,UP\n")


# ---------------------------------------------------------------- channels, labels


def _rec64(rng, n=1000):
    names = [f"X{i}" for i in range(49)] + list(CHANNELS_15)
    return Recording(160.0, names, rng.standard_normal((64, n)))


def test_select_channels_order(rng):
    rec = _rec64(rng)
    sel = select_channels(rec, CHANNELS_15)
    assert sel.channels == CHANNELS_15
    np.testing.assert_array_equal(sel.samples, rec.samples[49:])
    perm = list(reversed(CHANNELS_15))
    assert select_channels(rec, perm).channels == tuple(perm)
    np.testing.assert_array_equal(select_channels(rec, perm).samples, rec.samples[49:][::-1])


def test_select_channels_case_insensitive_and_missing(rng):
    rec = Recording(160.0, ("FC3", "CZ"), rng.standard_normal((2, 10)))
    assert select_channels(rec, ["Cz"]).channels == ("Cz",)
    with pytest.raises(KeyError, match="XX"):
        select_channels(rec, ["XX"])


def test_condition_vectors():
    np.testing.assert_array_equal(condition_vector("RIGHT"), [1, 0, 0])
    np.testing.assert_array_equal(condition_vector("LEFT"), [0, 1, 0])
    np.testing.assert_array_equal(condition_vector("FEET"), [0, 0, 1])
    assert is_one_hot([0, 1, 0]) and not is_one_hot([0.5, 0.5, 0]) and not is_one_hot([1, 1, 0])
    with pytest.raises(ValueError, match=r"\{RIGHT, LEFT, FEET\}"):
        parse_label("UP")


# ---------------------------------------------------------------- epoching


def test_cue_epoch_indices():
    fs = 160.0
    x = np.arange(20000, dtype=np.float64)
    rec = Recording(fs, ["C3"], x[None])
    (ep,) = extract_cue_epochs(rec, [10.0], "LEFT")
    assert ep.start_sample == 1520
    np.testing.assert_array_equal(ep.data[0], np.arange(1520, 1920))
    assert ep.data[0, 80] == 1600      # cue instant
    assert ep.label == "LEFT" and ep.kind == "cue_aligned"


def test_cue_epoch_counts_and_bounds(rng):
    rec = Recording(160.0, CHANNELS_15, rng.standard_normal((15, 160 * 130)))
    cues = [2.0 + 6 * k for k in range(21)]
    eps = extract_cue_epochs(rec, cues, "RIGHT")
    assert len(eps) == 21 and all(e.data.shape == (15, 400) for e in eps)
    with pytest.raises(IndexError, match=r"\[0\]"):
        extract_cue_epochs(rec, [0.2, 5.0], "RIGHT")
    with pytest.raises(IndexError, match=r"\[1\]"):
        extract_cue_epochs(rec, [5.0, 129.0], "RIGHT")


def test_cue_sample_rounds_half_up():
    assert cue_sample(10.0, 160) == 1600
    assert cue_sample(0.503125, 160) == 81     # 80.5 samples


def test_non_integer_window_rejected():
    rec = Recording(100.3, ["A"], np.zeros((1, 2000)))
    with pytest.raises(ValueError, match="integer"):
        extract_cue_epochs(rec, [5.0], "LEFT")


def test_resting_epochs_exact(rng):
    rec = Recording(160.0, CHANNELS_15, rng.standard_normal((15, 9600)))
    eps = extract_resting_epochs(rec)
    assert len(eps) == 20
    assert [e.start_sample for e in eps] == [800 + 400 * k for k in range(20)]
    assert all(e.label is None and e.kind == "resting" for e in eps)
    np.testing.assert_array_equal(np.concatenate([e.data for e in eps], axis=1), rec.samples[:, 800:8800])


def test_resting_too_short_and_longer(rng):
    with pytest.raises(ValueError, match="60"):
        extract_resting_epochs(Recording(160.0, ["A"], np.zeros((1, 59 * 160))))
    rec = Recording(160.0, ["A"], np.arange(70 * 160, dtype=float)[None])
    eps = extract_resting_epochs(rec)
    assert len(eps) == 20 and eps[-1].start_sample + 400 == 55 * 160


@settings(max_examples=25, deadline=None)
@given(extra=st.integers(0, 4000))
def test_resting_property_partition(extra):
    n = 9600 + extra
    rec = Recording(160.0, ["A"], np.arange(n, dtype=float)[None])
    eps = extract_resting_epochs(rec)
    assert len(eps) == 20
    idx = np.concatenate([e.data[0] for e in eps]).astype(int)
    np.testing.assert_array_equal(idx, np.arange(800, 8800))


@settings(max_examples=25, deadline=None)
@given(cue=st.floats(0.5, 20.0))
def test_cue_property_shape_and_instant(cue):
    rec = Recording(160.0, ["A"], np.arange(160 * 23, dtype=float)[None])
    (ep,) = extract_cue_epochs(rec, [cue], "FEET")
    assert ep.data.shape == (1, 400)
    assert ep.data[0, 80] == cue_sample(cue, 160.0)


def test_epoch_kind_invariants():
    with pytest.raises(ValueError):
        Epoch(np.zeros((15, 400)), "LEFT", "S", "resting")
    with pytest.raises(ValueError):
        Epoch(np.zeros((15, 400)), None, "S", "cue_aligned")


# ---------------------------------------------------------------- split


def _label_store(counts, subjects=("S1",)):
    labels, sids = [], []
    for s in subjects:
        for lab, n in zip(CLASSES, counts):
            labels += [lab] * n
            sids += [s] * n
    n = len(labels)
    return EpochStore(np.zeros((n, 1, 2), np.float32), labels, sids, ["cue_aligned"] * n, channels=("A",))


def test_split_full_dataset_sizes():
    store = _label_store((2100, 2100, 2100))
    tr, va = split_train_val(store, 1 / 7, seed=0)
    assert (len(tr), len(va)) == (5400, 900)
    assert all(va.labels.count(c) == 300 for c in CLASSES)


def test_split_small_exact():
    tr, va = split_train_val(_label_store((10, 10, 10)), 0.2, seed=3)
    assert (len(tr), len(va)) == (24, 6)
    assert all(tr.labels.count(c) == 8 and va.labels.count(c) == 2 for c in CLASSES)


def test_split_deterministic_and_covers_subjects(rng):
    store = random_store(rng, n_per_class=5, subjects=("S1", "S2", "S3"), n_channels=2, n_samples=3)
    a = split_train_val(store, 0.2, seed=7)
    b = split_train_val(store, 0.2, seed=7)
    np.testing.assert_array_equal(a[1].data, b[1].data)
    assert set(a[1].subject_ids) == {"S1", "S2", "S3"}


def test_split_small_stratum():
    with pytest.raises(ValueError, match="at least 2"):
        split_train_val(_label_store((1, 5, 5)), 0.2)


@settings(max_examples=30, deadline=None)
@given(counts=st.tuples(st.integers(2, 30), st.integers(2, 30), st.integers(2, 30)),
       frac=st.floats(0.05, 0.95), seed=st.integers(0, 2**16))
def test_split_property(counts, frac, seed):
    store = _label_store(counts, subjects=("S1", "S2"))
    store.data[:, 0, 0] = np.arange(len(store))          # tag epochs by index
    tr, va = split_train_val(store, frac, seed)
    tags_tr, tags_va = set(tr.data[:, 0, 0].astype(int)), set(va.data[:, 0, 0].astype(int))
    assert not tags_tr & tags_va
    assert tags_tr | tags_va == set(range(len(store)))
    for c, n in zip(CLASSES, counts):
        n = 2 * n
        assert abs(va.labels.count(c) - n * frac) <= 1 or va.labels.count(c) in (1, n - 1)


# ---------------------------------------------------------------- store persistence


def test_store_roundtrip_bytes(tmp_path, rng):
    store = random_store(rng, n_per_class=2)
    store = store.take(range(10))
    save_store(store, tmp_path / "s")
    back = load_store(tmp_path / "s")
    assert back.data.tobytes() == store.data.tobytes()
    assert back.labels == store.labels and back.subject_ids == store.subject_ids
    assert back.manifest() == store.manifest()
    m = json.loads((tmp_path / "s" / "manifest.json").read_text())
    assert m["count"] == 10
    assert (tmp_path / "s" / "epochs.f32").stat().st_size == 10 * 15 * 400 * 4
    assert hashlib.sha256((tmp_path / "s" / "epochs.f32").read_bytes()).hexdigest() == m["payload_sha256"]


def test_store_payload_layout(tmp_path):
    data = np.arange(2 * 15 * 400, dtype=np.float32).reshape(2, 15, 400)
    store = EpochStore(data, ["LEFT", "FEET"], ["S", "S"], ["cue_aligned"] * 2)
    save_store(store, tmp_path / "s")
    raw = np.frombuffer((tmp_path / "s" / "epochs.f32").read_bytes(), dtype="<f4")
    np.testing.assert_array_equal(raw, np.arange(12000, dtype=np.float32))


def test_store_truncated(tmp_path, rng):
    save_store(random_store(rng, 1), tmp_path / "s")
    p = tmp_path / "s" / "epochs.f32"
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(IntegrityError, match="bytes"):
        load_store(tmp_path / "s")


def test_store_version_and_checksum(tmp_path, rng):
    save_store(random_store(rng, 1), tmp_path / "s")
    p = tmp_path / "s" / "epochs.f32"
    raw = bytearray(p.read_bytes())
    raw[0] ^= 1
    p.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError, match="checksum"):
        load_store(tmp_path / "s")
    m = tmp_path / "s" / "manifest.json"
    meta = json.loads(m.read_text())
    meta["version"] = 99
    m.write_text(json.dumps(meta))
    with pytest.raises(IntegrityError, match="version"):
        load_store(tmp_path / "s")


def test_payload_size_arithmetic():
    # manifest count 6300 -> 6300 * 15 * 400 * 4 bytes
    store = EpochStore(np.zeros((6300, 15, 400), np.float32), ["LEFT"] * 6300, ["S"] * 6300,
                       ["cue_aligned"] * 6300)
    assert store.manifest()["payload_bytes"] == 151_200_000
    assert len(store._payload_bytes()) == 151_200_000
