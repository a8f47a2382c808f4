"""Command-line entry point: ``eegcvae <command> [flags]``.

Every command writes its outputs (and a ``config.txt`` echo of the fully
resolved settings) under ``--out``. Settings come from built-in defaults, then
an optional ``--config`` file of ``key=value`` lines, then explicit flags.

Exit status: 0 on success, 2 for bad input (files, flags, formats), 3 for
numeric failures (non-finite training, failed gradient checks).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__, _backend
from .cvae import TrainConfig, load_checkpoint, save_checkpoint, train
from .data import (CHANNELS_15, CLASSES, EpochStore, clean_channel_name, extract_cue_epochs,
                   extract_resting_epochs, load_store, read_csv_recording, read_edf, read_events_csv,
                   save_store, select_channels, split_train_val)
from .dsp import (BANDS, BASELINE_S, POST_INTERVAL_S, TFR_K, TFR_NW, TFR_STEP_S, TFR_WIN_S, TfrMap,
                  bandpass_recording, bandpower_change_array, boxstats, common_average_reference,
                  erd_ers_array, multitaper_spectrogram, write_tfr_image)
from .errors import EegCvaeError, NumericError

log = logging.getLogger("eegcvae")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3

INPUT_ERRORS = (ValueError, KeyError, IndexError, OSError, TypeError)


class ConfigError(ValueError):
    pass


class StageError(ValueError):
    """An ingest stage failed; the message names the file and the stage."""


# ---------------------------------------------------------------- config handling


def read_config_file(path) -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment, blank lines are ignored."""
    out = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults <- config file <- flags given on the command line."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        for k, v in read_config_file(args.config).items():
            if k not in cfg:
                raise ConfigError(f"unknown config key {k!r} for this command")
            cfg[k] = _coerce(v, defaults[k])
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, (list, tuple)):
        return [s.strip() for s in value.split(",") if s.strip()]
    return value


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return "" if v is None else str(v)


def _out_dir(cfg: dict) -> Path:
    if not cfg.get("out"):
        raise ConfigError("--out is required")
    return Path(cfg["out"])


def echo_config(cfg: dict, out: Path, command: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"command={command}", f"version={__version__}", f"backend={_backend.name()}"]
    lines += [f"{k}={_fmt(cfg[k])}" for k in sorted(cfg)]
    path = out / "config.txt"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _pair(text, what) -> tuple[float, float]:
    if isinstance(text, (list, tuple)):
        parts = list(text)
    else:
        parts = str(text).replace(":", ",").split(",")
    if len(parts) != 2:
        raise ConfigError(f"{what} must be two numbers 'lo,hi', got {text!r}")
    lo, hi = float(parts[0]), float(parts[1])
    if not lo < hi:
        raise ConfigError(f"{what} must satisfy lo < hi, got {lo}, {hi}")
    return lo, hi


def _band(text) -> tuple[str, tuple[float, float]]:
    if str(text).lower() in BANDS:
        return str(text).lower(), BANDS[str(text).lower()]
    lo, hi = _pair(text, "band")
    return f"{lo:g}-{hi:g}Hz", (lo, hi)


# ---------------------------------------------------------------- commands


def _read_recording(path: Path, sample_rate: float | None):
    subject = path.stem
    if path.suffix.lower() == ".edf":
        return read_edf(path.read_bytes(), subject)
    if path.suffix.lower() == ".csv":
        if not sample_rate:
            raise ConfigError(f"{path}: CSV recordings need --sample-rate")
        return read_csv_recording(path.read_text(encoding="utf-8"), sample_rate, subject)
    raise ConfigError(f"{path}: unsupported recording type (expected .edf or .csv)")


def cmd_ingest(args) -> int:
    cfg = resolve(args, dict(input=[], events=[], channels=list(CHANNELS_15), mode="cues",
                             sample_rate=0.0, order=3, low_hz=4.0, high_hz=30.0, out=""))
    if not cfg["input"]:
        raise ConfigError("ingest needs at least one --input")
    if cfg["mode"] == "cues" and len(cfg["events"]) != len(cfg["input"]):
        raise ConfigError("--cues needs one --events file per --input "
                          f"({len(cfg['input'])} inputs, {len(cfg['events'])} events files)")
    out = _out_dir(cfg)
    epochs = []
    for k, raw in enumerate(cfg["input"]):
        path = Path(raw)
        stage = "read"
        try:
            rec = _read_recording(path, cfg["sample_rate"])
            rec = replace(rec, channels=tuple(clean_channel_name(c) for c in rec.channels))
            stage = "re-reference"
            rec = common_average_reference(rec)
            stage = "bandpass"
            rec = bandpass_recording(rec, cfg["order"], cfg["low_hz"], cfg["high_hz"])
            stage = "channel selection"
            rec = select_channels(rec, cfg["channels"])
            stage = "epoching"
            if cfg["mode"] == "resting":
                epochs.extend(extract_resting_epochs(rec))
            else:
                stage = "events"
                events = read_events_csv(Path(cfg["events"][k]).read_text(encoding="utf-8"))
                stage = "epoching"
                for label in CLASSES:
                    times = [t for t, lab in events if lab == label]
                    if times:
                        epochs.extend(extract_cue_epochs(rec, times, label))
        except NumericError:
            raise
        except (EegCvaeError, *INPUT_ERRORS) as exc:
            raise StageError(f"{path} [{stage}]: {exc}") from exc
    if not epochs:
        raise ConfigError("no epochs extracted")
    shapes = {e.data.shape for e in epochs}
    if len(shapes) != 1:
        raise ConfigError(f"inputs produced differently shaped epochs: {sorted(shapes)}")
    fs = rec.sample_rate_hz
    store = EpochStore.from_epochs(epochs, fs, tuple(cfg["channels"]))
    save_store(store, out / "store")
    echo_config(cfg, out, "ingest")
    for subject, counts in sorted(store.counts().items()):
        print(f"{subject}: " + ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    print(f"wrote {len(store)} epochs to {out / 'store'}")
    return EXIT_OK


def cmd_synth_data(args) -> int:
    from .synthbench import SynthSpec, make_resting_store, make_synthetic_dataset

    cfg = resolve(args, dict(subjects=5, trials_per_class=20, seed=0, out=""))
    spec = SynthSpec(n_subjects=cfg["subjects"], trials_per_class=cfg["trials_per_class"], seed=cfg["seed"])
    out = _out_dir(cfg)
    ds = make_synthetic_dataset(spec)
    save_store(ds.store, out / "trials")
    save_store(make_resting_store(spec, seed=1), out / "resting")
    (out / "ground_truth.csv").write_text(ds.truth_csv(), encoding="utf-8")
    echo_config(cfg, out, "synth-data")
    print(f"wrote {len(ds.store)} trials and {spec.n_subjects * 20} resting epochs to {out}")
    return EXIT_OK


TRAIN_FLAGS = ("batch_size", "max_epochs", "patience", "latent_dim", "lr")


def cmd_train(args) -> int:
    tc = TrainConfig()
    defaults = dict(train="", val="", val_fraction=0.0, out="", seed=tc.seed, batch_size=tc.batch_size,
                    max_epochs=tc.max_epochs, patience=tc.patience, latent_dim=tc.latent_dim, lr=tc.lr,
                    n_kernels=tc.n_kernels, val_passes=tc.val_passes, loss_weighting=tc.loss_weighting,
                    decoder_dense_bias=tc.decoder_dense_bias, output_bn_elu=tc.output_bn_elu,
                    standardize=tc.standardize)
    cfg = resolve(args, defaults)
    if not cfg["train"]:
        raise ConfigError("train needs --train")
    store = load_store(cfg["train"])
    if cfg["val"]:
        train_store, val_store = store, load_store(cfg["val"])
    elif cfg["val_fraction"] > 0:
        train_store, val_store = split_train_val(store, cfg["val_fraction"], cfg["seed"])
    else:
        raise ConfigError("give --val or --val-fraction")
    tcfg = TrainConfig.from_dict(cfg)
    out = _out_dir(cfg)
    echo_config(cfg, out, "train")
    print(f"train {len(train_store)} / val {len(val_store)} epochs; batch {tcfg.batch_size}, "
          f"max epochs {tcfg.max_epochs}, patience {tcfg.patience}, latent {tcfg.latent_dim}, "
          f"kernels {tcfg.n_kernels}")

    def progress(row):
        print(f"epoch {row['epoch']:3d}  train {row['train_total']:.3f}  val {row['val_total']:.3f}",
              flush=True)

    ckpt = train(train_store, val_store, tcfg, log_path=out / "history.csv", progress=progress)
    save_checkpoint(ckpt, out / "checkpoint.bin")
    (out / "parameters.txt").write_text(ckpt.model.count_parameters().table() + "\n", encoding="utf-8")
    print(f"best epoch {ckpt.best_epoch}: val {ckpt.meta['best_val_total']:.3f} "
          f"(initial {ckpt.meta['initial_val_total']:.3f})")
    return EXIT_OK


def cmd_generate(args) -> int:
    from .generate import GenerationRequest, generate_all_conditions, generate_conditioned, save_artificial_set

    cfg = resolve(args, dict(checkpoint="", input="", condition="", all=False, seed=0,
                             samples_per_epoch=1, mean_mode=False, out=""))
    if not cfg["checkpoint"] or not cfg["input"]:
        raise ConfigError("generate needs --checkpoint and --input (resting store)")
    if bool(cfg["condition"]) == bool(cfg["all"]):
        raise ConfigError("give exactly one of --condition NAME or --all")
    ckpt = load_checkpoint(cfg["checkpoint"])
    resting = load_store(cfg["input"])
    out = _out_dir(cfg)
    if cfg["all"]:
        sets = generate_all_conditions(ckpt, resting, cfg["seed"], cfg["samples_per_epoch"], cfg["mean_mode"])
    else:
        req = GenerationRequest(ckpt, resting, cfg["condition"], cfg["samples_per_epoch"], cfg["seed"],
                                mean_mode=cfg["mean_mode"])
        aset = generate_conditioned(req)
        sets = {aset.condition: aset}
    echo_config(cfg, out, "generate")
    for name, aset in sets.items():
        save_artificial_set(aset, out / name)
        print(f"{name}: {len(aset)} epochs, c=[{aset.provenance[0]['c_vector']}] -> {out / name}")
    return EXIT_OK


def _class_power(store: EpochStore, label: str | None):
    idx = [i for i, lab in enumerate(store.labels) if label is None or lab == label]
    if not idx:
        return None, None
    spec = multitaper_spectrogram(store.data[idx], fs_hz=store.sample_rate_hz)
    return spec.power.mean(axis=0), spec


def cmd_tfr(args) -> int:
    cfg = resolve(args, dict(input="", condition="", images=False, out=""))
    if not cfg["input"]:
        raise ConfigError("tfr needs --input")
    store = load_store(cfg["input"])
    label = cfg["condition"].upper() or None
    if label is not None and label not in CLASSES:
        raise ConfigError(f"invalid condition {cfg['condition']!r}; expected one of {{{', '.join(CLASSES)}}}")
    power, spec = _class_power(store, label)
    if power is None:
        raise ConfigError(f"no epochs with label {label} in {cfg['input']}")
    values = erd_ers_array(power, spec.frame_times_s, BASELINE_S)
    out = _out_dir(cfg)
    echo_config(cfg, out, "tfr")
    meta = {"nw": TFR_NW, "k": TFR_K, "win_s": TFR_WIN_S, "step_s": TFR_STEP_S,
            "baseline_s": f"{BASELINE_S[0]}:{BASELINE_S[1]}", "n_epochs": int(spec.power.shape[0]),
            "condition": label or "all"}
    for ch, grid in zip(store.channels, values):
        tfr = TfrMap(grid, spec.freqs_hz, spec.frame_times_s, ch, meta=dict(meta))
        (out / f"tfr_{ch}.csv").write_text(tfr.to_csv(), encoding="utf-8")
        if cfg["images"]:
            write_tfr_image(tfr, out / f"tfr_{ch}.png")
    print(f"wrote {len(store.channels)} maps of {values.shape[1]}x{values.shape[2]} to {out}")
    return EXIT_OK


BANDPOWER_COLUMNS = ("subject", "class", "channel", "alpha_change", "beta_change")


def cmd_bandpower(args) -> int:
    cfg = resolve(args, dict(input=[], channels=["C3", "Cz", "C4"], interval=list(POST_INTERVAL_S),
                             band=[], out=""))
    if not cfg["input"]:
        raise ConfigError("bandpower needs at least one --input store")
    interval = _pair(cfg["interval"], "interval")
    extra_bands = [_band(b) for b in cfg["band"]]
    bands = [("alpha", BANDS["alpha"]), ("beta", BANDS["beta"])]
    bands += [b for b in extra_bands if b[0] not in ("alpha", "beta")]
    store = EpochStore.concatenate([load_store(p) for p in cfg["input"]])
    missing = [ch for ch in cfg["channels"] if ch not in store.channels]
    if missing:
        raise ConfigError(f"channels not in store: {missing}")
    out = _out_dir(cfg)
    echo_config(cfg, out, "bandpower")
    rows = []
    for subject in sorted(set(store.subject_ids)):
        for label in CLASSES:
            idx = [i for i, (s, lab) in enumerate(zip(store.subject_ids, store.labels))
                   if s == subject and lab == label]
            if not idx:
                continue
            spec = multitaper_spectrogram(store.data[idx], fs_hz=store.sample_rate_hz)
            erd = erd_ers_array(spec.power.mean(axis=0), spec.frame_times_s, BASELINE_S)
            for ch in cfg["channels"]:
                grid = erd[store.channels.index(ch)]
                row = {"subject": subject, "class": label, "channel": ch}
                for name, rng in bands:
                    row[f"{name}_change"] = float(bandpower_change_array(grid, spec.freqs_hz,
                                                                         spec.frame_times_s, rng, interval))
                rows.append(row)
    columns = list(BANDPOWER_COLUMNS) + [f"{n}_change" for n, _ in bands[2:]]
    with (out / "bandpower.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        w.writerows(rows)
    with (out / "boxstats.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "channel", "band", "n", "median", "q1", "q3", "min", "max"])
        for label in CLASSES:
            for ch in cfg["channels"]:
                for name, _ in bands:
                    vals = [r[f"{name}_change"] for r in rows if r["class"] == label and r["channel"] == ch]
                    if vals:
                        b = boxstats(vals)
                        w.writerow([label, ch, name, b.n, b.median, b.q1, b.q3, b.minimum, b.maximum])
    print(f"wrote {len(rows)} rows to {out / 'bandpower.csv'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_reports, run_all

    cfg = resolve(args, dict(seed=0, inject="", out=""))
    reports = run_all(seed=cfg["seed"], inject=cfg["inject"] or None)
    text = format_reports(reports)
    print(text)
    if cfg["out"]:
        out = _out_dir(cfg)
        echo_config(cfg, out, "gradcheck")
        (out / "gradcheck.txt").write_text(text + "\n", encoding="utf-8")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_NUMERIC


def cmd_report(args) -> int:
    from .cvae import ConditionalVAE

    cfg = resolve(args, dict(checkpoint="", input="", out=""))
    lines = []
    if cfg["checkpoint"]:
        ckpt = load_checkpoint(cfg["checkpoint"])
        model = ckpt.model
        lines.append(f"checkpoint {cfg['checkpoint']}: best epoch {ckpt.best_epoch} of {len(ckpt.history) - 1}")
        lines.append(f"config: {ckpt.config}")
    else:
        model = ConditionalVAE()
        lines.append("untrained default model")
    lines.append("layer output shapes (without batch axis):")
    lines += [f"  {name:<14}{shape}" for name, shape in model.trace_shapes()]
    lines.append(model.count_parameters().table())
    if cfg["input"]:
        store = load_store(cfg["input"])
        lines.append(f"store {cfg['input']}: {len(store)} epochs, shape {store.data.shape[1:]}")
        for subject, counts in sorted(store.counts().items()):
            lines.append(f"  {subject}: " + ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    text = "\n".join(lines)
    print(text)
    if cfg["out"]:
        out = _out_dir(cfg)
        echo_config(cfg, out, "report")
        (out / "report.txt").write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _csv_list(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eegcvae", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        sp.add_argument("--config", help="key=value file; flags override it")
        sp.add_argument("--out", help="output directory")
        return sp

    sp = add("ingest", cmd_ingest, "recordings -> CAR -> 4-30 Hz bandpass -> channels -> epoch store")
    sp.add_argument("--input", action="append", help="EDF or CSV recording (repeatable)")
    sp.add_argument("--events", action="append", help="onset_seconds,label CSV per input (repeatable)")
    sp.add_argument("--channels", type=_csv_list, help="comma-separated channel names")
    mode = sp.add_mutually_exclusive_group()
    mode.add_argument("--cues", dest="mode", action="store_const", const="cues")
    mode.add_argument("--resting", dest="mode", action="store_const", const="resting")
    sp.add_argument("--sample-rate", type=float, help="sample rate of CSV inputs (Hz)")

    sp = add("synth-data", cmd_synth_data, "synthetic trials + resting epochs with ground truth")
    sp.add_argument("--subjects", type=int)
    sp.add_argument("--trials-per-class", type=int)
    sp.add_argument("--seed", type=int)

    sp = add("train", cmd_train, "fit the conditional VAE with early stopping")
    sp.add_argument("--train")
    sp.add_argument("--val")
    sp.add_argument("--val-fraction", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--max-epochs", type=int)
    sp.add_argument("--patience", type=int)
    sp.add_argument("--latent-dim", type=int)
    sp.add_argument("--lr", type=float)

    sp = add("generate", cmd_generate, "artificial epochs for one or all conditions")
    sp.add_argument("--checkpoint")
    sp.add_argument("--input", help="resting-state epoch store")
    sp.add_argument("--condition", help="RIGHT, LEFT or FEET")
    sp.add_argument("--all", action="store_const", const=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--samples-per-epoch", type=int)
    sp.add_argument("--mean-mode", action="store_const", const=True,
                    help="decode the posterior mean (diagnostic only)")

    sp = add("tfr", cmd_tfr, "per-electrode averaged ERD/ERS grids")
    sp.add_argument("--input")
    sp.add_argument("--condition", help="restrict to one class label")
    sp.add_argument("--images", action="store_const", const=True, help="also write PNG maps")

    sp = add("bandpower", cmd_bandpower, "per-subject, per-class alpha/beta change + box statistics")
    sp.add_argument("--input", action="append", help="epoch store (repeatable)")
    sp.add_argument("--channels", type=_csv_list)
    sp.add_argument("--band", action="append", help="extra band 'lo,hi' in Hz (repeatable)")
    sp.add_argument("--interval", help="post-cue interval 'start,stop' in s")

    sp = add("gradcheck", cmd_gradcheck, "finite-difference check of every backward pass")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--inject", help=argparse.SUPPRESS)

    sp = add("report", cmd_report, "layer shapes, parameter count, store summary")
    sp.add_argument("--checkpoint")
    sp.add_argument("--input")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (EegCvaeError, *INPUT_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
