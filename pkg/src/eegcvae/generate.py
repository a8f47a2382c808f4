"""Condition-specific artificial epochs from resting-state input.

Each resting epoch is encoded, a latent sample is drawn by reparameterization,
and the decoder is run with the requested condition vector attached.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cvae import ConditionalVAE, CvaeCheckpoint, load_checkpoint
from .data import CLASSES, EpochStore, condition_vector, is_one_hot, parse_label, save_store
from .errors import NumericError, ShapeError

PROVENANCE_COLUMNS = ("epoch_index", "subject", "source_index", "sample", "condition", "c_vector", "seed")


@dataclass
class GenerationRequest:
    """What to generate.

    ``condition`` is a class name or an explicit vector. Soft (non one-hot)
    vectors are only accepted with ``strict=False``. ``mean_mode`` decodes
    the posterior mean instead of a sample; it is a diagnostic, not the
    default behaviour.
    """

    checkpoint: CvaeCheckpoint | ConditionalVAE | str | Path
    resting: EpochStore
    condition: str | np.ndarray | list = "RIGHT"
    samples_per_epoch: int = 1
    seed: int = 0
    strict: bool = True
    mean_mode: bool = False
    batch_size: int = 100

    def __post_init__(self):
        if int(self.samples_per_epoch) < 1:
            raise ValueError("samples_per_epoch must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class ArtificialEpochSet:
    store: EpochStore
    provenance: list
    condition: str | None
    c_vector: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.store)


def resolve_condition(condition, strict=True) -> tuple[str | None, np.ndarray]:
    """Class name (or None for soft vectors) and the vector fed to the decoder."""
    if isinstance(condition, str):
        name = parse_label(condition)
        return name, condition_vector(name)
    c = np.asarray(condition, dtype=np.float64).ravel()
    if c.shape != (len(CLASSES),):
        raise ShapeError(f"condition vector must have {len(CLASSES)} entries, got {c.size}")
    if not np.all(np.isfinite(c)):
        raise ValueError("condition vector must be finite")
    if is_one_hot(c):
        return CLASSES[int(np.argmax(c))], c
    if strict:
        raise ValueError(f"condition vector {c.tolist()} is not one-hot; use strict=False for soft conditions")
    return None, c


def _model_of(checkpoint) -> ConditionalVAE:
    if isinstance(checkpoint, (str, Path)):
        checkpoint = load_checkpoint(checkpoint)
    if isinstance(checkpoint, CvaeCheckpoint):
        return checkpoint.model
    if isinstance(checkpoint, ConditionalVAE):
        return checkpoint
    raise TypeError(f"expected a checkpoint or a path, got {type(checkpoint).__name__}")


def _check_resting(model: ConditionalVAE, store: EpochStore):
    want = (model.n_channels, model.n_samples)
    if store.data.shape[1:] != want:
        raise ShapeError(f"resting epochs must be {want[0]}x{want[1]}, got {store.data.shape[1:]}")
    if len(store) == 0:
        raise ValueError("resting store is empty")


def latent_noise(seed: int, n_epochs: int, samples_per_epoch: int, latent_dim: int) -> np.ndarray:
    """Standard-normal draws indexed (epoch, sample, latent).

    Depends only on the seed and the shape, so requests that differ only in
    their condition see the same noise.
    """
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n_epochs, samples_per_epoch, latent_dim))


def _generate(model: ConditionalVAE, resting: EpochStore, name, c, eps, seed, strict, mean_mode, batch_size):
    n, spe = eps.shape[:2]
    out = np.empty((n * spe, model.n_channels, model.n_samples), dtype=np.float32)
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        x = resting.data[start:stop, None].astype(model.dtype)
        dist = model.encode(x, train=False)
        for s in range(spe):
            z = dist.mu if mean_mode else dist.mu + dist.sigma * eps[start:stop, s].astype(model.dtype)
            xhat = model.decode(z, c, train=False, strict=strict)
            out[np.arange(start, stop) * spe + s] = xhat[:, 0]
    if not np.all(np.isfinite(out)):
        raise NumericError("decoder produced non-finite values")

    c_text = " ".join(f"{v:g}" for v in c)
    label = name if name is not None else "soft"
    provenance = []
    for i in range(n):
        for s in range(spe):
            provenance.append({
                "epoch_index": i * spe + s,
                "subject": resting.subject_ids[i],
                "source_index": i,
                "sample": s,
                "condition": label,
                "c_vector": c_text,
                "seed": seed,
            })
    store = EpochStore(
        data=out,
        labels=[name] * (n * spe),
        subject_ids=[resting.subject_ids[i] for i in range(n) for _ in range(spe)],
        kinds=["artificial"] * (n * spe),
        sample_rate_hz=resting.sample_rate_hz,
        channels=resting.channels,
        extra={"condition": label, "c_vector": [float(v) for v in c], "seed": seed,
               "samples_per_epoch": spe, "mean_mode": bool(mean_mode)},
    )
    meta = {"seed": seed, "samples_per_epoch": spe, "mean_mode": bool(mean_mode),
            "n_sources": n, "strict": bool(strict)}
    return ArtificialEpochSet(store, provenance, name, np.asarray(c, dtype=np.float64), meta)


def generate_conditioned(req: GenerationRequest) -> ArtificialEpochSet:
    model = _model_of(req.checkpoint)
    _check_resting(model, req.resting)
    name, c = resolve_condition(req.condition, req.strict)
    eps = latent_noise(req.seed, len(req.resting), int(req.samples_per_epoch), model.latent_dim)
    return _generate(model, req.resting, name, c, eps, req.seed, req.strict, req.mean_mode, req.batch_size)


def generate_all_conditions(checkpoint, resting: EpochStore, seed: int = 0, samples_per_epoch: int = 1,
                            mean_mode: bool = False) -> dict:
    """One set per class, all decoded from the same latent samples."""
    model = _model_of(checkpoint)
    return {
        name: generate_conditioned(GenerationRequest(model, resting, name,
                                                     samples_per_epoch, seed, mean_mode=mean_mode))
        for name in CLASSES
    }


def write_provenance_csv(rows, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=PROVENANCE_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    return path


def save_artificial_set(aset: ArtificialEpochSet, directory) -> Path:
    """Write the store directory with ``provenance.csv`` inside it."""
    directory = Path(directory)
    save_store(aset.store, directory)
    write_provenance_csv(aset.provenance, directory / "provenance.csv")
    return directory
