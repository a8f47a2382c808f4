"""Conditional VAE toolkit for condition-specific synthetic EEG epochs.

Submodules: ``data`` (ingestion, epoching, stores), ``dsp`` (filters,
tapers, ERD/ERS maps), ``nn`` (layers and Adam), ``cvae`` (model, loss,
training), ``generate`` (resting-to-condition manipulation), ``synthbench``
(ground-truth synthetic data and separability scoring), ``cli``.
"""

__version__ = "0.1.0"

from . import _backend  # noqa: E402

backend = _backend.name
