"""Conditional VAE for 15 x 400 EEG epochs: model, loss, training, checkpoints."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import _backend, __version__
from .data import CLASSES, EpochStore, condition_vector, is_one_hot
from .errors import IntegrityError, NumericError, ShapeError
from .nn import ELU, Adam, BatchNorm, Conv2D, Deconv2D, Dense, MeanPool, Upsample

log = logging.getLogger(__name__)

REFERENCE_PARAMETER_COUNT = 34214
CHECKPOINT_MAGIC = b"EEGCVAE-CHECKPOINT\n"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 50
    max_epochs: int = 100
    patience: int = 10
    latent_dim: int = 10
    n_kernels: int = 5
    temporal_kernel: int = 40
    pool: int = 2
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    bn_eps: float = 1e-3
    bn_momentum: float = 0.99
    seed: int = 0
    val_passes: int = 4
    loss_weighting: str = "sum"
    standardize: bool = True
    decoder_dense_bias: bool = True
    output_bn_elu: bool = False

    def __post_init__(self):
        for name in ("batch_size", "max_epochs", "patience", "latent_dim", "n_kernels",
                     "temporal_kernel", "pool", "val_passes"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.loss_weighting not in ("sum", "mean"):
            raise ValueError("loss_weighting must be 'sum' or 'mean'")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for k, v in d.items():
            if k not in known:
                continue
            default = getattr(cls(), k)
            if isinstance(default, bool):
                v = v if isinstance(v, bool) else str(v).strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                v = int(v)
            elif isinstance(default, float):
                v = float(v)
            kwargs[k] = v
        return cls(**kwargs)


@dataclass
class LatentDistribution:
    mu: np.ndarray
    log_var: np.ndarray

    @property
    def sigma(self):
        return np.exp(self.log_var / 2)


@dataclass
class LossParts:
    total: float
    recon: float
    kl: float


class ConditionalVAE:
    """Encoder/decoder pair with the layer stack below.

    encoder: (B,1,C,T) -> conv (1,k) same + BN + ELU -> conv (C,1) valid + BN + ELU
             -> mean-pool (1,2) -> flatten -> two dense heads (mu, log-variance)
    decoder: [z, c] -> dense -> reshape (K,1,T/2) -> upsample (1,2)
             -> deconv (C,1) + BN + ELU -> deconv (1,k) [+ BN + ELU if output_bn_elu]

    Inputs are divided by ``input_scale`` before encoding and decoder outputs
    multiplied by it; the loss is computed on the scaled data.
    """

    def __init__(self, n_channels=15, n_samples=400, latent_dim=10, n_kernels=5, n_classes=3,
                 temporal_kernel=40, pool=2, decoder_dense_bias=True, output_bn_elu=False,
                 bn_eps=1e-3, bn_momentum=0.99, seed=0, dtype=np.float32):
        if n_samples % pool:
            raise ValueError("n_samples must be divisible by the pooling factor")
        self.n_channels, self.n_samples = n_channels, n_samples
        self.latent_dim, self.n_kernels, self.n_classes = latent_dim, n_kernels, n_classes
        self.temporal_kernel, self.pool = temporal_kernel, pool
        self.decoder_dense_bias, self.output_bn_elu = decoder_dense_bias, output_bn_elu
        self.input_scale = 1.0
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        k, flat = n_kernels, n_kernels * n_samples // pool
        bn = dict(eps=bn_eps, momentum=bn_momentum, dtype=dtype)
        self.encoder = {
            "enc_conv1": Conv2D(1, k, (1, temporal_kernel), "same", rng=rng, dtype=dtype),
            "enc_bn1": BatchNorm(k, **bn),
            "enc_elu1": ELU(),
            "enc_conv2": Conv2D(k, k, (n_channels, 1), "valid", rng=rng, dtype=dtype),
            "enc_bn2": BatchNorm(k, **bn),
            "enc_elu2": ELU(),
            "enc_pool": MeanPool(pool),
        }
        self.heads = {
            "enc_mu": Dense(flat, latent_dim, rng=rng, dtype=dtype),
            "enc_logvar": Dense(flat, latent_dim, rng=rng, dtype=dtype),
        }
        self.dec_dense = Dense(latent_dim + n_classes, flat, bias=decoder_dense_bias, rng=rng, dtype=dtype)
        self.decoder = {
            "dec_up": Upsample(pool),
            "dec_deconv1": Deconv2D(k, k, (n_channels, 1), "valid", rng=rng, dtype=dtype),
            "dec_bn1": BatchNorm(k, **bn),
            "dec_elu1": ELU(),
            "dec_deconv2": Deconv2D(k, 1, (1, temporal_kernel), "same", rng=rng, dtype=dtype),
        }
        if output_bn_elu:
            self.decoder["dec_bn2"] = BatchNorm(1, **bn)
            self.decoder["dec_elu2"] = ELU()
        # training never consumes d(loss)/d(input); gradient checks switch it back on
        self.encoder["enc_conv1"].input_grad = False
        for layer in self.batchnorms().values():
            layer.reset_running_stats()

    # -- bookkeeping

    def layers(self) -> dict:
        out = dict(self.encoder)
        out.update(self.heads)
        out["dec_dense"] = self.dec_dense
        out.update(self.decoder)
        return out

    def batchnorms(self) -> dict:
        return {n: l for n, l in self.layers().items() if isinstance(l, BatchNorm)}

    def parameters(self) -> dict:
        return {f"{n}.{p}": arr for n, l in self.layers().items() for p, arr in l.params.items()}

    def gradients(self) -> dict:
        return {f"{n}.{p}": l.grads[p] for n, l in self.layers().items() for p in l.params}

    def buffers(self) -> dict:
        out = {}
        for n, l in self.batchnorms().items():
            out[f"{n}.running_mean"] = l.running_mean
            out[f"{n}.running_var"] = l.running_var
        return out

    def set_buffers(self, values: dict):
        for n, l in self.batchnorms().items():
            l.running_mean = np.array(values[f"{n}.running_mean"], dtype=self.dtype)
            l.running_var = np.array(values[f"{n}.running_var"], dtype=self.dtype)
            l.stats_ready = True

    def set_parameters(self, values: dict):
        for n, l in self.layers().items():
            for p in l.params:
                src = np.asarray(values[f"{n}.{p}"])
                if src.shape != l.params[p].shape:
                    raise ShapeError(f"{n}.{p}: expected {l.params[p].shape}, got {src.shape}")
                l.params[p] = np.array(src, dtype=self.dtype)

    def init_kwargs(self) -> dict:
        return dict(n_channels=self.n_channels, n_samples=self.n_samples, latent_dim=self.latent_dim,
                    n_kernels=self.n_kernels, n_classes=self.n_classes, temporal_kernel=self.temporal_kernel,
                    pool=self.pool, decoder_dense_bias=self.decoder_dense_bias,
                    output_bn_elu=self.output_bn_elu)

    def astype(self, dtype) -> ConditionalVAE:
        """Deep copy with every parameter and buffer cast to ``dtype``."""
        other = copy.deepcopy(self)
        other.dtype = np.dtype(dtype)
        for layer in other.layers().values():
            layer.astype(dtype)
        return other

    def set_bn_stat_updates(self, enabled: bool):
        for l in self.batchnorms().values():
            l.update_stats = enabled

    # -- forward / backward in scaled units

    def _check_x(self, x):
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[:, None]
        if x.ndim != 4 or x.shape[1:] != (1, self.n_channels, self.n_samples):
            raise ShapeError(f"expected (batch, 1, {self.n_channels}, {self.n_samples}), got {x.shape}")
        return x.astype(self.dtype, copy=False)

    def encode_scaled(self, x, train=False):
        h = self._check_x(x)
        for layer in self.encoder.values():
            h = layer.forward(h, train)
        flat = h.reshape(h.shape[0], -1)
        return self.heads["enc_mu"].forward(flat, train), self.heads["enc_logvar"].forward(flat, train)

    def encode_backward(self, dmu, dlogvar):
        dflat = self.heads["enc_mu"].backward(dmu) + self.heads["enc_logvar"].backward(dlogvar)
        dh = dflat.reshape(-1, self.n_kernels, 1, self.n_samples // self.pool)
        for layer in reversed(list(self.encoder.values())):
            dh = layer.backward(dh)
            if dh is None:
                break
        return dh

    def decode_scaled(self, z, c, train=False):
        z = np.asarray(z, dtype=self.dtype)
        c = np.asarray(c, dtype=self.dtype)
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ShapeError(f"z must be (batch, {self.latent_dim}), got {z.shape}")
        if c.shape != (z.shape[0], self.n_classes):
            raise ShapeError(f"c must be (batch, {self.n_classes}), got {c.shape}")
        zc = np.concatenate([z, c], axis=1)
        h = self.dec_dense.forward(zc, train)
        h = h.reshape(-1, self.n_kernels, 1, self.n_samples // self.pool)
        for layer in self.decoder.values():
            h = layer.forward(h, train)
        return h

    def decode_backward(self, dxhat):
        dh = dxhat
        for layer in reversed(list(self.decoder.values())):
            dh = layer.backward(dh)
        dzc = self.dec_dense.backward(dh.reshape(dh.shape[0], -1))
        return dzc[:, : self.latent_dim]

    # -- public API in physical units

    def encode(self, x, train=False) -> LatentDistribution:
        x = np.asarray(x)
        mu, lv = self.encode_scaled(x / self.dtype.type(self.input_scale), train)
        return LatentDistribution(mu, lv)

    def decode(self, z, c, train=False, strict=True):
        c = np.atleast_2d(np.asarray(c, dtype=np.float64))
        z = np.atleast_2d(z)
        if c.shape[0] == 1 and z.shape[0] > 1:
            c = np.repeat(c, z.shape[0], axis=0)
        if strict and not all(is_one_hot(row) for row in c):
            raise ValueError("condition vectors must be one-hot (pass strict=False for soft conditions)")
        if not np.all(np.isfinite(c)):
            raise ValueError("condition vectors must be finite")
        return self.decode_scaled(z, c, train) * self.dtype.type(self.input_scale)

    def trace_shapes(self, batch=1) -> list:
        """Per-layer output shapes (without batch axis) for one forward pass in inference mode."""
        rows = [("input", (1, self.n_channels, self.n_samples))]
        h = np.zeros((batch, 1, self.n_channels, self.n_samples), dtype=self.dtype)
        for name, layer in self.encoder.items():
            h = layer.forward(h, train=False)
            rows.append((name, h.shape[1:]))
        flat = h.reshape(batch, -1)
        rows.append(("flatten", flat.shape[1:]))
        mu = self.heads["enc_mu"].forward(flat, False)
        lv = self.heads["enc_logvar"].forward(flat, False)
        rows.append(("enc_mu", mu.shape[1:]))
        rows.append(("enc_logvar", lv.shape[1:]))
        c = np.zeros((batch, self.n_classes), dtype=self.dtype)
        c[:, 0] = 1
        zc = np.concatenate([mu, c], axis=1)
        rows.append(("concat_zc", zc.shape[1:]))
        h = self.dec_dense.forward(zc, False)
        rows.append(("dec_dense", h.shape[1:]))
        h = h.reshape(batch, self.n_kernels, 1, self.n_samples // self.pool)
        rows.append(("reshape", h.shape[1:]))
        for name, layer in self.decoder.items():
            h = layer.forward(h, train=False)
            rows.append((name, h.shape[1:]))
        return rows

    def count_parameters(self) -> ParameterCount:
        return count_parameters(self)


# ---------------------------------------------------------------- parameter count


@dataclass
class ParameterCount:
    rows: list
    trainable: int
    non_trainable: int
    conventions: list = field(default_factory=list)
    alternatives: list = field(default_factory=list)

    @property
    def delta(self) -> int:
        return self.trainable - REFERENCE_PARAMETER_COUNT

    def closest_alternative(self):
        return self.alternatives[0] if self.alternatives else None

    def table(self, n_alternatives=5) -> str:
        out = [f"{'layer':<16}{'param':<10}{'shape':<18}{'count':>8}"]
        for layer, param, shape, n in self.rows:
            out.append(f"{layer:<16}{param:<10}{str(shape):<18}{n:>8}")
        out.append(f"{'trainable total':<44}{self.trainable:>8}")
        out.append(f"{'non-trainable (BN running stats)':<44}{self.non_trainable:>8}")
        out.append(f"{'reference total':<44}{REFERENCE_PARAMETER_COUNT:>8}")
        pct = 100.0 * self.delta / REFERENCE_PARAMETER_COUNT
        out.append(f"{'delta':<44}{self.delta:>+8} ({pct:+.2f}%)")
        if self.conventions:
            out.append("itemized by convention:")
            for name, n in self.conventions:
                out.append(f"  {name:<58}{n:>8}")
        if self.alternatives:
            out.append("closest alternative conventions:")
            for desc, total, d in self.alternatives[:n_alternatives]:
                out.append(f"  {desc:<58}{total:>8} ({d:+d})")
        return "\n".join(out)


def count_parameters(model: ConditionalVAE) -> ParameterCount:
    """Itemized trainable-scalar count plus the totals other bias/BN conventions would give.

    The alternatives are every on/off combination of: decoder dense bias,
    convolution biases, BN scale/shift, a BN on the output layer, and counting
    BN running statistics as parameters. They are sorted by distance to the
    reference total.
    """
    rows = []
    for name, layer in model.layers().items():
        for p, arr in layer.params.items():
            rows.append((name, p, tuple(arr.shape), int(arr.size)))
    trainable = sum(r[3] for r in rows)
    non_trainable = sum(int(b.size) for b in model.buffers().values())

    def size(layer, p):
        arr = model.layers()[layer].params.get(p) if layer in model.layers() else None
        return 0 if arr is None else int(arr.size)

    conv_biases = sum(size(n, "bias") for n in ("enc_conv1", "enc_conv2", "dec_deconv1", "dec_deconv2"))
    out_bn = size("dec_bn2", "gamma") + size("dec_bn2", "beta")
    bn_affine = sum(l.params["gamma"].size + l.params["beta"].size
                    for l in model.batchnorms().values()) - out_bn
    dense_bias = size("dec_dense", "bias")
    core = trainable - dense_bias - conv_biases - bn_affine - out_bn
    conventions = [
        ("decoder dense bias", dense_bias),
        ("convolution / deconvolution biases", conv_biases),
        ("hidden batch-norm scale and shift", bn_affine),
        ("output batch-norm scale and shift", out_bn),
        ("kernels, dense weights, head biases", core),
    ]

    # sizes each toggle would contribute, independent of how this model was built
    full_dense_bias = model.n_kernels * model.n_samples // model.pool
    full_conv_bias = 3 * model.n_kernels + 1
    hidden_bn = 3 * 2 * model.n_kernels
    alternatives = []
    for db in (False, True):
        for cb in (False, True):
            for aff in (False, True):
                for obn in (False, True):
                    for stats in (False, True):
                        total = core + db * full_dense_bias + cb * full_conv_bias
                        total += aff * (hidden_bn + 2 * obn)
                        total += stats * (hidden_bn + 2 * obn)
                        desc = ", ".join(label for on, label in (
                            (db, "dense bias"), (cb, "conv bias"), (aff, "BN affine"),
                            (obn, "output BN"), (stats, "BN stats counted")) if on) or "weights only"
                        alternatives.append((desc, total, total - REFERENCE_PARAMETER_COUNT))
    alternatives.sort(key=lambda a: (abs(a[2]), a[0]))
    return ParameterCount(rows, trainable, non_trainable, conventions, alternatives)


# ---------------------------------------------------------------- loss


def kl_term(mu, log_var) -> float:
    """KL(N(mu, exp(log_var)) || N(0, I)), summed over latent dims, averaged over the batch."""
    mu = np.asarray(mu, dtype=np.float64)
    lv = np.asarray(log_var, dtype=np.float64)
    per = 0.5 * np.sum(mu**2 + np.exp(lv) - lv - 1.0, axis=-1)
    return float(np.mean(per))


def recon_term(x, xhat, weighting="sum") -> float:
    """Squared reconstruction error per trial averaged over the batch.

    weighting="sum": summed over the elements of each trial (6000 for 15x400);
    weighting="mean": averaged over them.
    """
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {xhat.shape}")
    sq = (xhat - x).reshape(x.shape[0], -1) ** 2
    per = sq.sum(axis=1) if weighting == "sum" else sq.mean(axis=1)
    return float(per.mean())


def reparameterize(mu, log_var, eps=None, rng=None):
    """z = mu + exp(log_var / 2) * eps with eps ~ N(0, I)."""
    mu = np.asarray(mu)
    if eps is None:
        rng = rng if rng is not None else np.random.default_rng()
        eps = rng.standard_normal(mu.shape)
    eps = np.asarray(eps, dtype=mu.dtype)
    return mu + np.exp(np.asarray(log_var) / 2).astype(mu.dtype) * eps


def loss_and_grads(model: ConditionalVAE, x_scaled, c, eps, train=True, weighting="sum",
                   backward=True) -> LossParts:
    """Negated ELBO on scaled inputs; fills every layer's ``grads`` when ``backward``."""
    x = model._check_x(x_scaled)
    b = x.shape[0]
    mu, lv = model.encode_scaled(x, train)
    z = reparameterize(mu, lv, eps)
    xhat = model.decode_scaled(z, c, train)
    recon = recon_term(x, xhat, weighting)
    kl = kl_term(mu, lv)
    parts = LossParts(recon + kl, recon, kl)
    if not backward:
        return parts
    dt = model.dtype.type
    per_elem = x[0].size
    scale = 2.0 / b if weighting == "sum" else 2.0 / (b * per_elem)
    dxhat = (dt(scale) * (xhat - x)).astype(model.dtype)
    dz = model.decode_backward(dxhat)
    sigma = np.exp(lv / 2)
    dmu = dz + mu / dt(b)
    dlv = dz * np.asarray(eps, dtype=model.dtype) * sigma / dt(2) + (np.exp(lv) - 1) / dt(2 * b)
    model.encode_backward(dmu.astype(model.dtype), dlv.astype(model.dtype))
    return parts


def loss(model: ConditionalVAE, x, c, rng, weighting="sum", train=False) -> LossParts:
    """Loss on physical-unit epochs ``x`` with one-hot conditions ``c``."""
    x = model._check_x(np.asarray(x) / model.input_scale)
    eps = rng.standard_normal((x.shape[0], model.latent_dim))
    return loss_and_grads(model, x, c, eps, train=train, weighting=weighting, backward=False)


# ---------------------------------------------------------------- training


@dataclass
class CvaeCheckpoint:
    model: ConditionalVAE
    config: TrainConfig
    optimizer: Adam = field(default_factory=Adam)
    history: list = field(default_factory=list)
    best_epoch: int = 0
    meta: dict = field(default_factory=dict)


def _store_arrays(store: EpochStore, scale: float, dtype):
    x = (store.data[:, None] / np.float32(scale)).astype(dtype)
    c = np.stack([condition_vector(lab) for lab in store.labels]).astype(dtype)
    return x, c


def evaluate(model: ConditionalVAE, x, c, rng_seed, passes=4, weighting="sum", batch=100) -> LossParts:
    """Inference-mode loss averaged over ``passes`` noise draws (seeded, so repeatable)."""
    rng = np.random.default_rng(rng_seed)
    tot = rec = kl = 0.0
    n = x.shape[0]
    for _ in range(passes):
        for i in range(0, n, batch):
            xb, cb = x[i:i + batch], c[i:i + batch]
            eps = rng.standard_normal((xb.shape[0], model.latent_dim)).astype(model.dtype)
            p = loss_and_grads(model, xb, cb, eps, train=False, weighting=weighting, backward=False)
            w = xb.shape[0] / (n * passes)
            tot += p.total * w
            rec += p.recon * w
            kl += p.kl * w
    return LossParts(tot, rec, kl)


def _param_norms(model):
    return {k: float(np.linalg.norm(v)) for k, v in model.parameters().items()}


def train(train_store: EpochStore, val_store: EpochStore, cfg: TrainConfig | None = None,
          log_path=None, progress=None) -> CvaeCheckpoint:
    """Mini-batch Adam on the negated ELBO with validation-loss early stopping.

    The returned checkpoint holds the parameters (and batch-norm statistics)
    from the epoch with the lowest validation loss.
    """
    cfg = cfg or TrainConfig()
    for store, what in ((train_store, "train"), (val_store, "validation")):
        if any(lab is None for lab in store.labels):
            raise ValueError(f"{what} store has unlabeled epochs")
        if len(store) == 0:
            raise ValueError(f"{what} store is empty")
    n_ch, n_t = train_store.data.shape[1:]
    ss = np.random.SeedSequence(cfg.seed)
    init_seq, shuffle_seq, eps_seq, val_seq = ss.spawn(4)
    model = ConditionalVAE(n_channels=n_ch, n_samples=n_t, latent_dim=cfg.latent_dim, n_kernels=cfg.n_kernels,
                           n_classes=len(CLASSES), temporal_kernel=cfg.temporal_kernel, pool=cfg.pool,
                           decoder_dense_bias=cfg.decoder_dense_bias, output_bn_elu=cfg.output_bn_elu,
                           bn_eps=cfg.bn_eps, bn_momentum=cfg.bn_momentum,
                           seed=int(init_seq.generate_state(1)[0]))
    if cfg.standardize:
        model.input_scale = float(np.std(train_store.data.astype(np.float64))) or 1.0
    xt, ct = _store_arrays(train_store, model.input_scale, model.dtype)
    xv, cv = _store_arrays(val_store, model.input_scale, model.dtype)
    val_seed = int(val_seq.generate_state(1)[0])
    shuffle_rng = np.random.default_rng(shuffle_seq)
    eps_rng = np.random.default_rng(eps_seq)
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)

    history = []
    t_start = time.perf_counter()
    v0 = evaluate(model, xv, cv, val_seed, cfg.val_passes, cfg.loss_weighting)
    history.append(dict(epoch=0, train_total=math.nan, train_recon=math.nan, train_kl=math.nan,
                        val_total=v0.total, val_recon=v0.recon, val_kl=v0.kl,
                        wall_s=time.perf_counter() - t_start))
    best = (v0.total, 0, copy.deepcopy(model.parameters()), copy.deepcopy(model.buffers()))
    wait = 0
    n = xt.shape[0]
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        sums = np.zeros(3)
        seen = 0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            if idx.size < 2:
                continue
            eps = eps_rng.standard_normal((idx.size, model.latent_dim)).astype(model.dtype)
            parts = loss_and_grads(model, xt[idx], ct[idx], eps, train=True, weighting=cfg.loss_weighting)
            if not math.isfinite(parts.total):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {bi}; "
                                   f"parameter norms {_param_norms(model)}")
            opt.step(model.parameters(), model.gradients())
            sums += np.array([parts.total, parts.recon, parts.kl]) * idx.size
            seen += idx.size
        tr = sums / max(seen, 1)
        v = evaluate(model, xv, cv, val_seed, cfg.val_passes, cfg.loss_weighting)
        row = dict(epoch=epoch, train_total=tr[0], train_recon=tr[1], train_kl=tr[2],
                   val_total=v.total, val_recon=v.recon, val_kl=v.kl, wall_s=time.perf_counter() - t_start)
        history.append(row)
        if progress is not None:
            progress(row)
        log.info("epoch %d train %.3f val %.3f", epoch, tr[0], v.total)
        if not math.isfinite(v.total):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        if v.total < best[0]:
            best = (v.total, epoch, copy.deepcopy(model.parameters()), copy.deepcopy(model.buffers()))
            wait = 0
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    model.set_parameters(best[2])
    model.set_buffers(best[3])
    ckpt = CvaeCheckpoint(
        model=model, config=cfg, optimizer=opt, history=history, best_epoch=best[1],
        meta=dict(package_version=__version__, backend=_backend.name(), n_train=len(train_store),
                  n_val=len(val_store), input_scale=model.input_scale, channels=list(train_store.channels),
                  sample_rate_hz=train_store.sample_rate_hz, best_val_total=best[0],
                  initial_val_total=v0.total),
    )
    if log_path is not None:
        write_history_csv(history, log_path)
    return ckpt


HISTORY_COLUMNS = ("epoch", "train_total", "train_recon", "train_kl", "val_total", "val_recon", "val_kl", "wall_s")


def write_history_csv(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_COLUMNS[1:]])


# ---------------------------------------------------------------- checkpoints


def _blocks(ckpt: CvaeCheckpoint):
    model = ckpt.model
    out = [("param", k, v) for k, v in model.parameters().items()]
    out += [("buffer", k, v) for k, v in model.buffers().items()]
    for k in model.parameters():
        if k in ckpt.optimizer.m:
            out.append(("adam_m", k, ckpt.optimizer.m[k]))
            out.append(("adam_v", k, ckpt.optimizer.v[k]))
    return out


def _jsonable(x):
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return _jsonable(x.item())
    return x


def _unjson_float(x):
    return float(x) if isinstance(x, str) else x


def save_checkpoint(ckpt: CvaeCheckpoint, path) -> Path:
    """Structured-text header followed by little-endian float32 blocks in layer order."""
    path = Path(path)
    payload = io.BytesIO()
    entries = []
    for kind, name, arr in _blocks(ckpt):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append(dict(kind=kind, name=name, shape=list(arr.shape), offset=payload.tell(), nbytes=len(raw)))
        payload.write(raw)
    blob = payload.getvalue()
    header = dict(
        format="eegcvae-checkpoint", version=CHECKPOINT_VERSION, model=ckpt.model.init_kwargs(),
        input_scale=ckpt.model.input_scale, config=asdict(ckpt.config),
        optimizer=dict(lr=ckpt.optimizer.lr, beta1=ckpt.optimizer.beta1, beta2=ckpt.optimizer.beta2,
                       eps=ckpt.optimizer.eps, t=ckpt.optimizer.t),
        bn=[dict(name=n, eps=l.eps, momentum=l.momentum) for n, l in ckpt.model.batchnorms().items()],
        history=ckpt.history, best_epoch=ckpt.best_epoch, meta=ckpt.meta, blocks=entries,
        payload_bytes=len(blob), payload_sha256=hashlib.sha256(blob).hexdigest(),
    )
    head = json.dumps(_jsonable(header), indent=1, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(f"HEADER {len(head)}\n".encode("ascii"))
        fh.write(head)
        fh.write(b"\n")
        fh.write(blob)
    return path


def load_checkpoint(path) -> CvaeCheckpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise IntegrityError("not a checkpoint file (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    nl = raw.find(b"\n", pos)
    try:
        tag, size = raw[pos:nl].decode("ascii").split()
        size = int(size)
        assert tag == "HEADER"
    except Exception as exc:  # noqa: BLE001
        raise IntegrityError("malformed checkpoint header line") from exc
    start = nl + 1
    if len(raw) < start + size + 1:
        raise IntegrityError("checkpoint truncated inside the header")
    try:
        header = json.loads(raw[start:start + size].decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"unreadable checkpoint header: {exc}") from exc
    if header.get("format") != "eegcvae-checkpoint" or header.get("version") != CHECKPOINT_VERSION:
        raise IntegrityError(f"unsupported checkpoint version {header.get('version')!r}")
    blob = raw[start + size + 1:]
    if len(blob) != header["payload_bytes"]:
        raise IntegrityError(f"checkpoint payload is {len(blob)} bytes, header declares {header['payload_bytes']}")
    if hashlib.sha256(blob).hexdigest() != header["payload_sha256"]:
        raise IntegrityError("checkpoint payload checksum mismatch")

    cfg = TrainConfig(**header["config"])
    model = ConditionalVAE(**header["model"], bn_eps=cfg.bn_eps, bn_momentum=cfg.bn_momentum)
    model.input_scale = float(header["input_scale"])
    params, buffers, m, v = {}, {}, {}, {}
    target = {"param": params, "buffer": buffers, "adam_m": m, "adam_v": v}
    for e in header["blocks"]:
        arr = np.frombuffer(blob, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"])
        target[e["kind"]][e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    expected = set(model.parameters())
    if set(params) != expected:
        raise IntegrityError(f"checkpoint parameters {sorted(set(params) ^ expected)} do not match the model")
    model.set_parameters(params)
    model.set_buffers(buffers)
    o = header["optimizer"]
    opt = Adam(o["lr"], o["beta1"], o["beta2"], o["eps"], o["t"], m, v)
    history = [{k: _unjson_float(val) for k, val in row.items()} for row in header["history"]]
    return CvaeCheckpoint(model, cfg, opt, history, header["best_epoch"], header["meta"])
