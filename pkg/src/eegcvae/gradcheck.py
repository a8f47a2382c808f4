"""Finite-difference verification of every hand-written backward pass.

All checks run in float64 with frozen noise. Single layers are probed with a
random linear read-out of their output; the composed encoder and decoder the
same way; the full model through the training loss itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cvae import ConditionalVAE, loss_and_grads
from .nn import ELU, BatchNorm, Conv2D, Deconv2D, Dense, MeanPool, Upsample, grad_check

THRESHOLD = 1e-4
STEP = 1e-5
# The rounding noise of a central difference is about eps * S / h, where S is the
# sum of absolute terms making up the loss; coordinates whose gradient is within
# this factor of that noise are compared absolutely.
NOISE_MARGIN = 1e5


@dataclass
class CheckReport:
    name: str
    max_rel_error: float
    n_coords: int
    worst_target: str
    threshold: float = THRESHOLD

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.threshold)


def _noise_floor(magnitude: float, h: float) -> float:
    return max(1e-7, NOISE_MARGIN * np.finfo(np.float64).eps * abs(magnitude) / h)


def _summarize(name, results, threshold) -> CheckReport:
    worst = max(results, key=lambda r: r.max_rel_error)
    return CheckReport(name, worst.max_rel_error, sum(r.n_coords for r in results), worst.name, threshold)


def _flip(targets: dict, inject: str | None, prefix: str) -> dict:
    """Test hook: negate one analytic gradient so the checker must fail."""
    if inject is None:
        return targets
    out = {}
    for key, (arr, grad) in targets.items():
        hit = inject in (prefix, key, f"{prefix}.{key}")
        out[key] = (arr, -grad if hit else grad)
    return out


def check_layer(name: str, layer, x: np.ndarray, train=True, rng=None, inject=None,
                max_coords=200, h=STEP, threshold=THRESHOLD) -> CheckReport:
    """Input and parameter gradients of ``sum(R * layer(x))`` for a fixed random R."""
    rng = rng if rng is not None else np.random.default_rng(0)
    y = layer.forward(x, train)
    r = rng.standard_normal(y.shape)

    def loss():
        return float(np.sum(r * layer.forward(x, train)))

    value = float(np.sum(np.abs(r * y)))
    layer.zero_grad()
    dx = layer.backward(r)
    targets = {"input": (x, dx)}
    for p, arr in layer.params.items():
        targets[p] = (arr, layer.grads[p].copy())
    targets = _flip(targets, inject, name)
    res = grad_check(loss, targets, h=h, max_coords=max_coords, floor=_noise_floor(value, h), rng=rng)
    return _summarize(name, res, threshold)


def layer_suite(seed=0):
    """(name, layer, input, train) for every layer type and mode, small shapes, float64."""
    rng = np.random.default_rng(seed)
    f64 = np.float64

    def x(*shape):
        return rng.standard_normal(shape)

    bn_train = BatchNorm(3, dtype=f64)
    bn_train.update_stats = False
    bn_infer = BatchNorm(3, dtype=f64)
    bn_infer.running_mean = rng.standard_normal(3)
    bn_infer.running_var = rng.uniform(0.5, 2.0, 3)
    bn_infer.stats_ready = True
    bn_infer.params["gamma"] = rng.uniform(0.5, 1.5, 3)
    bn_infer.params["beta"] = rng.standard_normal(3)
    bn_train.params["gamma"] = rng.uniform(0.5, 1.5, 3)
    bn_train.params["beta"] = rng.standard_normal(3)
    return [
        ("conv2d_same", Conv2D(2, 3, (1, 6), "same", rng=rng, dtype=f64), x(3, 2, 4, 11), True),
        ("conv2d_valid", Conv2D(2, 3, (4, 1), "valid", rng=rng, dtype=f64), x(3, 2, 4, 9), True),
        ("deconv2d_same", Deconv2D(3, 2, (1, 6), "same", rng=rng, dtype=f64), x(3, 3, 1, 11), True),
        ("deconv2d_valid", Deconv2D(3, 2, (4, 1), "valid", rng=rng, dtype=f64), x(3, 3, 1, 9), True),
        ("batchnorm_train", bn_train, x(4, 3, 2, 5), True),
        ("batchnorm_inference", bn_infer, x(4, 3, 2, 5), False),
        ("elu", ELU(), x(3, 2, 3, 7), True),
        ("meanpool", MeanPool(2), x(3, 2, 1, 10), True),
        ("upsample", Upsample(2), x(3, 2, 1, 5), True),
        ("dense", Dense(7, 4, rng=rng, dtype=f64), x(5, 7), True),
    ]


def _model64(seed, n_channels, n_samples, latent_dim, n_kernels, temporal_kernel):
    model = ConditionalVAE(n_channels=n_channels, n_samples=n_samples, latent_dim=latent_dim,
                           n_kernels=n_kernels, temporal_kernel=temporal_kernel, seed=seed,
                           dtype=np.float64)
    model.encoder["enc_conv1"].input_grad = True
    model.set_bn_stat_updates(False)
    rng = np.random.default_rng(seed + 1)
    # move BN away from the identity initialisation so gamma/beta paths matter
    for bn in model.batchnorms().values():
        bn.params["gamma"][:] = rng.uniform(0.5, 1.5, bn.n_maps)
        bn.params["beta"][:] = 0.1 * rng.standard_normal(bn.n_maps)
    return model


def _param_targets(model, layers: dict) -> dict:
    out = {}
    for lname, layer in layers.items():
        for p, arr in layer.params.items():
            out[f"{lname}.{p}"] = (arr, layer.grads[p].copy())
    return out


def check_encoder(model, x, rng, inject=None, max_coords=40, h=STEP, threshold=THRESHOLD) -> CheckReport:
    mu0, lv0 = model.encode_scaled(x, True)
    r_mu, r_lv = rng.standard_normal(mu0.shape), rng.standard_normal(lv0.shape)

    def loss():
        mu, lv = model.encode_scaled(x, True)
        return float(np.sum(r_mu * mu) + np.sum(r_lv * lv))

    value = float(np.sum(np.abs(r_mu * mu0)) + np.sum(np.abs(r_lv * lv0)))
    for layer in model.layers().values():
        layer.zero_grad()
    dx = model.encode_backward(r_mu, r_lv)
    layers = {**model.encoder, **model.heads}
    targets = {"input": (x, dx), **_param_targets(model, layers)}
    targets = _flip(targets, inject, "encoder")
    res = grad_check(loss, targets, h=h, max_coords=max_coords, floor=_noise_floor(value, h), rng=rng)
    return _summarize("encoder", res, threshold)


def check_decoder(model, z, c, rng, inject=None, max_coords=40, h=STEP, threshold=THRESHOLD) -> CheckReport:
    xhat0 = model.decode_scaled(z, c, True)
    r = rng.standard_normal(xhat0.shape)

    def loss():
        return float(np.sum(r * model.decode_scaled(z, c, True)))

    value = float(np.sum(np.abs(r * xhat0)))
    for layer in model.layers().values():
        layer.zero_grad()
    dz = model.decode_backward(r)
    layers = {"dec_dense": model.dec_dense, **model.decoder}
    targets = {"z": (z, dz), **_param_targets(model, layers)}
    targets = _flip(targets, inject, "decoder")
    res = grad_check(loss, targets, h=h, max_coords=max_coords, floor=_noise_floor(value, h), rng=rng)
    return _summarize("decoder", res, threshold)


def check_full_loss(model, x, c, eps, rng, inject=None, max_coords=40, h=STEP,
                    threshold=THRESHOLD) -> CheckReport:
    def loss():
        return loss_and_grads(model, x, c, eps, train=True, backward=False).total

    value = loss_and_grads(model, x, c, eps, train=True).total
    targets = _param_targets(model, model.layers())
    targets = _flip(targets, inject, "full_loss")
    res = grad_check(loss, targets, h=h, max_coords=max_coords, floor=_noise_floor(value, h), rng=rng)
    return _summarize("full_loss", res, threshold)


def run_all(seed: int = 0, inject: str | None = None, batch: int = 3, n_channels: int = 15,
            n_samples: int = 400, latent_dim: int = 10, n_kernels: int = 5,
            temporal_kernel: int = 40) -> list[CheckReport]:
    """Every layer type, then encoder, decoder and full loss on the default architecture.

    ``inject`` names a check (e.g. ``"elu"``, ``"full_loss"``) or a parameter
    (``"dec_dense.weight"``) whose analytic gradient is negated; the matching
    report must then fail.
    """
    rng = np.random.default_rng(seed)
    reports = [check_layer(name, layer, x, train, rng, inject) for name, layer, x, train in layer_suite(seed)]
    model = _model64(seed, n_channels, n_samples, latent_dim, n_kernels, temporal_kernel)
    x = rng.standard_normal((batch, 1, n_channels, n_samples))
    c = np.eye(3)[np.arange(batch) % 3]
    z = rng.standard_normal((batch, latent_dim))
    eps = rng.standard_normal((batch, latent_dim))
    reports.append(check_encoder(model, x, rng, inject))
    reports.append(check_decoder(model, z, c, rng, inject))
    reports.append(check_full_loss(model, x, c, eps, rng, inject))
    return reports


def format_reports(reports) -> str:
    lines = [f"{'check':<22}{'max rel error':>14}{'coords':>8}  {'worst target':<22}result"]
    for r in reports:
        lines.append(f"{r.name:<22}{r.max_rel_error:>14.3e}{r.n_coords:>8}  {r.worst_target:<22}"
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
