"""Unpaired source->target image translation with discriminator-encoder reuse.

Each domain owns one encoder. The encoder is the feature extractor of that
domain's discriminator *and* the encoder of the generator that starts from
that domain, so ``s -> t`` is ``dec_s2t(enc_s(x))`` and the ``s`` critic is
``cls_s(enc_s(x))``. Encoders are optimized only in the discriminator phase;
the generator phase moves the decoders only.

Images enter and leave the public API on the [0, 255] intensity scale.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import numpy_to_state, read_archive, state_to_numpy, write_archive
from .data import Domain, Volume
from .errors import DivergenceError, ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GanConfig:
    steps: int = 800
    batch_size: int = 8
    lr_gen: float = 1e-3
    lr_disc: float = 1e-4
    lambda_adv: float = 1.0
    lambda_cycle: float = 10.0
    lambda_recon: float = 10.0
    rng_seed: int = 0
    base_width: int = 16
    n_down: int = 2

    def validate(self) -> None:
        problems = []
        if self.steps < 1:
            problems.append("steps must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not (self.lr_gen > 0 and self.lr_disc > 0):
            problems.append("learning rates must be positive")
        weights = (self.lambda_adv, self.lambda_cycle, self.lambda_recon)
        if any(w < 0 for w in weights) or not any(w > 0 for w in weights):
            problems.append("loss weights must be nonnegative with at least one positive")
        if self.n_down < 1 or self.base_width < 1:
            problems.append("n_down and base_width must be >= 1")
        if problems:
            raise ValidationError("; ".join(problems))


class Encoder(nn.Module):
    def __init__(self, base_width=16, n_down=2):
        super().__init__()
        layers, c_in = [], 1
        for i in range(n_down):
            c_out = base_width * 2**i
            layers += [
                nn.Conv2d(c_in, c_out, 4, stride=2, padding=1, padding_mode="reflect"),
                nn.LeakyReLU(0.2),
            ]
            c_in = c_out
        self.net = nn.Sequential(*layers)
        self.out_channels = c_in

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    """Mirror of the encoder: nearest-neighbour upsampling + 3x3 convs, tanh output."""

    def __init__(self, base_width=16, n_down=2):
        super().__init__()
        layers = []
        c_in = base_width * 2 ** (n_down - 1)
        for i in reversed(range(n_down)):
            c_out = base_width * 2 ** max(i - 1, 0)
            layers += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(c_in, c_out, 3, padding=1, padding_mode="reflect"),
                nn.LeakyReLU(0.2),
            ]
            c_in = c_out
        layers += [nn.Conv2d(c_in, 1, 3, padding=1, padding_mode="reflect"), nn.Tanh()]
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z)


class Classifier(nn.Module):
    """Critic head on encoder features: two conv blocks, then a global mean."""

    def __init__(self, in_channels):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, in_channels, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(in_channels, 1, 3, padding=1),
        )

    def forward(self, z):
        return self.net(z).mean(dim=(1, 2, 3))


def to_unit(x: torch.Tensor) -> torch.Tensor:
    return x / 127.5 - 1.0


def from_unit(x: torch.Tensor) -> torch.Tensor:
    return (x + 1.0) * 127.5


class TranslationModel(nn.Module):
    def __init__(self, base_width=16, n_down=2):
        super().__init__()
        self.arch = {"kind": "reuse-encoder-gan", "base_width": base_width, "n_down": n_down}
        self.enc_s = Encoder(base_width, n_down)
        self.enc_t = Encoder(base_width, n_down)
        self.dec_s2t = Decoder(base_width, n_down)
        self.dec_t2s = Decoder(base_width, n_down)
        self.cls_s = Classifier(self.enc_s.out_channels)
        self.cls_t = Classifier(self.enc_t.out_channels)
        self.train_log: list[dict] = []

    @property
    def stride(self) -> int:
        return 2 ** self.arch["n_down"]

    def encoder(self, domain) -> Encoder:
        return self.enc_s if Domain(domain) is Domain.SOURCE else self.enc_t

    def discriminate(self, x, domain):
        """Critic score of unit-scale images ``x`` (N,1,W,H) for ``domain``."""
        if Domain(domain) is Domain.SOURCE:
            return self.cls_s(self.enc_s(x))
        return self.cls_t(self.enc_t(x))

    def s2t(self, x):
        return self.dec_s2t(self.enc_s(x))

    def t2s(self, x):
        return self.dec_t2s(self.enc_t(x))

    def disc_parameters(self):
        for m in (self.enc_s, self.enc_t, self.cls_s, self.cls_t):
            yield from m.parameters()

    def gen_parameters(self):
        for m in (self.dec_s2t, self.dec_t2s):
            yield from m.parameters()


def _stack_pool(slices, name) -> np.ndarray:
    pool = [np.asarray(s, dtype=np.float32) for s in slices]
    if not pool:
        raise ValidationError(f"{name} slice pool is empty")
    shape = pool[0].shape
    if len(shape) != 2:
        raise ValidationError(f"{name} slices must be 2D, got shape {shape}")
    for s in pool:
        if s.shape != shape:
            raise ValidationError(f"{name} pool mixes slice shapes {shape} and {s.shape}")
    return np.stack(pool)[:, None]


def _check_divisible(shape, stride):
    if shape[0] % stride or shape[1] % stride:
        raise ValidationError(f"slice shape {tuple(shape)} must be divisible by {stride}")


def _lsgan(pred, target: float):
    return torch.mean((pred - target) ** 2)


def _set_requires_grad(params, flag):
    for p in params:
        p.requires_grad_(flag)


def discriminator_step(model: TranslationModel, opt_d, xs, xt, cfg: GanConfig) -> dict:
    """One update of encoders + critic heads (least-squares real/fake targets)."""
    _set_requires_grad(model.disc_parameters(), True)
    with torch.no_grad():
        fake_t = model.s2t(xs)
        fake_s = model.t2s(xt)
    d_t = _lsgan(model.discriminate(xt, Domain.TARGET), 1.0) + _lsgan(model.discriminate(fake_t, Domain.TARGET), 0.0)
    d_s = _lsgan(model.discriminate(xs, Domain.SOURCE), 1.0) + _lsgan(model.discriminate(fake_s, Domain.SOURCE), 0.0)
    loss = cfg.lambda_adv * (d_s + d_t)
    if not torch.isfinite(loss):
        raise DivergenceError("discriminator loss is non-finite", None)
    opt_d.zero_grad(set_to_none=True)
    if cfg.lambda_adv > 0:
        loss.backward()
        opt_d.step()
    return {"phase": "disc", "loss": loss.item(), "d_s": d_s.item(), "d_t": d_t.item()}


def generator_step(model: TranslationModel, opt_g, xs, xt, cfg: GanConfig) -> dict:
    """One update of the decoders: adversarial + cycle + same-domain reconstruction.

    Gradients flow through the (frozen) encoders but only decoder weights move.
    """
    _set_requires_grad(model.disc_parameters(), False)
    try:
        z_s, z_t = model.enc_s(xs), model.enc_t(xt)
        fake_t, fake_s = model.dec_s2t(z_s), model.dec_t2s(z_t)
        z_fake_t, z_fake_s = model.enc_t(fake_t), model.enc_s(fake_s)
        adv = _lsgan(model.cls_t(z_fake_t), 1.0) + _lsgan(model.cls_s(z_fake_s), 1.0)
        cycle = F.l1_loss(model.dec_t2s(z_fake_t), xs) + F.l1_loss(model.dec_s2t(z_fake_s), xt)
        recon = F.l1_loss(model.dec_t2s(z_s), xs) + F.l1_loss(model.dec_s2t(z_t), xt)
        loss = cfg.lambda_adv * adv + cfg.lambda_cycle * cycle + cfg.lambda_recon * recon
        if not torch.isfinite(loss):
            raise DivergenceError("generator loss is non-finite", None)
        opt_g.zero_grad(set_to_none=True)
        loss.backward()
        opt_g.step()
    finally:
        _set_requires_grad(model.disc_parameters(), True)
    return {"phase": "gen", "loss": loss.item(), "adv": adv.item(), "cycle": cycle.item(), "recon": recon.item()}


def make_optimizers(model: TranslationModel, cfg: GanConfig):
    opt_d = torch.optim.Adam(model.disc_parameters(), lr=cfg.lr_disc, betas=(0.5, 0.999))
    opt_g = torch.optim.Adam(model.gen_parameters(), lr=cfg.lr_gen, betas=(0.5, 0.999))
    return opt_d, opt_g


def train_translation(source_slices, target_slices, cfg: GanConfig = GanConfig()) -> TranslationModel:
    """Fit a translation model on two unpaired pools of [0, 255] slices.

    Each step runs one discriminator update then one generator update.
    """
    cfg.validate()
    xs_pool = _stack_pool(source_slices, "source")
    xt_pool = _stack_pool(target_slices, "target")
    stride = 2**cfg.n_down
    _check_divisible(xs_pool.shape[2:], stride)
    _check_divisible(xt_pool.shape[2:], stride)

    torch.manual_seed(cfg.rng_seed)
    rng = np.random.default_rng(cfg.rng_seed)
    model = TranslationModel(cfg.base_width, cfg.n_down)
    opt_d, opt_g = make_optimizers(model, cfg)
    xs_all = to_unit(torch.from_numpy(xs_pool))
    xt_all = to_unit(torch.from_numpy(xt_pool))

    model.train()
    for step in range(cfg.steps):
        xs = xs_all[rng.integers(0, len(xs_all), cfg.batch_size)]
        xt = xt_all[rng.integers(0, len(xt_all), cfg.batch_size)]
        try:
            rec_d = discriminator_step(model, opt_d, xs, xt, cfg)
            model.train_log.append({"step": step, **rec_d})
            rec_g = generator_step(model, opt_g, xs, xt, cfg)
            model.train_log.append({"step": step, **rec_g})
        except DivergenceError as exc:
            raise DivergenceError(f"{exc.args[0]} at step {step}", step) from None
        if step % 100 == 0:
            log.debug("step %d: d=%.4f g=%.4f cycle=%.4f", step, rec_d["loss"], rec_g["loss"], rec_g["cycle"])

    model.eval()
    return model


def translate_slice(m: TranslationModel, slice2d) -> np.ndarray:
    """Map one [0, 255] source slice into the target appearance."""
    a = np.asarray(slice2d, dtype=np.float32)
    if a.ndim != 2:
        raise ValidationError(f"expected a 2D slice, got shape {a.shape}")
    _check_divisible(a.shape, m.stride)
    return _translate_batch(m, a[None])[0]


def _translate_batch(m: TranslationModel, batch: np.ndarray) -> np.ndarray:
    m.eval()
    with torch.no_grad():
        x = to_unit(torch.from_numpy(np.ascontiguousarray(batch, dtype=np.float32))[:, None])
        y = from_unit(m.s2t(x))[:, 0]
    return y.numpy().astype(np.float32)


def translate_volume(m: TranslationModel, v: Volume) -> Volume:
    """Translate every transverse (z) slice independently and restack."""
    _check_divisible(v.shape[:2], m.stride)
    slices = [translate_slice(m, v.voxels[:, :, k]) for k in range(v.shape[2])]
    return v.replace(voxels=np.stack(slices, axis=2), domain=Domain.TARGET)


def save_translation(m: TranslationModel, path) -> Path:
    return write_archive(path, m.arch, state_to_numpy(m), {"train_log": m.train_log})


def load_translation(path) -> TranslationModel:
    arch, tensors, extra = read_archive(path)
    if arch.get("kind") != "reuse-encoder-gan":
        raise ValidationError(f"{path}: not a translation checkpoint")
    m = TranslationModel(arch["base_width"], arch["n_down"])
    numpy_to_state(m, tensors)
    m.train_log = list((extra or {}).get("train_log", []))
    m.eval()
    return m


def cycle_curve(m: TranslationModel) -> list[float]:
    return [r["cycle"] for r in m.train_log if r["phase"] == "gen"]
