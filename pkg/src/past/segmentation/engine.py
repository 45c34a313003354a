"""Training and sliding-window inference for the volumetric segmenters."""

from __future__ import annotations

import copy
import csv
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..checkpoint import numpy_to_state, read_archive, state_to_numpy, write_archive
from ..data import N_CLASSES, LabelMap, Volume
from ..errors import DivergenceError, ValidationError
from .losses import dice_ce_loss
from .networks import build_network

log = logging.getLogger(__name__)

ARCHS = ("unet", "resunet")


@dataclass(frozen=True)
class SegTrainConfig:
    epochs: int = 30
    batch_size: int = 2
    patch_size: tuple[int, int, int] = (32, 24, 8)
    lr: float = 0.08
    momentum: float = 0.9
    w_dice: float = 1.0
    w_ce: float = 1.0
    rng_seed: int = 0
    ignore_masking: bool = False
    arch: str = "unet"
    base_width: int = 8
    levels: int = 3
    iterations_per_epoch: int | None = None

    def validate(self) -> None:
        problems = []
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not self.lr > 0:
            problems.append("lr must be positive")
        if self.arch not in ARCHS:
            problems.append(f"arch must be one of {ARCHS}")
        if len(self.patch_size) != 3 or any(p < 1 for p in self.patch_size):
            problems.append("patch_size must hold 3 positive integers")
        else:
            mult = 2 ** (self.levels - 1)
            if any(p % mult for p in self.patch_size):
                problems.append(f"patch_size {tuple(self.patch_size)} must be divisible by {mult}")
        if self.w_dice < 0 or self.w_ce < 0 or self.w_dice + self.w_ce == 0:
            problems.append("loss weights must be nonnegative and not both zero")
        if problems:
            raise ValidationError("; ".join(problems))

    def arch_descriptor(self) -> dict:
        return {
            "kind": self.arch,
            "n_classes": N_CLASSES,
            "base_width": self.base_width,
            "levels": self.levels,
            "patch_size": list(self.patch_size),
        }


@dataclass
class SegModel:
    net: torch.nn.Module
    arch: dict
    train_log: list[dict] = field(default_factory=list)

    @classmethod
    def create(cls, arch: dict, seed: int = 0) -> "SegModel":
        torch.manual_seed(seed)
        return cls(build_network(arch), dict(arch))

    @property
    def n_classes(self) -> int:
        return self.arch["n_classes"]

    @property
    def patch_size(self) -> tuple[int, int, int]:
        return tuple(self.arch["patch_size"])

    def clone(self) -> "SegModel":
        return SegModel(copy.deepcopy(self.net), dict(self.arch), list(self.train_log))

    def state(self) -> dict[str, np.ndarray]:
        return state_to_numpy(self.net)

    def same_parameters(self, other: "SegModel") -> bool:
        a, b = self.state(), other.state()
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)

    def segment(self, v: Volume) -> LabelMap:
        return argmax_labels(predict(self, v))


@dataclass(frozen=True, eq=False)
class ProbMap:
    probs: np.ndarray  # (n_classes, W, H, D)

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float32)
        if p.ndim != 4:
            raise ValidationError(f"probability map must be 4D, got shape {p.shape}")
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.probs.shape[1:]

    @classmethod
    def one_hot(cls, labels: LabelMap, n_classes: int = N_CLASSES) -> "ProbMap":
        eye = np.eye(n_classes, dtype=np.float32)
        return cls(np.moveaxis(eye[labels.labels], -1, 0))


def argmax_labels(p: ProbMap) -> LabelMap:
    """Hard labels; ties resolve to the lower class index."""
    return LabelMap(np.argmax(p.probs, axis=0).astype(np.uint8))


def standardize(voxels: np.ndarray) -> np.ndarray:
    x = voxels.astype(np.float32)
    return (x - x.mean()) / max(float(x.std()), 1e-6)


def _unpack_labels(lab):
    """Return (labels array, ignore mask or None) for LabelMap or PseudoLabel."""
    ignore = getattr(lab, "ignore", None)
    return np.asarray(lab.labels), (None if ignore is None else np.asarray(ignore, dtype=bool))


def _poly_lr(base_lr, epoch, epochs, exponent=0.9):
    return base_lr * (1.0 - epoch / epochs) ** exponent


def train_segmentation(cases, cfg: SegTrainConfig = SegTrainConfig(), init: SegModel | None = None) -> SegModel:
    """Train (or continue training) a segmenter with Dice + cross-entropy.

    ``cases`` pairs preprocessed volumes with LabelMaps or PseudoLabels. When
    ``init`` is given the returned model starts from a copy of its weights.
    """
    cfg.validate()
    cases = list(cases)
    if not cases:
        raise ValidationError("train_segmentation needs at least one case")
    patch = tuple(cfg.patch_size)
    arrays = []
    for vol, lab in cases:
        labels, ignore = _unpack_labels(lab)
        if labels.shape != vol.shape:
            raise ValidationError(f"case {vol.case_id}: label shape {labels.shape} != {vol.shape}")
        if any(s < p for s, p in zip(vol.shape, patch)):
            raise ValidationError(f"case {vol.case_id}: shape {vol.shape} smaller than patch {patch}")
        if ignore is not None and not cfg.ignore_masking:
            raise ValidationError("pseudo-labels given but cfg.ignore_masking is false")
        keep = None if ignore is None else ~ignore
        arrays.append((standardize(vol.voxels), labels.astype(np.int64), keep))

    if init is not None:
        model = init.clone()
        model.arch["patch_size"] = list(patch)
    else:
        model = SegModel.create(cfg.arch_descriptor(), cfg.rng_seed)
    if cfg.epochs == 0:
        return model

    torch.manual_seed(cfg.rng_seed)
    rng = np.random.default_rng(cfg.rng_seed)
    net = model.net
    opt = torch.optim.SGD(net.parameters(), lr=cfg.lr, momentum=cfg.momentum, nesterov=True)
    iters = cfg.iterations_per_epoch or -(-len(arrays) // cfg.batch_size)
    start_epoch = len(model.train_log)

    net.train()
    for epoch in range(cfg.epochs):
        lr = _poly_lr(cfg.lr, epoch, cfg.epochs)
        for group in opt.param_groups:
            group["lr"] = lr
        order = itertools.cycle(rng.permutation(len(arrays)))
        losses, skipped = [], 0
        for _ in range(iters):
            xs, ys, ms = [], [], []
            for _ in range(cfg.batch_size):
                x, y, m = arrays[next(order)]
                lo = [int(rng.integers(0, s - p + 1)) for s, p in zip(x.shape, patch)]
                sl = tuple(slice(a, a + p) for a, p in zip(lo, patch))
                xs.append(x[sl])
                ys.append(y[sl])
                ms.append(np.ones(patch, dtype=bool) if m is None else m[sl])
            mask = torch.from_numpy(np.stack(ms))
            if not mask.any():
                skipped += 1
                log.warning("epoch %d: batch has no labeled voxels, skipped", start_epoch + epoch)
                continue
            x = torch.from_numpy(np.stack(xs)[:, None])
            y = torch.from_numpy(np.stack(ys))
            logits = net(x)
            loss = dice_ce_loss(
                logits, y, None if mask.all() else mask, w_dice=cfg.w_dice, w_ce=cfg.w_ce
            )
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite segmentation loss in epoch {start_epoch + epoch}", epoch)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        if not losses:
            raise ValidationError(f"epoch {start_epoch + epoch}: every batch was fully ignored")
        model.train_log.append(
            {"epoch": start_epoch + epoch, "loss": float(np.mean(losses)), "lr": lr, "skipped": skipped}
        )
    net.eval()
    return model


def _starts(size, patch):
    if size == patch:
        return [0]
    step = max(1, patch // 2)
    starts = list(range(0, size - patch + 1, step))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def _forward_probs(net, x: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        logits = net(torch.from_numpy(np.ascontiguousarray(x))[None, None])
        return torch.softmax(logits.double(), dim=1)[0].numpy()


def predict(m: SegModel, v: Volume) -> ProbMap:
    """Sliding-window softmax probabilities, overlapping windows averaged."""
    patch = m.patch_size
    if any(s < p for s, p in zip(v.shape, patch)):
        raise ValidationError(f"volume shape {v.shape} is smaller than the model patch {patch}")
    x = standardize(v.voxels)
    m.net.eval()
    acc = np.zeros((m.n_classes,) + v.shape, dtype=np.float64)
    count = np.zeros(v.shape, dtype=np.float64)
    for sx, sy, sz in itertools.product(*(_starts(s, p) for s, p in zip(v.shape, patch))):
        sl = (slice(sx, sx + patch[0]), slice(sy, sy + patch[1]), slice(sz, sz + patch[2]))
        acc[(slice(None),) + sl] += _forward_probs(m.net, x[sl])
        count[sl] += 1.0
    return ProbMap((acc / count).astype(np.float32))


def predict_whole(m: SegModel, v: Volume) -> ProbMap:
    """Single forward pass over the full volume (shape must suit the network)."""
    mult = 2 ** (m.arch["levels"] - 1)
    if any(s % mult for s in v.shape):
        raise ValidationError(f"volume shape {v.shape} must be divisible by {mult}")
    m.net.eval()
    return ProbMap(_forward_probs(m.net, standardize(v.voxels)).astype(np.float32))


def save_segmodel(m: SegModel, path) -> Path:
    return write_archive(path, m.arch, m.state(), {"train_log": m.train_log})


def load_segmodel(path) -> SegModel:
    arch, tensors, extra = read_archive(path)
    if arch.get("kind") not in ARCHS:
        raise ValidationError(f"{path}: not a segmentation checkpoint")
    m = SegModel(build_network(arch), arch, list((extra or {}).get("train_log", [])))
    numpy_to_state(m.net, tensors)
    m.net.eval()
    return m


def write_train_log_csv(m: SegModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "lr"])
        for r in m.train_log:
            w.writerow([r["epoch"], f"{r['loss']:.8g}", f"{r['lr']:.8g}"])
    return path
