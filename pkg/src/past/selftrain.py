"""Iterative top-q pseudo-label self-training on the concatenated set
of synthesized-source and real-target volumes."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import N_CLASSES, Domain, LabelMap, Volume, load_labels, load_mask, load_volume
from .data import save_labels, save_mask, save_volume
from .errors import PastError, ValidationError
from .segmentation import ProbMap, SegModel, SegTrainConfig, predict, train_segmentation

log = logging.getLogger(__name__)

SCOPES = ("per_class", "global")
SYNTHESIZED, REAL_TARGET = "synthesized", "real_target"


@dataclass(frozen=True, eq=False)
class PseudoLabel:
    """Hard labels plus an ignore mask (True = excluded from the loss)."""

    labels: np.ndarray
    ignore: np.ndarray

    def __post_init__(self):
        lab = np.array(self.labels, dtype=np.uint8)
        ign = np.array(self.ignore, dtype=bool)
        if lab.ndim != 3 or lab.shape != ign.shape:
            raise ValidationError(f"labels {lab.shape} and ignore mask {ign.shape} must be equal 3D shapes")
        if lab.size and lab.max() >= N_CLASSES:
            raise ValidationError("pseudo-label values must lie in {0, 1, 2}")
        lab.flags.writeable = False
        ign.flags.writeable = False
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "ignore", ign)

    @property
    def shape(self):
        return self.labels.shape

    @classmethod
    def from_labels(cls, labels: LabelMap) -> "PseudoLabel":
        return cls(labels.labels, np.zeros(labels.shape, dtype=bool))

    def kept_counts(self) -> list[int]:
        kept = self.labels[~self.ignore]
        return [int(np.count_nonzero(kept == c)) for c in range(N_CLASSES)]

    def __eq__(self, other):
        if not isinstance(other, PseudoLabel):
            return NotImplemented
        return np.array_equal(self.labels, other.labels) and np.array_equal(self.ignore, other.ignore)

    __hash__ = None


def portion_count(q: float, n: int) -> int:
    """floor(q * n), guarded against representation error (0.29 * 100 etc.)."""
    return int(math.floor(q * n + 1e-9))


def confidence_order(conf: np.ndarray) -> np.ndarray:
    """Flat voxel indices by descending confidence; ties go to the lower index."""
    flat = conf.ravel()
    return np.lexsort((np.arange(flat.size), -flat))


def generate_pseudo_labels(p: ProbMap, q: float, scope: str = "per_class") -> PseudoLabel:
    """Keep the top ``q`` portion of voxels by confidence (max probability).

    ``per_class`` keeps floor(q * N_c) voxels within each hard class c;
    ``global`` keeps floor(q * N) voxels overall.
    """
    if not 0.0 < q <= 1.0:
        raise ValidationError(f"portion q must lie in (0, 1], got {q}")
    if scope not in SCOPES:
        raise ValidationError(f"selection scope must be one of {SCOPES}, got {scope!r}")
    hard = np.argmax(p.probs, axis=0).astype(np.uint8)
    conf = np.max(p.probs, axis=0)
    order = confidence_order(conf)
    keep = np.zeros(hard.size, dtype=bool)
    if scope == "global":
        keep[order[: portion_count(q, hard.size)]] = True
    else:
        ranked_cls = hard.ravel()[order]
        for c in range(p.probs.shape[0]):
            members = order[ranked_cls == c]
            keep[members[: portion_count(q, members.size)]] = True
    return PseudoLabel(hard, ~keep.reshape(hard.shape))


@dataclass(frozen=True)
class ConcatCase:
    volume: Volume
    provenance: str
    labels: LabelMap | None = None


def build_concat_set(synth_source, target) -> list[ConcatCase]:
    """Synthesized (source-derived) cases first, then real target cases.

    Source labels ride along as a sidecar; they are only used when
    self-training is configured to keep source truth.
    """
    synth_source, target = list(synth_source), list(target)
    if not target:
        raise ValidationError("self-training needs at least one unlabeled target volume")
    out = []
    for vol, lab in synth_source:
        if vol.domain is not Domain.TARGET:
            raise ValidationError(
                f"case {vol.case_id} is still in the source domain; translate it first"
            )
        out.append(ConcatCase(vol, SYNTHESIZED, lab))
    out += [ConcatCase(vol, REAL_TARGET, None) for vol in target]
    return out


def save_concat_set(cases: list[ConcatCase], root) -> list[Path]:
    root = Path(root)
    written, entries = [], []
    for i, c in enumerate(cases):
        stem = f"{i:04d}_{c.volume.case_id}"
        written += save_volume(c.volume, root / "images" / stem)
        entry = {"case_id": c.volume.case_id, "provenance": c.provenance, "volume_path": f"images/{stem}"}
        if c.labels is not None:
            written += save_labels(c.labels, root / "labels" / stem)
            entry["label_path"] = f"labels/{stem}"
        entries.append(entry)
    index = root / "concat.json"
    index.write_text(json.dumps(entries, indent=2, sort_keys=True) + "\n")
    return written + [index]


def load_concat_set(root) -> list[ConcatCase]:
    root = Path(root)
    cases = []
    for e in json.loads((root / "concat.json").read_text()):
        lab = load_labels(root / e["label_path"]) if "label_path" in e else None
        cases.append(ConcatCase(load_volume(root / e["volume_path"]), e["provenance"], lab))
    return cases


def save_pseudo_label(pl: PseudoLabel, path) -> list[Path]:
    path = Path(path)
    return save_labels(LabelMap(pl.labels), path) + save_mask(pl.ignore, path.with_name(path.name + ".ignore"))


def load_pseudo_label(path) -> PseudoLabel:
    path = Path(path)
    return PseudoLabel(load_labels(path).labels, load_mask(path.with_name(path.name + ".ignore")))


@dataclass(frozen=True)
class SelfTrainConfig:
    K: int = 2
    q0: float = 0.6
    q_step: float = 0.2
    selection_scope: str = "per_class"
    keep_source_truth: bool = False
    seg_cfg: SegTrainConfig = field(default_factory=lambda: SegTrainConfig(ignore_masking=True))

    def validate(self) -> None:
        problems = []
        if self.K < 0:
            problems.append("K must be >= 0")
        if not 0.0 < self.q0 <= 1.0:
            problems.append("q0 must lie in (0, 1]")
        if self.q_step < 0:
            problems.append("q_step must be >= 0")
        if self.selection_scope not in SCOPES:
            problems.append(f"selection_scope must be one of {SCOPES}")
        if problems:
            raise ValidationError("; ".join(problems))

    def q_schedule(self) -> list[float]:
        return [round(min(self.q0 + k * self.q_step, 1.0), 10) for k in range(self.K)]


def self_train(s0: SegModel, concat: list[ConcatCase], cfg: SelfTrainConfig = SelfTrainConfig(), on_round=None):
    """Run K rounds of predict -> pseudo-label -> warm-started retraining.

    Returns the final model and one report dict per round. ``on_round(k, q,
    pairs)`` is called with each round's (volume, PseudoLabel) pairs before
    training, e.g. to persist them.
    """
    cfg.validate()
    if not concat:
        raise ValidationError("concatenated set is empty")
    seg_cfg = replace(cfg.seg_cfg, ignore_masking=True)
    model, reports = s0, []
    for k, q in enumerate(cfg.q_schedule(), start=1):
        try:
            pairs, kept = [], np.zeros(N_CLASSES, dtype=np.int64)
            total = 0
            for case in concat:
                if cfg.keep_source_truth and case.provenance == SYNTHESIZED and case.labels is not None:
                    pl = PseudoLabel.from_labels(case.labels)
                else:
                    pl = generate_pseudo_labels(predict(model, case.volume), q, cfg.selection_scope)
                pairs.append((case.volume, pl))
                kept += pl.kept_counts()
                total += pl.labels.size
            if on_round is not None:
                on_round(k, q, pairs)
            round_cfg = replace(seg_cfg, rng_seed=seg_cfg.rng_seed + k)
            model = train_segmentation(pairs, round_cfg, init=model)
        except PastError as exc:
            exc.round = k
            exc.args = (f"self-training round {k}: {exc.args[0] if exc.args else exc}",) + exc.args[1:]
            raise
        losses = [r["loss"] for r in model.train_log[-round_cfg.epochs:]] if round_cfg.epochs else []
        reports.append(
            {
                "round": k,
                "q": q,
                "scope": cfg.selection_scope,
                "kept_voxels": [int(n) for n in kept],
                "labeled_fraction": [float(n) / total for n in kept],
                "losses": losses,
            }
        )
        log.info("self-training round %d (q=%.2f): kept %s", k, q, kept.tolist())
    return model, reports
