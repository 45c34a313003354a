"""Dice evaluation, protocol routing, per-structure ensembling and reports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .data import COCHLEA, VS, LabelMap, Protocol, Volume
from .errors import RoutingError, ValidationError

FOREGROUND = (VS, COCHLEA)
COLUMNS = ("VS Dice", "Cochlea Dice", "Mean Dice")
AGGREGATION_NOTE = (
    "Mean Dice is the mean over cases of each case's (VS + cochlea) / 2; "
    "± is the population standard deviation over cases."
)


def _labels(x) -> np.ndarray:
    return x.labels if isinstance(x, LabelMap) else np.asarray(x)


def dice(pred, truth, class_id: int) -> float:
    """2|P∩T| / (|P| + |T|) for one class; 1.0 when the class is absent from both."""
    p, t = _labels(pred), _labels(truth)
    if p.shape != t.shape:
        raise ValidationError(f"prediction shape {p.shape} != truth shape {t.shape}")
    if class_id not in FOREGROUND:
        raise ValidationError(f"dice is defined for classes {FOREGROUND}, got {class_id}")
    pm, tm = p == class_id, t == class_id
    denom = int(pm.sum()) + int(tm.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pm, tm).sum()) / denom


@dataclass(frozen=True)
class CaseDice:
    case_id: str
    dice_vs: float
    dice_cochlea: float

    @property
    def mean(self) -> float:
        return (self.dice_vs + self.dice_cochlea) / 2.0


@dataclass
class DiceReport:
    model: str
    per_case: list[CaseDice] = field(default_factory=list)

    def _column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.per_case], dtype=np.float64)

    @property
    def aggregates(self) -> dict[str, tuple[float, float]]:
        cols = {"VS Dice": "dice_vs", "Cochlea Dice": "dice_cochlea", "Mean Dice": "mean"}
        out = {}
        for label, attr in cols.items():
            v = self._column(attr)
            out[label] = (float(v.mean()), float(v.std()))
        return out

    @property
    def mean_dice(self) -> float:
        return self.aggregates["Mean Dice"][0]

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "per_case": [
                {"case_id": r.case_id, "dice_vs": r.dice_vs, "dice_cochlea": r.dice_cochlea}
                for r in self.per_case
            ],
            "aggregates": {k: {"mean": m, "std": s} for k, (m, s) in self.aggregates.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiceReport":
        rows = [CaseDice(r["case_id"], float(r["dice_vs"]), float(r["dice_cochlea"])) for r in d["per_case"]]
        return cls(d["model"], rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["case_id", "dice_vs", "dice_cochlea", "dice_mean"])
        for r in self.per_case:
            w.writerow([r.case_id, repr(r.dice_vs), repr(r.dice_cochlea), repr(r.mean)])
        return buf.getvalue()


def evaluate(predictor, cases, name: str = "model") -> DiceReport:
    """Score ``predictor`` (anything with ``segment(volume) -> LabelMap``)."""
    cases = list(cases)
    if not cases:
        raise ValidationError("evaluate needs at least one (volume, truth) case")
    rows = []
    for vol, truth in cases:
        pred = predictor.segment(vol)
        rows.append(CaseDice(vol.case_id, dice(pred, truth, VS), dice(pred, truth, COCHLEA)))
    return DiceReport(name, rows)


def route_by_protocol(models: dict, v: Volume):
    key = Protocol(v.protocol)
    for proto, m in models.items():
        if Protocol(proto) is key:
            return m
    raise RoutingError(f"no model registered for protocol {key.value} (case {v.case_id})")


@dataclass
class ProtocolRouter:
    """Dispatches each volume to the model trained on its protocol."""

    models: dict

    def segment(self, v: Volume) -> LabelMap:
        return route_by_protocol(self.models, v).segment(v)


@dataclass(frozen=True)
class EnsembleSpec:
    class_to_model: dict

    def __post_init__(self):
        keys = {int(k) for k in self.class_to_model}
        if keys != set(FOREGROUND):
            raise ValidationError(f"ensemble must assign exactly classes {FOREGROUND}, got {sorted(keys)}")
        object.__setattr__(self, "class_to_model", {int(k): v for k, v in self.class_to_model.items()})


def ensemble_combine(preds: dict, spec: EnsembleSpec) -> LabelMap:
    """Take each structure from its assigned model; VS wins where both claim a voxel."""
    for c, model_id in spec.class_to_model.items():
        if model_id not in preds:
            raise ValidationError(f"no prediction from model {model_id!r} (assigned to class {c})")
    vs = _labels(preds[spec.class_to_model[VS]])
    coch = _labels(preds[spec.class_to_model[COCHLEA]])
    if vs.shape != coch.shape:
        raise ValidationError(f"ensemble inputs differ in shape: {vs.shape} vs {coch.shape}")
    out = np.zeros(vs.shape, dtype=np.uint8)
    out[coch == COCHLEA] = COCHLEA
    out[vs == VS] = VS
    return LabelMap(out)


@dataclass
class StructureEnsemble:
    models: dict
    spec: EnsembleSpec

    def segment(self, v: Volume) -> LabelMap:
        needed = set(self.spec.class_to_model.values())
        return ensemble_combine({k: self.models[k].segment(v) for k in needed}, self.spec)


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------

TABLE_SCHEMA = {
    "type": "object",
    "required": ["columns", "rows", "aggregation"],
    "properties": {
        "columns": {"const": list(COLUMNS)},
        "aggregation": {"type": "string"},
        "rows": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["model", "cells", "n_cases"],
                "properties": {
                    "model": {"type": "string"},
                    "n_cases": {"type": "integer", "minimum": 1},
                    "cells": {
                        "type": "object",
                        "required": list(COLUMNS),
                        "additionalProperties": False,
                        "patternProperties": {
                            ".*": {
                                "type": "object",
                                "required": ["mean", "std", "text"],
                                "properties": {
                                    "mean": {"type": "number", "minimum": 0, "maximum": 1},
                                    "std": {"type": "number", "minimum": 0},
                                    "text": {"type": "string", "pattern": r"^\d\.\d{4} ± \d\.\d{4}$"},
                                },
                            }
                        },
                    },
                },
            },
        },
    },
}


def _cell(mean, std) -> dict:
    return {"mean": mean, "std": std, "text": f"{mean:.4f} ± {std:.4f}"}


def table_report(reports: list[DiceReport], extra: dict | None = None) -> dict:
    rows = []
    for r in reports:
        agg = r.aggregates
        rows.append({"model": r.model, "n_cases": len(r.per_case), "cells": {c: _cell(*agg[c]) for c in COLUMNS}})
    out = {"columns": list(COLUMNS), "rows": rows, "aggregation": AGGREGATION_NOTE}
    if extra:
        out.update(extra)
    return out


def validate_table(table: dict, required_rows=()) -> None:
    import jsonschema

    try:
        jsonschema.validate(table, TABLE_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ValidationError(f"report does not match the table schema: {exc.message}") from exc
    names = [r["model"] for r in table["rows"]]
    missing = [n for n in required_rows if n not in names]
    if missing:
        raise ValidationError(f"report lacks rows {missing}")


def table_markdown(table: dict) -> str:
    lines = [
        "| Model Name | " + " | ".join(table["columns"]) + " |",
        "|" + "---|" * (len(table["columns"]) + 1),
    ]
    for r in table["rows"]:
        lines.append("| " + r["model"] + " | " + " | ".join(r["cells"][c]["text"] for c in table["columns"]) + " |")
    lines += ["", f"_{table['aggregation']}_"]
    for rnd in table.get("selftrain_rounds", []):
        lines.append(f"- {rnd['model']} round {rnd['round']}: q = {rnd['q']:.2f}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Qualitative renders
# --------------------------------------------------------------------------

CONTOUR_COLORS = {VS: (255, 64, 64), COCHLEA: (64, 255, 64)}


def label_contours(labels2d: np.ndarray) -> np.ndarray:
    """Boundary pixels: labeled pixels with a 4-neighbour of a different class."""
    lab = np.asarray(labels2d)
    pad = np.pad(lab, 1, mode="edge")
    core = pad[1:-1, 1:-1]
    differs = np.zeros(lab.shape, dtype=bool)
    for dx, dy in ((0, 1), (2, 1), (1, 0), (1, 2)):
        differs |= pad[dx:dx + lab.shape[0], dy:dy + lab.shape[1]] != core
    return np.where(differs & (lab > 0), lab, 0).astype(np.uint8)


def _overlay(gray: np.ndarray, labels2d: np.ndarray) -> np.ndarray:
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    edges = label_contours(labels2d)
    for c, color in CONTOUR_COLORS.items():
        rgb[edges == c] = color
    return rgb


def render_qualitative(volume: Volume, pred, truth, slice_index: int, path, scale: int = 4) -> Path:
    """Write [image | prediction contours | truth contours] for one z-slice as PNG."""
    if not 0 <= slice_index < volume.shape[2]:
        raise ValidationError(f"slice_index {slice_index} outside [0, {volume.shape[2]})")
    p, t = _labels(pred), _labels(truth)
    if p.shape != volume.shape or t.shape != volume.shape:
        raise ValidationError("prediction and truth must match the volume shape")
    img = volume.voxels[:, :, slice_index].astype(np.float64)
    lo, hi = img.min(), img.max()
    gray = np.zeros(img.shape, np.uint8) if hi <= lo else ((img - lo) / (hi - lo) * 255).astype(np.uint8)
    panels = [
        np.repeat(gray[..., None], 3, axis=-1),
        _overlay(gray, p[:, :, slice_index]),
        _overlay(gray, t[:, :, slice_index]),
    ]
    sep = np.full((2, gray.shape[1], 3), 255, np.uint8)
    canvas = np.concatenate([panels[0], sep, panels[1], sep, panels[2]], axis=0)
    # arrays are (x, y); images are (row=y, col=x)
    canvas = np.transpose(canvas, (1, 0, 2))
    canvas = np.kron(canvas, np.ones((scale, scale, 1), np.uint8))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas).save(path, format="PNG")
    return path


def write_report_files(table: dict, reports: list[DiceReport], out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    p = out_dir / "table.json"
    p.write_text(json.dumps(table, indent=2, sort_keys=True, ensure_ascii=False) + "\n")
    written.append(p)
    p = out_dir / "table.md"
    p.write_text(table_markdown(table))
    written.append(p)
    p = out_dir / "dice_reports.json"
    p.write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n")
    written.append(p)
    for r in reports:
        p = out_dir / f"dice_{r.model}.csv"
        p.write_text(r.to_csv())
        written.append(p)
    return written
