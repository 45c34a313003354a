"""Config-driven stages with content-hashed manifests.

A run directory holds one sub-directory per stage. Each stage writes a
``manifest.json`` listing the sha256 of every input it read and every
artifact it produced, the config hash and the stage seed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data as D
from .errors import CheckFailure, MissingArtifactError, ValidationError
from .evaluation import (
    DiceReport,
    EnsembleSpec,
    ProtocolRouter,
    StructureEnsemble,
    evaluate,
    render_qualitative,
    table_report,
    validate_table,
    write_report_files,
)
from .preprocess import (
    RoiBox,
    crop_labels,
    crop_roi_3d,
    crop_slices_2d,
    crop_to_box,
    normalize_intensity,
    roi_2d,
    roi_3d,
)
from .segmentation import SegTrainConfig, load_segmodel, save_segmodel, train_segmentation, write_train_log_csv
from .selftrain import (
    SelfTrainConfig,
    build_concat_set,
    save_concat_set,
    save_pseudo_label,
    self_train,
)
from .translation import GanConfig, load_translation, save_translation, train_translation, translate_volume

log = logging.getLogger(__name__)

STAGES = ("phantom", "preprocess", "translate", "synthesize", "segtrain", "selftrain", "evaluate", "report")
UPSTREAM = {
    "phantom": (),
    "preprocess": ("phantom",),
    "translate": ("preprocess",),
    "synthesize": ("translate", "preprocess"),
    "segtrain": ("synthesize", "preprocess"),
    "selftrain": ("segtrain", "synthesize", "preprocess"),
    "evaluate": ("selftrain", "segtrain", "preprocess"),
    "report": ("evaluate", "preprocess"),
}
PROTOCOLS = (D.Protocol.P448, D.Protocol.P384)
ARCHS = ("unet", "resunet")

NO_DA = "no-DA"
ALIGNED_ROUTED = "aligned-routed"
PAST = "PAST"


def aligned_name(protocol) -> str:
    return f"aligned-{D.Protocol(protocol).value}"


def selftrain_name(arch) -> str:
    return f"selftrain-{arch}"


TABLE_ROWS = (
    NO_DA,
    aligned_name(D.Protocol.P448),
    aligned_name(D.Protocol.P384),
    ALIGNED_ROUTED,
    selftrain_name("unet"),
    selftrain_name("resunet"),
    PAST,
)


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PhantomSection:
    n_source: int = 8
    n_target: int = 8
    shape: tuple[int, int, int] = (64, 64, 12)
    shift_strength: float = 1.0
    spacing: tuple[float, float, float] = (0.5, 0.5, 1.5)


@dataclass(frozen=True)
class GanSection:
    steps: int = 800
    batch_size: int = 8
    lr_gen: float = 1e-3
    lr_disc: float = 1e-4
    lambda_adv: float = 1.0
    lambda_cycle: float = 10.0
    lambda_recon: float = 10.0
    base_width: int = 16
    n_down: int = 2


@dataclass(frozen=True)
class SegSection:
    epochs: int = 60
    batch_size: int = 2
    iterations_per_epoch: int = 8
    patch_size: tuple[int, int, int] = (32, 24, 8)
    lr: float = 0.08
    momentum: float = 0.9
    w_dice: float = 1.0
    w_ce: float = 1.0
    base_width: int = 8
    levels: int = 3


@dataclass(frozen=True)
class SelfTrainSection:
    K: int = 2
    q0: float = 0.6
    q_step: float = 0.2
    selection_scope: str = "per_class"
    keep_source_truth: bool = False
    epochs_per_round: int = 20
    lr: float = 0.01


@dataclass(frozen=True)
class ReportSection:
    ensemble_vs: str = "resunet"
    ensemble_cochlea: str = "unet"
    render_cases: int = 2
    uda_margin: float = 0.15
    selftrain_tolerance: float = 0.02


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    runs_dir: str = "runs"
    phantom: PhantomSection = field(default_factory=PhantomSection)
    gan: GanSection = field(default_factory=GanSection)
    segmentation: SegSection = field(default_factory=SegSection)
    selftrain: SelfTrainSection = field(default_factory=SelfTrainSection)
    report: ReportSection = field(default_factory=ReportSection)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]

    def stage_seed(self, stage: str) -> int:
        return derive_seed(self.seed, stage)

    # stage configs --------------------------------------------------------

    def phantom_spec(self) -> D.PhantomSpec:
        p = self.phantom
        return D.PhantomSpec(p.n_source, p.n_target, tuple(p.shape), self.stage_seed("phantom"), p.shift_strength, tuple(p.spacing))

    def gan_config(self, protocol) -> GanConfig:
        kw = dataclasses.asdict(self.gan)
        return GanConfig(rng_seed=derive_seed(self.seed, f"translate/{D.Protocol(protocol).value}"), **kw)

    def seg_config(self, arch: str, tag: str) -> SegTrainConfig:
        kw = dataclasses.asdict(self.segmentation)
        kw["patch_size"] = tuple(kw["patch_size"])
        return SegTrainConfig(arch=arch, rng_seed=derive_seed(self.seed, f"segtrain/{tag}"), **kw)

    def selftrain_config(self, arch: str, tag: str) -> SelfTrainConfig:
        s = self.selftrain
        seg = dataclasses.replace(
            self.seg_config(arch, tag),
            epochs=s.epochs_per_round,
            lr=s.lr,
            ignore_masking=True,
            rng_seed=derive_seed(self.seed, f"selftrain/{tag}"),
        )
        return SelfTrainConfig(s.K, s.q0, s.q_step, s.selection_scope, s.keep_source_truth, seg)

    def validate(self) -> None:
        problems = []
        for check in (
            lambda: self.phantom_spec().validate(),
            lambda: self.gan_config(D.Protocol.P448).validate(),
            lambda: self.seg_config("unet", "check").validate(),
            lambda: self.selftrain_config("unet", "check").validate(),
        ):
            try:
                check()
            except ValidationError as exc:
                problems.append(str(exc))
        for name in (self.report.ensemble_vs, self.report.ensemble_cochlea):
            if name not in ARCHS:
                problems.append(f"report ensemble member {name!r} not in {ARCHS}")
        w, h, d = self.phantom.shape
        roi = ((3 * w) // 4 - w // 4, (3 * h) // 4 - (3 * h) // 8, d)
        if any(r < p for r, p in zip(roi, self.segmentation.patch_size)):
            problems.append(f"segmentation patch {tuple(self.segmentation.patch_size)} exceeds 3D ROI {roi}")
        if (w // 2) % 2**self.gan.n_down or ((3 * h) // 4 - h // 4) % 2**self.gan.n_down:
            problems.append(f"2D ROI of shape {w}x{h} is not divisible by 2**n_down")
        if problems:
            raise ValidationError("invalid experiment config:\n  - " + "\n  - ".join(problems))


_SECTIONS = {
    "phantom": PhantomSection,
    "gan": GanSection,
    "segmentation": SegSection,
    "selftrain": SelfTrainSection,
    "report": ReportSection,
}
_TUPLE_FIELDS = {"shape", "spacing", "patch_size"}


def derive_seed(global_seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(global_seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build a config, collecting every unknown key or bad type before failing."""
    if not isinstance(raw, dict):
        raise ValidationError("config must be a JSON object")
    problems, kwargs = [], {}
    top_known = {"seed", "runs_dir"} | set(_SECTIONS)
    for key in raw:
        if key not in top_known:
            problems.append(f"unknown top-level key {key!r}")
    if "seed" in raw:
        if isinstance(raw["seed"], bool) or not isinstance(raw["seed"], int):
            problems.append("seed must be an integer")
        else:
            kwargs["seed"] = raw["seed"]
    if "runs_dir" in raw:
        kwargs["runs_dir"] = str(raw["runs_dir"])
    for name, cls in _SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            problems.append(f"section {name!r} must be an object")
            continue
        known = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for key, value in section.items():
            if key not in known:
                problems.append(f"unknown key {name}.{key}")
                continue
            default = getattr(cls(), key)
            if key in _TUPLE_FIELDS:
                if not isinstance(value, (list, tuple)) or len(value) != 3:
                    problems.append(f"{name}.{key} must be a list of 3 numbers")
                    continue
                value = tuple(value)
            elif isinstance(default, bool):
                if not isinstance(value, bool):
                    problems.append(f"{name}.{key} must be a boolean")
                    continue
            elif isinstance(default, int):
                if isinstance(value, bool) or not isinstance(value, int):
                    problems.append(f"{name}.{key} must be an integer")
                    continue
            elif isinstance(default, float):
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    problems.append(f"{name}.{key} must be a number")
                    continue
                value = float(value)
            elif isinstance(default, str) and not isinstance(value, str):
                problems.append(f"{name}.{key} must be a string")
                continue
            values[key] = value
        kwargs[name] = cls(**values)
    if problems:
        raise ValidationError("invalid experiment config:\n  - " + "\n  - ".join(problems))
    cfg = ExperimentConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config(path, seed: int | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
    if seed is not None:
        raw["seed"] = seed
    return config_from_dict(raw)


# --------------------------------------------------------------------------
# Run directories and manifests
# --------------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def runs_root(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get("PAST_RUNS_DIR") or cfg.runs_dir)


def resolve_run_dir(cfg: ExperimentConfig, out=None, fresh: bool = False) -> Path:
    """``out`` if given; else the newest ``<root>/<timestamp>-<hash>`` for this
    config, or a new one when none exists (or ``fresh``)."""
    if out is not None:
        return Path(out)
    root = runs_root(cfg)
    suffix = "-" + cfg.config_hash()
    if not fresh and root.is_dir():
        existing = sorted(p for p in root.iterdir() if p.is_dir() and p.name.endswith(suffix))
        if existing:
            return existing[-1]
    stamp = time.strftime("%Y%m%dT%H%M%S", time.gmtime())
    return root / f"{stamp}{suffix}"


class StageContext:
    def __init__(self, cfg: ExperimentConfig, run_dir: Path, stage: str):
        self.cfg = cfg
        self.run_dir = Path(run_dir)
        self.stage = stage
        self.dir = self.run_dir / stage
        self.inputs: dict[str, str] = {}
        self.outputs: set[Path] = set()

    def upstream(self, stage: str) -> Path:
        d = self.run_dir / stage
        if not (d / "manifest.json").is_file():
            raise MissingArtifactError(
                f"stage {self.stage!r} needs the outputs of stage {stage!r}; run `--stage {stage}` first",
                producer=stage,
            )
        return d

    def record_inputs(self, stage: str) -> Path:
        d = self.upstream(stage)
        manifest = json.loads((d / "manifest.json").read_text())
        for rel, digest in manifest["outputs"].items():
            self.inputs[f"{stage}/{rel}"] = digest
        return d

    def wrote(self, paths) -> None:
        if isinstance(paths, (str, Path)):
            paths = [paths]
        self.outputs.update(Path(p) for p in paths)

    def write_manifest(self, started: float) -> dict:
        outputs = {}
        for p in sorted(self.outputs):
            rel = p.relative_to(self.dir).as_posix()
            outputs[rel] = sha256_file(p)
        manifest = {
            "stage": self.stage,
            "config_hash": self.cfg.config_hash(),
            "seed": self.cfg.stage_seed(self.stage),
            "global_seed": self.cfg.seed,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": outputs,
            "wall_time_s": round(time.time() - started, 3),
        }
        (self.dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return manifest


def _write_json(ctx: StageContext, rel: str, obj) -> Path:
    p = ctx.dir / rel
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    ctx.wrote(p)
    return p


def _save_cases(ctx: StageContext, rel: str, cases) -> list[dict]:
    """Write (Volume, LabelMap | None) pairs under ``rel``; returns index entries."""
    entries = []
    for vol, lab in cases:
        e = {"case_id": vol.case_id, "protocol": vol.protocol.value, "volume_path": f"{rel}/images/{vol.case_id}"}
        ctx.wrote(D.save_volume(vol, ctx.dir / e["volume_path"]))
        if lab is not None:
            e["label_path"] = f"{rel}/labels/{vol.case_id}"
            ctx.wrote(D.save_labels(lab, ctx.dir / e["label_path"]))
        entries.append(e)
    _write_json(ctx, f"{rel}/index.json", entries)
    return entries


def load_cases(stage_dir: Path, rel: str, with_labels=True):
    entries = json.loads((stage_dir / rel / "index.json").read_text())
    out = []
    for e in entries:
        vol = D.load_volume(stage_dir / e["volume_path"])
        lab = D.load_labels(stage_dir / e["label_path"]) if with_labels and "label_path" in e else None
        out.append((vol, lab))
    return out


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------


def stage_phantom(ctx: StageContext) -> None:
    ds = D.generate_phantom(ctx.cfg.phantom_spec())
    ctx.wrote(D.save_dataset(ds, ctx.dir / "dataset"))


def _prep_3d(v: D.Volume) -> D.Volume:
    return normalize_intensity(crop_roi_3d(v)[0])


def _prep_2d(v: D.Volume) -> D.Volume:
    return normalize_intensity(crop_slices_2d(v)[0])


def stage_preprocess(ctx: StageContext) -> None:
    src_dir = ctx.record_inputs("phantom") / "dataset"
    view = D.load_training_view(src_dir)
    shape = view.source_cases[0][0].shape
    box3 = roi_3d(*shape)
    _save_cases(ctx, "seg_source", [(_prep_3d(v), crop_labels(l, box3)) for v, l in view.source_cases])
    _save_cases(ctx, "gan_source", [(_prep_2d(v), crop_labels(l, roi_2d(*v.shape))) for v, l in view.source_cases])
    _save_cases(ctx, "gan_target", [(_prep_2d(v), None) for v in view.target_cases])
    _save_cases(ctx, "seg_target", [(_prep_3d(v), None) for v in view.target_cases])
    # held-out truth is cropped for evaluation only; no training stage reads it
    truth = D.load_dataset(src_dir, with_truth=True).target_truth
    held = [(_prep_3d(v), crop_labels(t, roi_3d(*v.shape))) for v, t in zip(view.target_cases, truth)]
    _save_cases(ctx, "heldout", held)
    _write_json(ctx, "boxes.json", {"roi_2d": roi_2d(*shape).as_tuple(), "roi_3d": box3.as_tuple()})


def _slices(volumes) -> list[np.ndarray]:
    return [v.voxels[:, :, k] for v in volumes for k in range(v.shape[2])]


def stage_translate(ctx: StageContext) -> None:
    pre = ctx.record_inputs("preprocess")
    source = [v for v, _ in load_cases(pre, "gan_source", with_labels=False)]
    target = [v for v, _ in load_cases(pre, "gan_target", with_labels=False)]
    for proto in PROTOCOLS:
        pool = [v for v in target if v.protocol is proto]
        if not pool:
            raise ValidationError(f"no target volumes with protocol {proto.value} to train a translator")
        gan_cfg = ctx.cfg.gan_config(proto)
        model = train_translation(_slices(source), _slices(pool), gan_cfg)
        ctx.wrote(save_translation(model, ctx.dir / f"gan_{proto.value}.ckpt"))
        curve = [r["cycle"] for r in model.train_log if r["phase"] == "gen"]
        _write_json(ctx, f"gan_{proto.value}_summary.json", {
            "steps": gan_cfg.steps,
            "seed": gan_cfg.rng_seed,
            "cycle_first": curve[0],
            "cycle_last": curve[-1],
        })


def stage_synthesize(ctx: StageContext) -> None:
    tr = ctx.record_inputs("translate")
    pre = ctx.record_inputs("preprocess")
    boxes = json.loads((pre / "boxes.json").read_text())
    inner = RoiBox.from_tuple(boxes["roi_3d"]).relative_to(RoiBox.from_tuple(boxes["roi_2d"]))
    source = load_cases(pre, "gan_source")
    for proto in PROTOCOLS:
        model = load_translation(tr / f"gan_{proto.value}.ckpt")
        cases = []
        for vol, lab in source:
            fake = translate_volume(model, vol).replace(protocol=proto)
            cases.append((normalize_intensity(crop_to_box(fake, inner)), crop_labels(lab, inner)))
        _save_cases(ctx, proto.value, cases)


def stage_segtrain(ctx: StageContext) -> None:
    pre = ctx.record_inputs("preprocess")
    syn = ctx.record_inputs("synthesize")
    cfg = ctx.cfg
    jobs = [(NO_DA, "unet", load_cases(pre, "seg_source"))]
    for proto in PROTOCOLS:
        cases = load_cases(syn, proto.value)
        for arch in ARCHS:
            jobs.append((f"{aligned_name(proto)}-{arch}", arch, cases))
    for name, arch, cases in jobs:
        model = train_segmentation(cases, cfg.seg_config(arch, name))
        ctx.wrote(save_segmodel(model, ctx.dir / f"{name}.ckpt"))
        ctx.wrote(write_train_log_csv(model, ctx.dir / f"{name}_log.csv"))


def stage_selftrain(ctx: StageContext) -> None:
    seg = ctx.record_inputs("segtrain")
    syn = ctx.record_inputs("synthesize")
    pre = ctx.record_inputs("preprocess")
    target = [v for v, _ in load_cases(pre, "seg_target", with_labels=False)]
    rounds = []
    for proto in PROTOCOLS:
        concat = build_concat_set(load_cases(syn, proto.value), [v for v in target if v.protocol is proto])
        ctx.wrote(save_concat_set(concat, ctx.dir / f"concat_{proto.value}"))
        for arch in ARCHS:
            tag = f"{selftrain_name(arch)}-{proto.value}"
            s0 = load_segmodel(seg / f"{aligned_name(proto)}-{arch}.ckpt")

            def persist(k, q, pairs, tag=tag):
                for i, (vol, pl) in enumerate(pairs):
                    ctx.wrote(save_pseudo_label(pl, ctx.dir / "pseudo" / tag / f"round{k}" / f"{i:04d}_{vol.case_id}"))

            model, reports = self_train(s0, concat, ctx.cfg.selftrain_config(arch, tag), on_round=persist)
            ctx.wrote(save_segmodel(model, ctx.dir / f"{tag}.ckpt"))
            ctx.wrote(write_train_log_csv(model, ctx.dir / f"{tag}_log.csv"))
            for r in reports:
                rounds.append({"model": tag, **r, "loss_curve": f"{tag}_log.csv"})
    _write_json(ctx, "rounds.json", rounds)


def build_predictors(seg_dir: Path, st_dir: Path, cfg: ExperimentConfig) -> dict:
    def router(fmt):
        return ProtocolRouter({p: load_segmodel(fmt(p)) for p in PROTOCOLS})

    preds = {NO_DA: load_segmodel(seg_dir / f"{NO_DA}.ckpt")}
    for p in PROTOCOLS:
        preds[aligned_name(p)] = load_segmodel(seg_dir / f"{aligned_name(p)}-unet.ckpt")
    preds[ALIGNED_ROUTED] = router(lambda p: seg_dir / f"{aligned_name(p)}-unet.ckpt")
    for arch in ARCHS:
        preds[selftrain_name(arch)] = router(lambda p, a=arch: st_dir / f"{selftrain_name(a)}-{p.value}.ckpt")
    spec = EnsembleSpec({D.VS: selftrain_name(cfg.report.ensemble_vs), D.COCHLEA: selftrain_name(cfg.report.ensemble_cochlea)})
    preds[PAST] = StructureEnsemble({k: preds[k] for k in set(spec.class_to_model.values())}, spec)
    return preds


def stage_evaluate(ctx: StageContext) -> None:
    seg = ctx.record_inputs("segtrain")
    st = ctx.record_inputs("selftrain")
    pre = ctx.record_inputs("preprocess")
    cases = load_cases(pre, "heldout")
    preds = build_predictors(seg, st, ctx.cfg)
    reports = [evaluate(preds[name], cases, name) for name in TABLE_ROWS]
    _write_json(ctx, "dice_reports.json", [r.to_dict() for r in reports])
    n_render = min(ctx.cfg.report.render_cases, len(cases))
    for vol, truth in cases[:n_render]:
        for name in (NO_DA, ALIGNED_ROUTED, PAST):
            pred = preds[name].segment(vol)
            z = int(np.argmax((truth.labels > 0).sum(axis=(0, 1))))
            ctx.wrote(render_qualitative(vol, pred, truth, z, ctx.dir / "renders" / f"{vol.case_id}_{name}.png"))


def acceptance_checks(reports: dict[str, DiceReport], cfg: ExperimentConfig) -> list[dict]:
    aligned = reports[ALIGNED_ROUTED].mean_dice
    no_da = reports[NO_DA].mean_dice
    st = reports[selftrain_name("unet")].mean_dice
    margin, tol = cfg.report.uda_margin, cfg.report.selftrain_tolerance
    return [
        {
            "name": "alignment beats no-DA",
            "passed": no_da + margin <= aligned,
            "detail": f"no-DA {no_da:.4f} + {margin} <= aligned {aligned:.4f}",
        },
        {
            "name": "self-training does not degrade",
            "passed": st >= aligned - tol,
            "detail": f"self-trained {st:.4f} >= aligned {aligned:.4f} - {tol}",
        },
    ]


def stage_report(ctx: StageContext) -> None:
    ev = ctx.record_inputs("evaluate")
    st_dir = ctx.run_dir / "selftrain"
    reports = [DiceReport.from_dict(d) for d in json.loads((ev / "dice_reports.json").read_text())]
    rounds = json.loads((st_dir / "rounds.json").read_text()) if (st_dir / "rounds.json").is_file() else []
    by_name = {r.model: r for r in reports}
    checks = acceptance_checks(by_name, ctx.cfg)
    table = table_report(
        reports,
        {
            "selftrain_rounds": [{"model": r["model"], "round": r["round"], "q": r["q"]} for r in rounds],
            "checks": checks,
        },
    )
    validate_table(table, TABLE_ROWS)
    ctx.wrote(write_report_files(table, reports, ctx.dir))
    failed = [c for c in checks if not c["passed"]]
    if failed:
        raise CheckFailure("; ".join(c["detail"] for c in failed))


STAGE_FUNCS = {
    "phantom": stage_phantom,
    "preprocess": stage_preprocess,
    "translate": stage_translate,
    "synthesize": stage_synthesize,
    "segtrain": stage_segtrain,
    "selftrain": stage_selftrain,
    "evaluate": stage_evaluate,
    "report": stage_report,
}

STAGE_ALIASES = {
    "gen-phantom": "phantom",
    "translate-train": "translate",
    "translate-apply": "synthesize",
    "seg-train": "segtrain",
    "self-train": "selftrain",
}


def canonical_stage(name: str) -> str:
    name = STAGE_ALIASES.get(name, name).replace("-", "")
    if name not in STAGE_FUNCS:
        raise ValidationError(f"unknown stage {name!r}; choose from {', '.join(STAGES)}")
    return name


def run_stage(cfg: ExperimentConfig, stage: str, run_dir: Path) -> dict:
    """Execute one stage into ``run_dir/<stage>``; returns its manifest."""
    stage = canonical_stage(stage)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    ctx = StageContext(cfg, run_dir, stage)
    for up in UPSTREAM[stage]:
        ctx.upstream(up)
    if ctx.dir.exists():
        # stale outputs from an earlier attempt must not leak into this manifest
        shutil.rmtree(ctx.dir)
    ctx.dir.mkdir(parents=True)
    started = time.time()
    log.info("stage %s -> %s", stage, ctx.dir)
    (ctx.dir / "config.json").write_text(cfg.to_json())
    ctx.wrote(ctx.dir / "config.json")
    try:
        STAGE_FUNCS[stage](ctx)
    except CheckFailure:
        # the report itself is complete; only the acceptance checks failed
        ctx.write_manifest(started)
        raise
    return ctx.write_manifest(started)


def run_all(cfg: ExperimentConfig, run_dir: Path) -> dict:
    """Run every stage in order; the report stage raises CheckFailure when an
    acceptance check fails (artifacts are kept)."""
    manifests = {}
    for stage in STAGES:
        manifests[stage] = run_stage(cfg, stage, run_dir)
    return manifests
