"""Volumetric data types, native file IO and the two-domain phantom generator.

The native on-disk format is a pair of files sharing a stem:

* ``<stem>.pvol.json`` -- JSON header (shape, spacing, dtype, tags)
* ``<stem>.pvol.raw``  -- little-endian payload in x-fastest (Fortran) order

Images are stored as 32-bit floats, label maps and ignore masks as uint8.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import HeaderError, IngestionError, PayloadMismatchError, ValidationError

N_CLASSES = 3
BACKGROUND, VS, COCHLEA = 0, 1, 2
CLASS_NAMES = {BACKGROUND: "background", VS: "VS", COCHLEA: "cochlea"}

HEADER_SUFFIX = ".pvol.json"
PAYLOAD_SUFFIX = ".pvol.raw"
FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "uint8": "u1"}


class Domain(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


class Protocol(str, enum.Enum):
    P448 = "p448"
    P384 = "p384"
    SYNTHETIC = "synthetic"


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar image of shape (W, H, D) with acquisition tags."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    domain: Domain = Domain.SOURCE
    protocol: Protocol = Protocol.SYNTHETIC
    case_id: str = ""
    roi: tuple[int, ...] | None = None

    def __post_init__(self):
        vox = np.array(self.voxels, dtype=np.float32, order="C", copy=True)
        if vox.ndim != 3:
            raise ValidationError(f"volume must be 3D, got shape {vox.shape}")
        w, h, d = vox.shape
        if w < 8 or h < 8 or d < 1:
            raise ValidationError(f"volume shape {vox.shape} below minimum (8, 8, 1)")
        if not np.all(np.isfinite(vox)):
            raise ValidationError("volume contains non-finite voxels")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
            raise ValidationError(f"spacing must be 3 positive reals, got {self.spacing}")
        if self.roi is not None and len(self.roi) != 6:
            raise ValidationError("roi must hold 6 integers (x0, x1, y0, y1, z0, z1)")
        object.__setattr__(self, "voxels", _readonly(vox))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "domain", Domain(self.domain))
        object.__setattr__(self, "protocol", Protocol(self.protocol))
        object.__setattr__(self, "case_id", str(self.case_id))
        if self.roi is not None:
            object.__setattr__(self, "roi", tuple(int(i) for i in self.roi))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def replace(self, **changes) -> "Volume":
        fields = dict(
            voxels=self.voxels,
            spacing=self.spacing,
            domain=self.domain,
            protocol=self.protocol,
            case_id=self.case_id,
            roi=self.roi,
        )
        fields.update(changes)
        return Volume(**fields)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.voxels.tobytes() == other.voxels.tobytes()
            and self.spacing == other.spacing
            and self.domain == other.domain
            and self.protocol == other.protocol
            and self.case_id == other.case_id
            and self.roi == other.roi
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Integer class map with values in {0=background, 1=VS, 2=cochlea}."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 3:
            raise ValidationError(f"label map must be 3D, got shape {lab.shape}")
        if lab.size and (lab.min() < 0 or lab.max() >= N_CLASSES):
            raise ValidationError("label values must lie in {0, 1, 2}")
        object.__setattr__(self, "labels", _readonly(np.array(lab, dtype=np.uint8, order="C")))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape

    def counts(self) -> dict[int, int]:
        return {c: int(np.count_nonzero(self.labels == c)) for c in range(N_CLASSES)}

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.labels, other.labels)

    __hash__ = None


def check_pair(volume: Volume, labels: LabelMap) -> None:
    if volume.shape != labels.shape:
        raise ValidationError(
            f"label shape {labels.shape} does not match volume shape {volume.shape}"
        )


@dataclass(frozen=True)
class TrainingView:
    """The part of a dataset that training code is allowed to see."""

    source_cases: tuple[tuple[Volume, LabelMap], ...]
    target_cases: tuple[Volume, ...]


@dataclass(frozen=True)
class Dataset:
    source_cases: tuple[tuple[Volume, LabelMap], ...]
    target_cases: tuple[Volume, ...]
    target_truth: tuple[LabelMap, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "source_cases", tuple(tuple(c) for c in self.source_cases))
        object.__setattr__(self, "target_cases", tuple(self.target_cases))
        for vol, lab in self.source_cases:
            check_pair(vol, lab)
        if self.target_truth is not None:
            truth = tuple(self.target_truth)
            if len(truth) != len(self.target_cases):
                raise ValidationError("target_truth must align one-to-one with target_cases")
            for vol, lab in zip(self.target_cases, truth):
                check_pair(vol, lab)
            object.__setattr__(self, "target_truth", truth)

    def training_view(self) -> TrainingView:
        return TrainingView(self.source_cases, self.target_cases)

    def evaluation_cases(self) -> list[tuple[Volume, LabelMap]]:
        if self.target_truth is None:
            raise ValidationError("dataset carries no held-out target truth")
        return list(zip(self.target_cases, self.target_truth))

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        if (self.target_truth is None) != (other.target_truth is None):
            return False
        return (
            len(self.source_cases) == len(other.source_cases)
            and all(a == b for a, b in zip(self.source_cases, other.source_cases))
            and self.target_cases == other.target_cases
            and (self.target_truth is None or self.target_truth == other.target_truth)
        )


# --------------------------------------------------------------------------
# Native IO
# --------------------------------------------------------------------------


def _stem(path) -> Path:
    p = Path(path)
    name = p.name
    for suffix in (HEADER_SUFFIX, PAYLOAD_SUFFIX):
        if name.endswith(suffix):
            return p.with_name(name[: -len(suffix)])
    return p


def header_path(path) -> Path:
    s = _stem(path)
    return s.with_name(s.name + HEADER_SUFFIX)


def payload_path(path) -> Path:
    s = _stem(path)
    return s.with_name(s.name + PAYLOAD_SUFFIX)


def _write_pair(path, array: np.ndarray, dtype: str, meta: dict) -> list[Path]:
    hdr = {"format": "pvol", "version": FORMAT_VERSION, "shape": list(array.shape), "dtype": dtype}
    hdr.update(meta)
    hp, pp = header_path(path), payload_path(path)
    hp.parent.mkdir(parents=True, exist_ok=True)
    hp.write_text(json.dumps(hdr, indent=2, sort_keys=True) + "\n")
    pp.write_bytes(np.asarray(array).astype(_DTYPES[dtype]).tobytes(order="F"))
    return [hp, pp]


def _read_pair(path, expect_dtype: str) -> tuple[np.ndarray, dict]:
    hp, pp = header_path(path), payload_path(path)
    text = hp.read_text()
    try:
        hdr = json.loads(text)
    except json.JSONDecodeError as exc:
        raise HeaderError(f"{hp}: header is not valid JSON ({exc})") from exc
    if not isinstance(hdr, dict) or hdr.get("format") != "pvol":
        raise HeaderError(f"{hp}: not a pvol header")
    try:
        shape = tuple(int(s) for s in hdr["shape"])
        dtype = str(hdr["dtype"])
    except (KeyError, TypeError, ValueError) as exc:
        raise HeaderError(f"{hp}: missing or malformed shape/dtype") from exc
    if len(shape) != 3 or any(s < 0 for s in shape):
        raise HeaderError(f"{hp}: shape must hold 3 non-negative integers, got {shape}")
    if dtype != expect_dtype:
        raise HeaderError(f"{hp}: expected dtype {expect_dtype}, header says {dtype}")
    raw = pp.read_bytes()
    np_dtype = np.dtype(_DTYPES[dtype])
    expected = int(np.prod(shape)) * np_dtype.itemsize
    if len(raw) != expected:
        raise PayloadMismatchError(
            f"{pp}: payload holds {len(raw)} bytes, header shape {shape} needs {expected}"
        )
    arr = np.frombuffer(raw, dtype=np_dtype).reshape(shape, order="F")
    return np.ascontiguousarray(arr), hdr


def save_volume(v: Volume, path) -> list[Path]:
    """Write ``v`` as a header/payload pair; returns the two paths written."""
    meta = {
        "spacing": list(v.spacing),
        "domain": v.domain.value,
        "protocol": v.protocol.value,
        "case_id": v.case_id,
        "roi": list(v.roi) if v.roi is not None else None,
    }
    return _write_pair(path, v.voxels, "float32", meta)


def load_volume(path) -> Volume:
    arr, hdr = _read_pair(path, "float32")
    try:
        spacing = tuple(float(s) for s in hdr["spacing"])
        domain, protocol = hdr["domain"], hdr["protocol"]
        case_id = hdr.get("case_id", "")
        roi = hdr.get("roi")
    except (KeyError, TypeError, ValueError) as exc:
        raise HeaderError(f"{header_path(path)}: missing volume metadata") from exc
    try:
        domain, protocol = Domain(domain), Protocol(protocol)
    except ValueError as exc:
        raise HeaderError(f"{header_path(path)}: {exc}") from exc
    return Volume(arr, spacing, domain, protocol, case_id, tuple(roi) if roi else None)


def save_labels(labels: LabelMap, path) -> list[Path]:
    return _write_pair(path, labels.labels, "uint8", {"kind": "labels"})


def load_labels(path) -> LabelMap:
    arr, _ = _read_pair(path, "uint8")
    return LabelMap(arr)


def save_mask(mask: np.ndarray, path) -> list[Path]:
    return _write_pair(path, np.asarray(mask, dtype=np.uint8), "uint8", {"kind": "mask"})


def load_mask(path) -> np.ndarray:
    arr, _ = _read_pair(path, "uint8")
    return arr.astype(bool)


# --------------------------------------------------------------------------
# NIfTI ingestion
# --------------------------------------------------------------------------

_PROTOCOL_BY_DIM = {448: Protocol.P448, 384: Protocol.P384}


def infer_protocol(shape) -> Protocol:
    w, h = shape[0], shape[1]
    if w == h and w in _PROTOCOL_BY_DIM:
        return _PROTOCOL_BY_DIM[w]
    return Protocol.SYNTHETIC


def ingest_nifti(path, domain=Domain.TARGET, protocol=None, case_id=None) -> Volume:
    """Read a single-channel NIfTI-1 file into a Volume.

    ``protocol`` defaults to the one implied by the in-plane size (448 or 384);
    other sizes are tagged ``synthetic`` unless the caller says otherwise.
    """
    import nibabel as nib

    path = Path(path)
    try:
        img = nib.load(str(path))
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise IngestionError(f"{path}: cannot read NIfTI ({exc})") from exc
    if not isinstance(img, nib.Nifti1Image):
        raise IngestionError(f"{path}: not a NIfTI-1 image")
    dtype = img.get_data_dtype()
    if dtype.fields is not None or dtype.kind not in "uif":
        raise IngestionError(f"{path}: unsupported datatype {dtype}")
    shape = img.shape
    if len(shape) == 4 and shape[3] == 1:
        shape = shape[:3]
    if len(shape) != 3:
        raise IngestionError(f"{path}: expected a 3D single-channel image, got shape {img.shape}")
    data = np.asarray(img.dataobj, dtype=np.float64).reshape(shape)
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    if protocol is None:
        protocol = infer_protocol(shape)
    if case_id is None:
        case_id = path.name.split(".")[0]
    return Volume(data.astype(np.float32), spacing, Domain(domain), Protocol(protocol), case_id)


# --------------------------------------------------------------------------
# Dataset manifests
# --------------------------------------------------------------------------


def save_dataset(ds: Dataset, root) -> list[Path]:
    """Write every case plus ``manifest.json`` (training-facing) and, when
    target truth exists, ``heldout.json`` listing the target labels."""
    root = Path(root)
    written: list[Path] = []
    entries, heldout = [], []
    for vol, lab in ds.source_cases:
        vpath, lpath = f"images/{vol.case_id}", f"labels/{vol.case_id}"
        written += save_volume(vol, root / vpath)
        written += save_labels(lab, root / lpath)
        entries.append(_entry(vol, vpath, lpath))
    for i, vol in enumerate(ds.target_cases):
        vpath = f"images/{vol.case_id}"
        written += save_volume(vol, root / vpath)
        entries.append(_entry(vol, vpath, None))
        if ds.target_truth is not None:
            lpath = f"heldout/{vol.case_id}"
            written += save_labels(ds.target_truth[i], root / lpath)
            heldout.append({"case_id": vol.case_id, "label_path": lpath})
    written.append(_write_json(root / "manifest.json", entries))
    if ds.target_truth is not None:
        written.append(_write_json(root / "heldout.json", heldout))
    return written


def _entry(vol: Volume, vpath: str, lpath: str | None) -> dict:
    e = {
        "case_id": vol.case_id,
        "volume_path": vpath,
        "domain": vol.domain.value,
        "protocol": vol.protocol.value,
    }
    if lpath is not None:
        e["label_path"] = lpath
    return e


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(root) -> list[dict]:
    path = Path(root) / "manifest.json"
    entries = json.loads(path.read_text())
    for e in entries:
        missing = {"case_id", "volume_path", "domain", "protocol"} - set(e)
        if missing:
            raise ValidationError(f"{path}: entry {e.get('case_id')} lacks {sorted(missing)}")
    return entries


def load_training_view(root) -> TrainingView:
    root = Path(root)
    source, target = [], []
    for e in load_manifest(root):
        vol = load_volume(root / e["volume_path"])
        if e["domain"] == Domain.SOURCE.value:
            if "label_path" not in e:
                raise ValidationError(f"source case {e['case_id']} has no label_path")
            source.append((vol, load_labels(root / e["label_path"])))
        else:
            target.append(vol)
    return TrainingView(tuple(source), tuple(target))


def load_dataset(root, with_truth: bool = False) -> Dataset:
    root = Path(root)
    view = load_training_view(root)
    truth = None
    if with_truth:
        held = {h["case_id"]: h["label_path"] for h in json.loads((root / "heldout.json").read_text())}
        truth = [load_labels(root / held[v.case_id]) for v in view.target_cases]
    return Dataset(view.source_cases, view.target_cases, truth)


# --------------------------------------------------------------------------
# Phantom generator
# --------------------------------------------------------------------------

SOURCE_LEVELS = {"background": 0.25, "texture": 0.06, "fluid": 0.03, VS: 0.9, COCHLEA: 0.6}
N_FLUID_BLOBS = (2, 4)
TARGET_GAMMA = 1.8

# per-protocol appearance of the target domain: band-limited texture amplitude,
# texture band (sigma_lo, sigma_hi) and multiplicative bias-field amplitude
_TARGET_PROTOCOL_STYLE = {
    Protocol.P448: {"texture": 0.05, "band": (0.8, 2.0), "bias": 0.0},
    Protocol.P384: {"texture": 0.10, "band": (1.5, 4.0), "bias": 0.35},
}
_ROUND_ROBIN = (Protocol.P448, Protocol.P384)


@dataclass(frozen=True)
class PhantomSpec:
    n_source: int = 8
    n_target: int = 8
    shape: tuple[int, int, int] = (64, 64, 12)
    rng_seed: int = 0
    shift_strength: float = 1.0
    spacing: tuple[float, float, float] = field(default=(0.5, 0.5, 1.5))

    def validate(self) -> None:
        problems = []
        if self.n_source < 1 or self.n_target < 1:
            problems.append("n_source and n_target must be >= 1")
        if len(self.shape) != 3:
            problems.append("shape must be (W, H, D)")
        else:
            w, h, d = self.shape
            if w < 16 or h < 16 or d < 1:
                problems.append(f"shape {tuple(self.shape)} too small for a phantom (min 16x16x1)")
        if not 0.0 <= self.shift_strength <= 1.0:
            problems.append("shift_strength must lie in [0, 1]")
        if problems:
            raise ValidationError("; ".join(problems))


def roi_box_3d(shape) -> tuple[int, int, int, int, int, int]:
    """The 3D segmentation ROI as (x0, x1, y0, y1, z0, z1)."""
    w, h, d = shape
    return (w // 4, (3 * w) // 4, (3 * h) // 8, (3 * h) // 4, 0, d)


def _band_noise(rng, shape, lo, hi):
    white = rng.standard_normal(shape)
    band = ndimage.gaussian_filter(white, lo) - ndimage.gaussian_filter(white, hi)
    return band / (band.std() + 1e-12)


def _ellipsoid(shape, center, radii, angle=0.0):
    x, y, z = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")
    dx, dy, dz = x - center[0], y - center[1], z - center[2]
    c, s = math.cos(angle), math.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    return (u / radii[0]) ** 2 + (v / radii[1]) ** 2 + (dz / radii[2]) ** 2 <= 1.0


def _sample_geometry(rng, shape) -> np.ndarray:
    x0, x1, y0, y1, _, _ = roi_box_3d(shape)
    d = shape[2]
    half = (x1 - x0) / 2.0
    roi_h = y1 - y0
    labels = np.zeros(shape, dtype=np.uint8)

    # VS: larger blob in the left half of the ROI
    r_cap = max(1.0, min(half / 2.0 - 1.0, roi_h / 2.0 - 1.0))
    rx = rng.uniform(0.55, 0.85) * r_cap
    ry = rng.uniform(0.55, 0.85) * r_cap
    rz = max(0.75, rng.uniform(0.25, 0.4) * d)
    cx = rng.uniform(x0 + rx + 0.5, x0 + half - rx - 0.5) if half - 2 * rx > 1 else x0 + half / 2
    cy = rng.uniform(y0 + ry + 0.5, y1 - ry - 1.5) if roi_h - 2 * ry > 2 else (y0 + y1 - 1) / 2
    cz = rng.uniform(rz - 0.5, d - rz - 0.5) if d - 2 * rz > 1 else (d - 1) / 2
    vs = _ellipsoid(shape, (cx, cy, cz), (rx, ry, rz))
    labels[vs] = VS
    labels[int(round(cx)), int(round(cy)), int(round(cz))] = VS

    # cochlea: small elongated structure in the right half
    c_cap = max(1.0, min(half / 2.0 - 1.0, roi_h / 2.0 - 1.0))
    ra = rng.uniform(0.45, 0.6) * c_cap
    rb = rng.uniform(1.1, 1.5)
    rcz = max(0.75, rng.uniform(0.15, 0.25) * d)
    angle = rng.uniform(0.0, math.pi)
    ccx = rng.uniform(x0 + half + ra + 0.5, x1 - ra - 1.5) if half - 2 * ra > 2 else x0 + 1.5 * half
    ccy = rng.uniform(y0 + ra + 0.5, y1 - ra - 1.5) if roi_h - 2 * ra > 2 else (y0 + y1 - 1) / 2
    ccz = rng.uniform(rcz - 0.5, d - rcz - 0.5) if d - 2 * rcz > 1 else (d - 1) / 2
    coch = _ellipsoid(shape, (ccx, ccy, ccz), (ra, rb, rcz), angle) & (labels == 0)
    labels[coch] = COCHLEA
    labels[int(round(ccx)), int(round(ccy)), int(round(ccz))] = COCHLEA

    outside = np.ones(shape, dtype=bool)
    outside[x0:x1, y0:y1, :] = False
    labels[outside] = 0
    return labels


def _fluid_mask(rng, labels) -> np.ndarray:
    """Unlabeled dark blobs of VS-like size that never touch a structure."""
    shape = labels.shape
    x0, x1, y0, y1, _, _ = roi_box_3d(shape)
    keep_out = ndimage.binary_dilation(labels > 0, iterations=2)
    fluid = np.zeros(shape, dtype=bool)
    r_cap = max(1.0, min((x1 - x0) / 4.0 - 1.0, (y1 - y0) / 2.0 - 1.0))
    for _ in range(int(rng.integers(*N_FLUID_BLOBS, endpoint=True))):
        for _attempt in range(50):
            radii = (
                rng.uniform(0.4, 0.8) * r_cap,
                rng.uniform(0.4, 0.8) * r_cap,
                max(0.75, rng.uniform(0.2, 0.4) * shape[2]),
            )
            center = (
                rng.uniform(x0, x1),
                rng.uniform(y0, y1),
                rng.uniform(0, shape[2] - 1),
            )
            blob = _ellipsoid(shape, center, radii, rng.uniform(0.0, math.pi))
            if not (blob & keep_out).any():
                fluid |= blob
                break
    return fluid


def _render_source(rng, labels) -> np.ndarray:
    shape = labels.shape
    lv = SOURCE_LEVELS
    img = lv["background"] + lv["texture"] * _band_noise(rng, shape, 1.0, 3.0)
    img = np.where(_fluid_mask(rng, labels), lv["fluid"], img)
    img = np.where(labels == VS, lv[VS], img)
    img = np.where(labels == COCHLEA, lv[COCHLEA], img)
    img = ndimage.gaussian_filter(img, 0.5) + 0.02 * rng.standard_normal(shape)
    return np.clip(img, 0.0, 1.0)


def _target_appearance(rng, img, protocol, strength) -> np.ndarray:
    style = _TARGET_PROTOCOL_STYLE.get(protocol, _TARGET_PROTOCOL_STYLE[Protocol.P448])
    shape = img.shape
    texture = style["texture"] * _band_noise(rng, shape, *style["band"])
    gx = np.linspace(-1.0, 1.0, shape[0])[:, None, None]
    gy = np.linspace(-1.0, 1.0, shape[1])[None, :, None]
    bias = 1.0 + style["bias"] * (0.5 * gx + 0.5 * gy)
    shifted = bias * (1.0 - img) ** TARGET_GAMMA + texture
    return (1.0 - strength) * img + strength * shifted


def generate_phantom(spec: PhantomSpec) -> Dataset:
    """Synthesize a labeled source set and an unlabeled target set.

    Both domains share the geometry distribution; the target appearance is
    inverted, gamma-warped and textured, blended in by ``shift_strength``.
    Target labels are returned only as ``target_truth``.
    """
    spec.validate()
    shape = tuple(int(s) for s in spec.shape)
    rng = np.random.default_rng(spec.rng_seed)
    source, target, truth = [], [], []
    for i in range(spec.n_source):
        labels = _sample_geometry(rng, shape)
        img = _render_source(rng, labels)
        protocol = _ROUND_ROBIN[i % len(_ROUND_ROBIN)]
        vol = Volume(img, spec.spacing, Domain.SOURCE, protocol, f"src{i:03d}")
        source.append((vol, LabelMap(labels)))
    for i in range(spec.n_target):
        labels = _sample_geometry(rng, shape)
        img = _render_source(rng, labels)
        protocol = _ROUND_ROBIN[i % len(_ROUND_ROBIN)]
        img = _target_appearance(rng, img, protocol, spec.shift_strength)
        target.append(Volume(img, spec.spacing, Domain.TARGET, protocol, f"tgt{i:03d}"))
        truth.append(LabelMap(labels))
    return Dataset(source, target, truth)
