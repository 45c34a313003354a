"""ROI cropping and intensity rescaling.

Translation works on the central in-plane window ``[W/4:3W/4, H/4:3H/4]`` of
each transverse slice; segmentation works on the 3D window
``[W/4:3W/4, 3H/8:3H/4, 0:D]``. Fractional bounds are floored.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabelMap, Volume
from .errors import ValidationError


@dataclass(frozen=True)
class RoiBox:
    """Half-open voxel index ranges of a crop, in the uncropped frame."""

    x0: int
    x1: int
    y0: int
    y1: int
    z0: int = 0
    z1: int = 1

    def __post_init__(self):
        if not (0 <= self.x0 < self.x1 and 0 <= self.y0 < self.y1 and 0 <= self.z0 < self.z1):
            raise ValidationError(f"degenerate or negative ROI box {self.as_tuple()}")

    def as_tuple(self) -> tuple[int, int, int, int, int, int]:
        return (self.x0, self.x1, self.y0, self.y1, self.z0, self.z1)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.x1 - self.x0, self.y1 - self.y0, self.z1 - self.z0)

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return (slice(self.x0, self.x1), slice(self.y0, self.y1), slice(self.z0, self.z1))

    def fits(self, shape) -> bool:
        return self.x1 <= shape[0] and self.y1 <= shape[1] and (len(shape) < 3 or self.z1 <= shape[2])

    def relative_to(self, outer: "RoiBox") -> "RoiBox":
        """Express this box in the frame of an already-cropped ``outer`` box."""
        if not (
            outer.x0 <= self.x0 and self.x1 <= outer.x1
            and outer.y0 <= self.y0 and self.y1 <= outer.y1
            and outer.z0 <= self.z0 and self.z1 <= outer.z1
        ):
            raise ValidationError(f"box {self.as_tuple()} is not inside {outer.as_tuple()}")
        return RoiBox(
            self.x0 - outer.x0, self.x1 - outer.x0,
            self.y0 - outer.y0, self.y1 - outer.y0,
            self.z0 - outer.z0, self.z1 - outer.z0,
        )

    @classmethod
    def from_tuple(cls, t) -> "RoiBox":
        return cls(*(int(i) for i in t))


def roi_2d(w: int, h: int, d: int = 1) -> RoiBox:
    if w < 8 or h < 8:
        raise ValidationError(f"in-plane size {w}x{h} below minimum 8x8")
    return RoiBox(w // 4, (3 * w) // 4, h // 4, (3 * h) // 4, 0, d)


def roi_3d(w: int, h: int, d: int) -> RoiBox:
    if w < 8 or h < 8 or d < 1:
        raise ValidationError(f"volume size {w}x{h}x{d} below minimum 8x8x1")
    return RoiBox(w // 4, (3 * w) // 4, (3 * h) // 8, (3 * h) // 4, 0, d)


def crop_roi_2d(slice2d: np.ndarray) -> tuple[np.ndarray, RoiBox]:
    a = np.asarray(slice2d)
    if a.ndim != 2:
        raise ValidationError(f"expected a 2D slice, got shape {a.shape}")
    box = roi_2d(*a.shape)
    return a[box.x0:box.x1, box.y0:box.y1].copy(), box


def _crop_volume(v: Volume, box: RoiBox) -> Volume:
    if not box.fits(v.shape):
        raise ValidationError(f"box {box.as_tuple()} exceeds volume shape {v.shape}")
    if v.roi is not None:
        parent = RoiBox.from_tuple(v.roi)
        absolute = RoiBox(
            parent.x0 + box.x0, parent.x0 + box.x1,
            parent.y0 + box.y0, parent.y0 + box.y1,
            parent.z0 + box.z0, parent.z0 + box.z1,
        )
    else:
        absolute = box
    return v.replace(voxels=v.voxels[box.slices], roi=absolute.as_tuple())


def crop_roi_3d(v: Volume) -> tuple[Volume, RoiBox]:
    box = roi_3d(*v.shape)
    return _crop_volume(v, box), box


def crop_slices_2d(v: Volume) -> tuple[Volume, RoiBox]:
    """Apply the 2D ROI to every transverse slice of ``v`` at once."""
    box = roi_2d(*v.shape)
    return _crop_volume(v, box), box


def crop_to_box(v: Volume, box: RoiBox) -> Volume:
    """Crop with an explicit box given in ``v``'s own index frame."""
    return _crop_volume(v, box)


def crop_labels(labels: LabelMap, box: RoiBox) -> LabelMap:
    if not box.fits(labels.shape):
        raise ValidationError(f"box {box.as_tuple()} exceeds label shape {labels.shape}")
    return LabelMap(labels.labels[box.slices])


def normalize_intensity(v: Volume) -> Volume:
    """Min-max rescale to [0, 255]; a constant volume maps to all zeros."""
    x = v.voxels.astype(np.float64)
    lo, hi = x.min(), x.max()
    if hi > lo:
        out = 255.0 * (x - lo) / (hi - lo)
    else:
        out = np.zeros_like(x)
    return v.replace(voxels=out.astype(np.float32))
