"""Synthetic degradation: K-space truncation, inter-scan misalignment, phantoms, patches."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage
from scipy.interpolate import CubicSpline

from .volume_io import VolumeImage, normalize_unit_range

SUPPORTED_SCALES = ((2, 2, 1), (2, 2, 2))
IMAG_TOL = 1e-9


class DegradationError(ValueError):
    pass


@dataclass(frozen=True)
class ScaleFactor:
    sx: int = 2
    sy: int = 2
    sz: int = 2

    def __post_init__(self):
        if min(self.as_tuple()) < 1:
            raise DegradationError(f"scale factors must be positive, got {self.as_tuple()}")

    def as_tuple(self):
        return (self.sx, self.sy, self.sz)

    def __iter__(self):
        return iter(self.as_tuple())

    @property
    def volume(self) -> int:
        return self.sx * self.sy * self.sz

    @classmethod
    def parse(cls, text) -> "ScaleFactor":
        if isinstance(text, ScaleFactor):
            return text
        if isinstance(text, str):
            parts = text.lower().split("x")
        else:
            parts = list(text)
        if len(parts) != 3:
            raise DegradationError(f"cannot parse scale {text!r}; expected e.g. '2x2x2'")
        return cls(*(int(p) for p in parts))

    def __str__(self):
        return "x".join(str(s) for s in self)


def _check_divisible(shape, s: ScaleFactor):
    for n, k in zip(shape, s):
        if n % k:
            raise DegradationError(f"volume shape {tuple(shape)} is not divisible by scale {s}")


# --- K-space truncation ----------------------------------------------------

def _crop_slices(shape, s):
    """Slices of the fftshift-ed spectrum keeping bins [-m, m-1] (m = n/(2s)) per axis."""
    out = []
    for n, k in zip(shape, s):
        small = n // k
        start = n // 2 - small // 2
        out.append(slice(start, start + small))
    return tuple(out)


def _nyquist_free(spec_small, shape_small, s):
    """Zero the unpaired Nyquist slab on every truncated axis (unshifted layout)."""
    spec = spec_small.copy()
    for ax, (n, k) in enumerate(zip(shape_small, s)):
        if k > 1 and n % 2 == 0:
            idx = [slice(None)] * spec.ndim
            idx[ax] = n // 2
            spec[tuple(idx)] = 0
    return spec


def kspace_truncate_array(data: np.ndarray, s) -> np.ndarray:
    """Truncate the centered K-space of a real 3D array by the integer factors ``s``.

    Forward DFT unnormalized, inverse on the small grid with 1/M, then an extra
    1/(sx*sy*sz) so that the DC term, and with it the mean, is preserved.
    """
    s = ScaleFactor.parse(s)
    data = np.asarray(data, dtype=np.float64)
    _check_divisible(data.shape, s)
    spec = np.fft.fftshift(np.fft.fftn(data))
    small = np.fft.ifftshift(spec[_crop_slices(data.shape, s)])
    out = np.fft.ifftn(small) / s.volume

    # the lone bin -m has no conjugate partner after an even crop, so its
    # imaginary part is expected; everything else must come out real
    paired = np.fft.ifftn(_nyquist_free(small, small.shape, s)) / s.volume
    scale = max(float(np.abs(out.real).max()), 1e-300)
    if np.abs(paired.imag).max() > IMAG_TOL * scale:
        raise DegradationError(
            f"imaginary residue {np.abs(paired.imag).max():.3e} after truncation; "
            "DFT convention mismatch")
    return out.real


def kspace_truncate(hr: VolumeImage, s) -> VolumeImage:
    s = ScaleFactor.parse(s)
    data = kspace_truncate_array(hr.data, s)
    spacing = tuple(sp * k for sp, k in zip(hr.spacing, s))
    return hr.replace(data=data, spacing=spacing)


def kspace_truncate_torch(x: torch.Tensor, s) -> torch.Tensor:
    """Differentiable twin of :func:`kspace_truncate_array` over the last three dims."""
    s = ScaleFactor.parse(s)
    if s.volume == 1:
        return x
    dims = (-3, -2, -1)
    shape = x.shape[-3:]
    _check_divisible(shape, s)
    spec = torch.fft.fftshift(torch.fft.fftn(x, dim=dims), dim=dims)
    crop = spec[(Ellipsis,) + _crop_slices(shape, s)]
    out = torch.fft.ifftn(torch.fft.ifftshift(crop, dim=dims), dim=dims)
    return out.real / s.volume


# --- misalignment ----------------------------------------------------------

@dataclass
class DeformationParams:
    rot_hf_deg: float = 0.0
    rot_lr_deg: float = 0.0
    trans_hf_vox: float = 0.0
    trans_lr_vox: float = 0.0
    shrink_ap_vox: float = 0.0
    shrink_lr_vox: float = 0.0
    seed: int | None = None

    LIMIT = 2.0

    def __post_init__(self):
        for name in ("rot_hf_deg", "rot_lr_deg", "trans_hf_vox", "trans_lr_vox",
                     "shrink_ap_vox", "shrink_lr_vox"):
            val = getattr(self, name)
            if not 0.0 <= val <= self.LIMIT:
                raise DegradationError(f"{name}={val} outside [0, {self.LIMIT}]")

    @classmethod
    def random(cls, seed: int, max_rot_deg: float = 2.0, max_trans_vox: float = 2.0,
               max_shrink_vox: float = 2.0) -> "DeformationParams":
        rng = np.random.default_rng(seed)
        limits = [max_rot_deg] * 2 + [max_trans_vox] * 2 + [max_shrink_vox] * 2
        return cls(*(float(rng.uniform(0.0, lim)) for lim in limits), seed=seed)


def shrink_factor(extent: int, shrink_vox: float) -> float:
    """Linear scale mapping an extent of ``n`` voxels to ``n - shrink``."""
    return (extent - shrink_vox) / extent


def _rotation(axis_a, axis_b, deg):
    """3x3 rotation in the (axis_a, axis_b) plane."""
    t = np.deg2rad(deg)
    r = np.eye(3)
    r[axis_a, axis_a] = r[axis_b, axis_b] = np.cos(t)
    r[axis_a, axis_b] = -np.sin(t)
    r[axis_b, axis_a] = np.sin(t)
    return r


def rigid_affine(v: VolumeImage, rot_hf_deg=0.0, rot_lr_deg=0.0, trans_hf_vox=0.0,
                 trans_lr_vox=0.0, shrink_ap_vox=0.0, shrink_lr_vox=0.0):
    """(matrix, offset) mapping output voxel indices to input voxel indices.

    Object motion in mm: rotate about H-F, then about L-R, translate along
    H-F and L-R, then shrink A-P and L-R about the volume center. Signed
    values are allowed here; the [0, 2] ranges are enforced by DeformationParams.
    """
    hf, lr, ap = v.axis("H-F"), v.axis("L-R"), v.axis("A-P")
    spacing = np.asarray(v.spacing)
    center_mm = (np.asarray(v.shape) - 1) / 2.0 * spacing

    rot = _rotation(ap, hf, rot_lr_deg) @ _rotation(lr, ap, rot_hf_deg)
    shift = np.zeros(3)
    shift[hf] = trans_hf_vox * spacing[hf]
    shift[lr] = trans_lr_vox * spacing[lr]
    scale = np.ones(3)
    scale[ap] = shrink_factor(v.shape[ap], shrink_ap_vox)
    scale[lr] = shrink_factor(v.shape[lr], shrink_lr_vox)

    # forward: p' = c + S (R (p - c) + t); invert for pull-back resampling
    inv_mm = rot.T @ np.diag(1.0 / scale)
    offset_mm = center_mm - inv_mm @ center_mm - rot.T @ shift
    to_mm = np.diag(spacing)
    to_vox = np.diag(1.0 / spacing)
    return to_vox @ inv_mm @ to_mm, to_vox @ offset_mm


def deform(v: VolumeImage, **motion) -> VolumeImage:
    """Tricubic resampling under :func:`rigid_affine`; voxels from outside the field are 0."""
    matrix, offset = rigid_affine(v, **motion)
    out = ndimage.affine_transform(np.asarray(v.data, dtype=np.float64), matrix, offset,
                                   order=3, mode="grid-constant", cval=0.0)
    return v.replace(data=out)


def apply_misalignment(hr: VolumeImage, d: DeformationParams) -> VolumeImage:
    motion = {k: getattr(d, k) for k in ("rot_hf_deg", "rot_lr_deg", "trans_hf_vox",
                                          "trans_lr_vox", "shrink_ap_vox", "shrink_lr_vox")}
    return deform(hr, **motion)


# --- phantoms --------------------------------------------------------------

def make_phantom(shape=(32, 32, 12), seed: int = 0, spacing=(1.0, 1.0, 1.0)) -> VolumeImage:
    """Random smooth-ellipsoid 'head' with fine sinusoidal texture, normalized to [0, 1]."""
    for n in shape:
        if n % 2:
            raise DegradationError(f"phantom shape {shape} must be even on every axis")
    rng = np.random.default_rng(seed)
    grids = np.meshgrid(*[np.linspace(-1, 1, n) for n in shape], indexing="ij")
    coords = np.stack(grids, axis=-1)

    def ellipsoid(center, radii, angle, edge):
        c, s_ = np.cos(angle), np.sin(angle)
        p = coords - center
        x = c * p[..., 0] - s_ * p[..., 1]
        y = s_ * p[..., 0] + c * p[..., 1]
        r = np.sqrt((x / radii[0]) ** 2 + (y / radii[1]) ** 2 + (p[..., 2] / radii[2]) ** 2)
        return 1.0 / (1.0 + np.exp((r - 1.0) / edge))

    head = ellipsoid(np.zeros(3), rng.uniform(0.75, 0.9, 3), rng.uniform(0, np.pi), 0.03)
    vol = 0.3 * head
    n_blobs = int(rng.integers(5, 16))
    intensities = rng.permutation(np.linspace(0.1, 0.7, n_blobs))
    for k in range(n_blobs):
        center = rng.uniform(-0.45, 0.45, 3)
        radii = rng.uniform(0.12, 0.4, 3)
        sign = 1.0 if k % 3 else -0.5
        vol += sign * intensities[k] * ellipsoid(center, radii, rng.uniform(0, np.pi), 0.05) * head

    # texture near the HR band limit so truncation visibly removes it
    texture = np.zeros(shape)
    for _ in range(3):
        freq = rng.uniform(0.25, 0.42, 3) * np.pi * rng.choice([-1, 1], 3)
        freq[2] *= 0.5
        idx = np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing="ij"), -1)
        texture += np.cos(idx @ freq + rng.uniform(0, 2 * np.pi))
    vol += 0.06 * texture * head
    return normalize_unit_range(VolumeImage(vol, spacing)).replace(intensity_range=None)


# --- patches ---------------------------------------------------------------

@dataclass(frozen=True)
class PatchSpec:
    lr_patch_shape: tuple = (64, 64, 3)
    scale: ScaleFactor = field(default_factory=ScaleFactor)
    batch_size: int = 8

    @property
    def hr_patch_shape(self):
        return tuple(p * k for p, k in zip(self.lr_patch_shape, self.scale))


@dataclass
class PatchPair:
    lr: np.ndarray | None
    hr: np.ndarray | None
    lr_origin: tuple | None
    hr_origin: tuple | None = None


def _origin(rng, vol_shape, patch_shape):
    if any(p > n for p, n in zip(patch_shape, vol_shape)):
        raise DegradationError(f"patch {tuple(patch_shape)} larger than volume {tuple(vol_shape)}")
    return tuple(int(rng.integers(0, n - p + 1)) for n, p in zip(vol_shape, patch_shape))


def _crop(data, origin, shape):
    return data[tuple(slice(o, o + p) for o, p in zip(origin, shape))]


def sample_patches(lr: VolumeImage | None, hr: VolumeImage | None, spec: PatchSpec,
                   rng: np.random.Generator) -> list:
    """Draw ``spec.batch_size`` patches at uniform random origins.

    With both volumes given the HR patch covers the region ``lr_origin * scale``;
    with only one, patches are drawn from it alone (unpaired training draws LR
    target and HR source patches by separate calls).
    """
    if lr is None and hr is None:
        raise DegradationError("need at least one volume to sample from")
    lr_shape, hr_shape = spec.lr_patch_shape, spec.hr_patch_shape
    if lr is not None and hr is not None:
        expect = tuple(n * k for n, k in zip(lr.shape, spec.scale))
        if tuple(hr.shape) != expect:
            raise DegradationError(f"HR shape {hr.shape} != LR shape {lr.shape} * scale {spec.scale}")
    out = []
    for _ in range(spec.batch_size):
        if lr is not None:
            o = _origin(rng, lr.shape, lr_shape)
            ho = tuple(a * k for a, k in zip(o, spec.scale))
            out.append(PatchPair(
                _crop(lr.data, o, lr_shape),
                None if hr is None else _crop(hr.data, ho, hr_shape), o,
                None if hr is None else ho))
        else:
            ho = _origin(rng, hr.shape, hr_shape)
            out.append(PatchPair(None, _crop(hr.data, ho, hr_shape), None, ho))
    return out


# --- baseline interpolation ------------------------------------------------

def tricubic_upsample_array(data: np.ndarray, s) -> np.ndarray:
    """Per-axis not-a-knot cubic spline onto the HR grid; LR sample i sits at HR index s*i."""
    s = ScaleFactor.parse(s)
    out = np.asarray(data, dtype=np.float64)
    for ax, k in enumerate(s):
        if k == 1:
            continue
        n = out.shape[ax]
        if n < 2:
            raise DegradationError("need at least two samples per upsampled axis")
        spline = CubicSpline(np.arange(n), out, axis=ax, bc_type="not-a-knot")
        out = spline(np.arange(n * k) / k)
    return out


def tricubic_upsample(lr: VolumeImage, s) -> VolumeImage:
    s = ScaleFactor.parse(s)
    data = np.clip(tricubic_upsample_array(lr.data, s), 0.0, 1.0)
    return lr.replace(data=data, spacing=tuple(sp / k for sp, k in zip(lr.spacing, s)))
