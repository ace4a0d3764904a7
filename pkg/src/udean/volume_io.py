"""Volume containers, file formats, normalization and dataset splits."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

AXIS_LABELS = ("L-R", "A-P", "H-F")
GROUPS = ("source", "target", "validation", "test")
MANIFEST_VERSION = 1


class VolumeError(ValueError):
    pass


@dataclass
class VolumeImage:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    axis_labels: tuple = AXIS_LABELS
    intensity_range: tuple | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise VolumeError(f"expected a 3D array, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.axis_labels = tuple(self.axis_labels)
        if len(self.spacing) != 3 or len(self.axis_labels) != 3:
            raise VolumeError("spacing and axis_labels need one entry per axis")
        bad = [a for a in self.axis_labels if a not in AXIS_LABELS]
        if bad:
            raise VolumeError(f"unknown axis labels {bad}; expected a subset of {AXIS_LABELS}")
        check_finite(self.data)

    @property
    def shape(self):
        return self.data.shape

    def axis(self, label: str) -> int:
        """Array axis carrying the given anatomical direction."""
        try:
            return self.axis_labels.index(label)
        except ValueError:
            raise VolumeError(f"volume has no {label} axis (labels {self.axis_labels})") from None

    def replace(self, **kw) -> "VolumeImage":
        return dataclasses.replace(self, **kw)


def check_finite(data: np.ndarray):
    bad = ~np.isfinite(data)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise VolumeError(f"non-finite value {data[idx]} at voxel {idx}")


def normalize_unit_range(v: VolumeImage) -> VolumeImage:
    lo, hi = float(v.data.min()), float(v.data.max())
    if hi > lo:
        data = (v.data - lo) / (hi - lo)
    else:
        data = np.zeros_like(v.data)
    # keep the first recorded range when normalizing twice
    rng = v.intensity_range if v.intensity_range is not None else (lo, hi)
    return v.replace(data=data, intensity_range=rng)


# --- persistence -----------------------------------------------------------

def _sidecar(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json")


def save_volume(v: VolumeImage, path, format: str | None = None):
    path = Path(path)
    format = format or _guess_format(path)
    if format == "raw-f32":
        data = np.ascontiguousarray(v.data, dtype="<f4")
        path.write_bytes(data.tobytes(order="C"))
        header = {
            "shape": list(v.shape),
            "spacing": list(v.spacing),
            "axis_labels": list(v.axis_labels),
            "intensity_range": None if v.intensity_range is None else list(v.intensity_range),
            "dtype": "float32-le",
            "order": "C",
        }
        _sidecar(path).write_text(json.dumps(header, indent=1) + "\n")
    elif format == "nifti1":
        import nibabel as nib

        affine = np.diag([*v.spacing, 1.0])
        img = nib.Nifti1Image(np.asarray(v.data, dtype=np.float32), affine)
        img.header.set_zooms(v.spacing)
        extra = {"axis_labels": list(v.axis_labels),
                 "intensity_range": None if v.intensity_range is None else list(v.intensity_range)}
        # NIfTI has no slot for anatomical labels of arbitrary axes
        _sidecar(path).write_text(json.dumps(extra) + "\n")
        nib.save(img, str(path))
    else:
        raise VolumeError(f"unknown volume format {format!r}")


def load_volume(path, format: str | None = None) -> VolumeImage:
    path = Path(path)
    if not path.exists():
        raise VolumeError(f"no such volume file: {path}")
    format = format or _guess_format(path)
    if format == "raw-f32":
        side = _sidecar(path)
        if not side.exists():
            raise VolumeError(f"raw-f32 volume {path} has no header {side}")
        header = json.loads(side.read_text())
        shape = tuple(int(s) for s in header["shape"])
        payload = np.frombuffer(path.read_bytes(), dtype="<f4")
        if payload.size != int(np.prod(shape)):
            raise VolumeError(
                f"header shape {shape} needs {int(np.prod(shape))} floats, file holds {payload.size}")
        data = payload.reshape(shape).astype(np.float32)
        rng = header.get("intensity_range")
        return VolumeImage(data, header["spacing"], header["axis_labels"],
                           None if rng is None else tuple(rng))
    if format == "nifti1":
        import nibabel as nib

        try:
            img = nib.load(str(path))
        except Exception as exc:  # nibabel raises several unrelated types
            raise VolumeError(f"cannot read NIfTI file {path}: {exc}") from exc
        data = np.asarray(img.dataobj, dtype=np.float32)
        if data.ndim == 4 and data.shape[3] == 1:
            data = data[..., 0]
        extra = {}
        side = _sidecar(path)
        if side.exists():
            extra = json.loads(side.read_text())
        rng = extra.get("intensity_range")
        return VolumeImage(data, tuple(float(z) for z in img.header.get_zooms()[:3]),
                           extra.get("axis_labels", AXIS_LABELS), None if rng is None else tuple(rng))
    raise VolumeError(f"unknown volume format {format!r}")


def _guess_format(path: Path) -> str:
    name = path.name
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return "nifti1"
    return "raw-f32"


# --- dataset manifests -----------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    participant_id: str
    group: str
    volume_path: str
    role: str  # "HR" or "LR"


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    seed: int = 0
    mode: str = "unpaired"

    def ids(self, group: str) -> list:
        seen = []
        for e in self.entries:
            if e.group == group and e.participant_id not in seen:
                seen.append(e.participant_id)
        return seen

    def paths(self, group: str, role: str) -> list:
        return [e.volume_path for e in self.entries if e.group == group and e.role == role]

    def path_for(self, group: str, role: str, participant_id: str) -> str:
        for e in self.entries:
            if (e.group, e.role, e.participant_id) == (group, role, participant_id):
                return e.volume_path
        raise KeyError((group, role, participant_id))

    def validate(self):
        src = set(self.ids("source"))
        others = set(self.ids("target")) | set(self.ids("validation")) | set(self.ids("test"))
        if self.mode == "unpaired" and src & others:
            raise VolumeError(f"unpaired manifest shares ids between source and other groups: "
                              f"{sorted(src & others)[:5]}")
        if self.mode == "misaligned" and src != set(self.ids("target")):
            raise VolumeError("misaligned manifest needs identical source and target ids")

    def save(self, path):
        lines = [json.dumps({"version": MANIFEST_VERSION, "seed": self.seed, "mode": self.mode})]
        lines += [json.dumps(dataclasses.asdict(e)) for e in self.entries]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        lines = Path(path).read_text().splitlines()
        head = json.loads(lines[0])
        if head.get("version") != MANIFEST_VERSION:
            raise VolumeError(f"unsupported manifest version {head.get('version')}")
        entries = [ManifestEntry(**json.loads(line)) for line in lines[1:] if line.strip()]
        return cls(entries, head["seed"], head["mode"])

    def resolve(self, base) -> "DatasetManifest":
        """Copy with relative volume paths made absolute against ``base``."""
        base = Path(base)
        entries = [dataclasses.replace(e, volume_path=str(base / e.volume_path))
                   if not os.path.isabs(e.volume_path) else e for e in self.entries]
        return DatasetManifest(entries, self.seed, self.mode)


def split_groups(ids, counts, seed: int, mode: str = "unpaired") -> DatasetManifest:
    """Randomly assign participants to source/target/validation/test.

    Entries carry no file paths yet; ``volume_path`` is left empty and filled
    in by the data preparation step. Misaligned mode reuses the target ids as
    the source group (the HR copies are deformed later), so ``counts[0]`` must
    equal ``counts[1]``.
    """
    ids = list(ids)
    counts = [int(c) for c in counts]
    if len(counts) != 4:
        raise VolumeError("counts need four entries: source/target/validation/test")
    if mode not in ("unpaired", "misaligned"):
        raise VolumeError(f"unknown split mode {mode!r}")
    need = sum(counts) if mode == "unpaired" else sum(counts[1:])
    if need > len(ids):
        raise VolumeError(f"{mode} split needs {need} participants, only {len(ids)} given")
    if mode == "misaligned" and counts[0] != counts[1]:
        raise VolumeError("misaligned mode needs equal source and target counts")

    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    groups = {}
    if mode == "unpaired":
        start = 0
        for g, n in zip(GROUPS, counts):
            groups[g] = shuffled[start:start + n]
            start += n
    else:
        start = 0
        for g, n in zip(GROUPS[1:], counts[1:]):
            groups[g] = shuffled[start:start + n]
            start += n
        groups["source"] = list(groups["target"])

    entries = []
    for g in GROUPS:
        for pid in groups[g]:
            roles = ("HR",) if g == "source" else ("LR",) if g == "target" else ("LR", "HR")
            entries += [ManifestEntry(str(pid), g, "", r) for r in roles]
    manifest = DatasetManifest(entries, seed, mode)
    manifest.validate()
    return manifest
