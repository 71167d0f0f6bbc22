"""Volume, landmark and displacement-field ingestion, preprocessing and persistence.

All grids are indexed (z, y, x); `dims`, `spacing` and point coordinates follow
that axis order. Displacement fields are stored channel-major (3, D, H, W) with
channel 0 = z displacement, in voxel units of their own grid.

Native on-disk format is a flat `key = value` text header next to a raw
little-endian payload (`<stem>.hdr` + `<stem>.raw`). MetaImage headers
(`.mhd`/`.mha`) are parsed for interoperability.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, replace

import numpy as np

HEADER_EXT = ".hdr"
DVF_EXT = ".dvf"
RAW_EXT = ".raw"

_DTYPES = {"i16": np.dtype("<i2"), "f32": np.dtype("<f4")}
_MET_TYPES = {
    "MET_CHAR": np.dtype("<i1"),
    "MET_UCHAR": np.dtype("<u1"),
    "MET_SHORT": np.dtype("<i2"),
    "MET_USHORT": np.dtype("<u2"),
    "MET_INT": np.dtype("<i4"),
    "MET_FLOAT": np.dtype("<f4"),
    "MET_DOUBLE": np.dtype("<f8"),
}


class VolumeFormatError(ValueError):
    """Raised for malformed headers, payload size mismatches or bad values."""


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write `payload` to `path` via a temp file + rename, never leaving partial files."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


@dataclass(frozen=True)
class Volume:
    """Scalar 3D image on a regular grid with physical spacing.

    data    : (D, H, W) array, int16 or float32, finite
    spacing : mm per axis (z, y, x)
    origin  : mm offset of voxel (0, 0, 0)
    units   : "HU" or "normalized"
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    units: str = "HU"

    def __post_init__(self):
        if self.data.ndim != 3:
            raise VolumeFormatError(f"volume data must be 3D, got shape {self.data.shape}")
        if any(n < 1 for n in self.data.shape):
            raise VolumeFormatError(f"degenerate dims {self.data.shape}")
        if any(s <= 0 for s in self.spacing):
            raise VolumeFormatError(f"spacing must be positive, got {self.spacing}")
        if self.units not in ("HU", "normalized"):
            raise VolumeFormatError(f"unknown units {self.units!r}")
        if not np.isfinite(np.asarray(self.data, dtype=np.float64)).all():
            raise VolumeFormatError("volume contains non-finite values")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class Dvf:
    """Dense displacement field, (3, D, H, W) float32, voxel units of its own grid.

    Channel 0 displaces along z, 1 along y, 2 along x; sampling a warped image
    at voxel p reads the source at p + data[:, p].
    """

    data: np.ndarray
    level: int = 0
    grid_tag: str | None = None

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[0] != 3:
            raise ValueError(f"DVF must be (3, D, H, W), got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("DVF contains non-finite values")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])


def zero_dvf(dims: tuple[int, int, int], level: int = 0, grid_tag: str | None = None) -> Dvf:
    return Dvf(np.zeros((3,) + tuple(dims), dtype=np.float32), level=level, grid_tag=grid_tag)


@dataclass(frozen=True)
class CropBox:
    """Axis-aligned voxel box, inclusive-exclusive: lo <= p < hi."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self):
        if any(int(a) >= int(b) for a, b in zip(self.lo, self.hi)):
            raise ValueError(f"empty crop box lo={self.lo} hi={self.hi}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(b) - int(a) for a, b in zip(self.lo, self.hi))

    def check_within(self, dims: tuple[int, int, int]) -> None:
        if any(int(a) < 0 for a in self.lo) or any(int(b) > int(n) for b, n in zip(self.hi, dims)):
            raise ValueError(f"crop box {self.lo}-{self.hi} exceeds volume dims {dims}")


@dataclass(frozen=True)
class LandmarkSet:
    """Paired (moving, fixed) points in continuous voxel coordinates of one grid.

    moving, fixed : (N, 3) float64 arrays, (z, y, x) order, 0-based
    grid_tag      : identifier of the grid the coordinates live on
    spacing       : mm per axis of that grid, for TRE conversion
    flagged       : indices whose mapped coordinates left the target grid
    """

    moving: np.ndarray
    fixed: np.ndarray
    grid_tag: str
    spacing: tuple[float, float, float]
    flagged: tuple[int, ...] = ()

    def __post_init__(self):
        if self.moving.shape != self.fixed.shape or self.moving.ndim != 2 or self.moving.shape[1] != 3:
            raise ValueError(
                f"landmark arrays must be matching (N, 3), got {self.moving.shape} / {self.fixed.shape}"
            )

    def __len__(self) -> int:
        return self.moving.shape[0]

    def check_within(self, dims: tuple[int, int, int]) -> None:
        upper = np.asarray(dims, dtype=np.float64) - 1.0
        for name, pts in (("moving", self.moving), ("fixed", self.fixed)):
            if (pts < 0).any() or (pts > upper).any():
                bad = int(np.argwhere((pts < 0) | (pts > upper))[0][0])
                raise ValueError(f"{name} landmark {bad} outside grid {dims}: {pts[bad]}")


@dataclass(frozen=True)
class GridTransform:
    """Point map between two grids: p -> (p - shift) * scale.

    Built from a crop followed by corner-aligned resampling; `shift` defaults to
    the crop corner. Round-trips with its inverse to < 1e-9 voxels.
    """

    source_dims: tuple[int, int, int]
    target_dims: tuple[int, int, int]
    crop: CropBox | None
    scale: tuple[float, float, float]
    source_tag: str = "source"
    target_tag: str = "target"
    shift: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.shift is None:
            lo = self.crop.lo if self.crop is not None else (0, 0, 0)
            object.__setattr__(self, "shift", tuple(float(v) for v in lo))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return (pts - np.asarray(self.shift)) * np.asarray(self.scale)

    def inverse(self) -> "GridTransform":
        inv_scale = tuple(1.0 / s for s in self.scale)
        inv_shift = tuple(-sh * s for sh, s in zip(self.shift, self.scale))
        return GridTransform(
            source_dims=self.target_dims,
            target_dims=self.source_dims,
            crop=None,
            scale=inv_scale,
            source_tag=self.target_tag,
            target_tag=self.source_tag,
            shift=inv_shift,
        )


def grid_transform_for(
    source_dims: tuple[int, int, int],
    crop: CropBox | None,
    target_dims: tuple[int, int, int],
    source_tag: str = "source",
    target_tag: str = "target",
) -> GridTransform:
    """Transform taking points through crop + corner-aligned resampling."""
    if crop is not None:
        crop.check_within(source_dims)
        inner = crop.dims
    else:
        inner = tuple(source_dims)
    if any(n < 2 for n in target_dims) or any(n < 2 for n in inner):
        raise ValueError(f"corner-aligned scaling needs >= 2 voxels per axis, got {inner} -> {target_dims}")
    scale = tuple((t - 1) / (s - 1) for t, s in zip(target_dims, inner))
    return GridTransform(tuple(source_dims), tuple(target_dims), crop, scale, source_tag, target_tag)


# ---------------------------------------------------------------------------
# preprocessing


def clip_intensities(v: Volume, lo: float, hi: float) -> Volume:
    """Clamp intensities into [lo, hi]; in-range values pass through unchanged."""
    if lo >= hi:
        raise ValueError(f"clip bounds must satisfy lo < hi, got ({lo}, {hi})")
    return replace(v, data=np.clip(v.data, lo, hi))


def crop(v: Volume, box: CropBox) -> Volume:
    """Extract `box`; origin shifts by lo * spacing."""
    box.check_within(v.dims)
    (z0, y0, x0), (z1, y1, x1) = box.lo, box.hi
    data = np.ascontiguousarray(v.data[z0:z1, y0:y1, x0:x1])
    origin = tuple(o + l * s for o, l, s in zip(v.origin, box.lo, v.spacing))
    return replace(v, data=data, origin=origin)


def _resample_axis(data: np.ndarray, axis: int, n_target: int) -> np.ndarray:
    n_src = data.shape[axis]
    if n_target == n_src:
        return data
    # corner-aligned: p_src = p_tgt * (n_src - 1) / (n_tgt - 1)
    pos = np.arange(n_target, dtype=np.float64) * (n_src - 1) / (n_target - 1)
    i0 = np.clip(np.floor(pos).astype(np.int64), 0, n_src - 1)
    i1 = np.minimum(i0 + 1, n_src - 1)
    frac = pos - i0
    a = np.take(data, i0, axis=axis)
    b = np.take(data, i1, axis=axis)
    shape = [1] * data.ndim
    shape[axis] = n_target
    w = frac.reshape(shape)
    return a * (1.0 - w) + b * w


def resample(v: Volume, target_dims: tuple[int, int, int]) -> Volume:
    """Trilinear resampling on the corner-aligned coordinate map.

    Spacing is rescaled so the physical extent between outer voxel centers is
    preserved per axis.
    """
    target_dims = tuple(int(n) for n in target_dims)
    if any(n < 2 for n in target_dims):
        raise ValueError(f"target dims must be >= 2 per axis, got {target_dims}")
    data = np.asarray(v.data, dtype=np.float64)
    for axis in range(3):
        data = _resample_axis(data, axis, target_dims[axis])
    spacing = tuple(s * (n_src - 1) / (n_tgt - 1) for s, n_src, n_tgt in zip(v.spacing, v.dims, target_dims))
    return replace(v, data=data.astype(np.float32), spacing=spacing)


def lung_crop_heuristic(v: Volume, threshold: float = -320.0, pad: int = 5) -> CropBox:
    """Bounding box of the largest connected component below `threshold` HU, padded.

    Rough helper for chest CT; crop boxes are normally user-supplied.
    """
    from scipy import ndimage

    mask = np.asarray(v.data) < threshold
    if not mask.any():
        raise ValueError(f"no voxels below {threshold}")
    labels, n = ndimage.label(mask)
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, n + 1))
    biggest = int(np.argmax(sizes)) + 1
    zs, ys, xs = np.nonzero(labels == biggest)
    lo = tuple(max(0, int(c.min()) - pad) for c in (zs, ys, xs))
    hi = tuple(min(n_ax, int(c.max()) + 1 + pad) for c, n_ax in zip((zs, ys, xs), v.dims))
    return CropBox(lo, hi)


# ---------------------------------------------------------------------------
# landmarks


def load_landmarks(
    moving_path: str,
    fixed_path: str,
    grid_tag: str,
    spacing: tuple[float, float, float],
    dims: tuple[int, int, int] | None = None,
    one_based: bool = True,
) -> LandmarkSet:
    """Read paired DirLab-style landmark files: one `x y z` triple per line.

    Indices are 1-based on disk by DirLab convention and converted to 0-based
    (z, y, x) internally. Line counts of the two files must match.
    """
    mov = _read_points(moving_path, one_based)
    fix = _read_points(fixed_path, one_based)
    if mov.shape[0] != fix.shape[0]:
        raise ValueError(
            f"landmark count mismatch: {moving_path} has {mov.shape[0]}, {fixed_path} has {fix.shape[0]}"
        )
    lms = LandmarkSet(mov, fix, grid_tag, tuple(float(s) for s in spacing))
    if dims is not None:
        lms.check_within(dims)
    return lms


def _read_points(path: str, one_based: bool) -> np.ndarray:
    points = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
            try:
                x, y, z = (float(p) for p in parts)
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: unparsable line {line!r}") from e
            points.append((z, y, x))
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return pts - 1.0 if one_based else pts


def save_landmarks(lms: LandmarkSet, moving_path: str, fixed_path: str, one_based: bool = True) -> None:
    """Write the pair back in DirLab layout (`x y z` per line)."""
    for path, pts in ((moving_path, lms.moving), (fixed_path, lms.fixed)):
        out = pts + 1.0 if one_based else pts
        lines = [f"{p[2]:.6f} {p[1]:.6f} {p[0]:.6f}" for p in out]
        atomic_write_text(path, "\n".join(lines) + "\n")


def map_landmarks(lms: LandmarkSet, t: GridTransform) -> LandmarkSet:
    """Carry both point sets through `t`; out-of-target points are flagged, kept."""
    if lms.grid_tag != t.source_tag:
        raise ValueError(f"landmarks live on grid {lms.grid_tag!r}, transform expects {t.source_tag!r}")
    mov = t.apply(lms.moving)
    fix = t.apply(lms.fixed)
    upper = np.asarray(t.target_dims, dtype=np.float64) - 1.0
    oob = ((mov < 0) | (mov > upper) | (fix < 0) | (fix > upper)).any(axis=1)
    spacing = tuple(s / sc for s, sc in zip(lms.spacing, t.scale))
    return LandmarkSet(mov, fix, t.target_tag, spacing, flagged=tuple(int(i) for i in np.nonzero(oob)[0]))


# ---------------------------------------------------------------------------
# volume persistence


def _parse_kv_header(text: str, path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise VolumeFormatError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _raw_path_for(header_path: str) -> str:
    stem, _ = os.path.splitext(header_path)
    return stem + RAW_EXT


def save_volume(v: Volume, path: str) -> str:
    """Write native header + raw payload; returns the header path."""
    if not path.endswith(HEADER_EXT):
        path = path + HEADER_EXT
    data = np.asarray(v.data)
    if data.dtype == np.int16:
        dtype = "i16"
    else:
        dtype = "f32"
        data = data.astype(np.float32)
    header = "\n".join(
        [
            f"dims = {v.dims[0]} {v.dims[1]} {v.dims[2]}",
            f"spacing_mm = {v.spacing[0]!r} {v.spacing[1]!r} {v.spacing[2]!r}",
            f"origin_mm = {v.origin[0]!r} {v.origin[1]!r} {v.origin[2]!r}",
            f"dtype = {dtype}",
            "order = zyx",
            f"units = {v.units}",
        ]
    )
    atomic_write_bytes(_raw_path_for(path), np.ascontiguousarray(data).astype(_DTYPES[dtype]).tobytes())
    atomic_write_text(path, header + "\n")
    return path


def load_volume(path: str, format: str = "auto") -> Volume:
    """Load a native (`.hdr`) or MetaImage (`.mhd`/`.mha`) volume.

    Data arrives in HU for i16 payloads, as stored for f32.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    if format == "auto":
        ext = os.path.splitext(path)[1].lower()
        format = "metaimage" if ext in (".mhd", ".mha") else "native"
    if format == "native":
        return _load_native(path)
    if format == "metaimage":
        return _load_metaimage(path)
    raise ValueError(f"unknown volume format {format!r}")


def _check_payload(data: np.ndarray, dims: tuple[int, int, int], path: str) -> np.ndarray:
    expected = int(np.prod(dims))
    if data.size != expected:
        raise VolumeFormatError(f"{path}: payload has {data.size} values, header declares {expected}")
    data = data.reshape(dims)
    if not np.isfinite(data.astype(np.float64)).all():
        raise VolumeFormatError(f"{path}: payload contains non-finite values")
    return data


def _load_native(path: str) -> Volume:
    with open(path, "r", encoding="utf-8") as f:
        kv = _parse_kv_header(f.read(), path)
    for key in ("dims", "spacing_mm", "origin_mm", "dtype"):
        if key not in kv:
            raise VolumeFormatError(f"{path}: missing header key {key!r}")
    if kv.get("order", "zyx") != "zyx":
        raise VolumeFormatError(f"{path}: unsupported order {kv['order']!r}")
    if kv["dtype"] not in _DTYPES:
        raise VolumeFormatError(f"{path}: unsupported dtype {kv['dtype']!r}")
    dims = tuple(int(t) for t in kv["dims"].split())
    spacing = tuple(float(t) for t in kv["spacing_mm"].split())
    origin = tuple(float(t) for t in kv["origin_mm"].split())
    if len(dims) != 3 or any(n < 1 for n in dims):
        raise VolumeFormatError(f"{path}: bad dims {kv['dims']!r}")
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise VolumeFormatError(f"{path}: bad spacing {kv['spacing_mm']!r}")
    raw = np.fromfile(_raw_path_for(path), dtype=_DTYPES[kv["dtype"]])
    data = _check_payload(raw, dims, path)
    return Volume(data, spacing, origin, units=kv.get("units", "HU"))


def _load_metaimage(path: str) -> Volume:
    header: dict[str, str] = {}
    payload_offset = None
    with open(path, "rb") as f:
        while True:
            line = f.readline()
            if not line:
                break
            text = line.decode("ascii", errors="replace").strip()
            if "=" not in text:
                raise VolumeFormatError(f"{path}: malformed MetaImage line {text!r}")
            key, value = (t.strip() for t in text.split("=", 1))
            header[key] = value
            if key == "ElementDataFile":
                if value.upper() == "LOCAL":
                    payload_offset = f.tell()
                break
    if "ElementDataFile" not in header:
        raise VolumeFormatError(f"{path}: header has no ElementDataFile")
    if header.get("CompressedData", "False").lower() == "true":
        raise VolumeFormatError(f"{path}: compressed MetaImage payloads are not supported")
    ndims = int(header.get("NDims", "3"))
    if ndims != 3:
        raise VolumeFormatError(f"{path}: NDims={ndims}, only 3 supported")
    met_type = header.get("ElementType", "MET_SHORT")
    if met_type not in _MET_TYPES:
        raise VolumeFormatError(f"{path}: unsupported ElementType {met_type}")
    dtype = _MET_TYPES[met_type]
    if header.get("ElementByteOrderMSB", "False").lower() == "true" or header.get(
        "BinaryDataByteOrderMSB", "False"
    ).lower() == "true":
        dtype = dtype.newbyteorder(">")
    # MetaImage lists x y z; flip to (z, y, x)
    dims_xyz = [int(t) for t in header["DimSize"].split()]
    dims = tuple(reversed(dims_xyz))
    spacing_key = "ElementSpacing" if "ElementSpacing" in header else "ElementSize"
    spacing = tuple(reversed([float(t) for t in header.get(spacing_key, "1 1 1").split()]))
    origin_key = next((k for k in ("Offset", "Position", "Origin") if k in header), None)
    origin = tuple(reversed([float(t) for t in header[origin_key].split()])) if origin_key else (0.0, 0.0, 0.0)

    if payload_offset is not None:
        with open(path, "rb") as f:
            f.seek(payload_offset)
            raw = np.frombuffer(f.read(), dtype=dtype)
    else:
        data_path = os.path.join(os.path.dirname(os.path.abspath(path)), header["ElementDataFile"])
        raw = np.fromfile(data_path, dtype=dtype)
    data = _check_payload(raw.astype(np.float64), dims, path)
    out = data.astype(np.int16) if met_type == "MET_SHORT" else data.astype(np.float32)
    return Volume(out, spacing, origin, units="HU")


# ---------------------------------------------------------------------------
# displacement-field persistence


def save_dvf(d: Dvf, path: str) -> str:
    """Write a displacement field: text sidecar + f32 LE payload; round-trips bit-exactly."""
    arr = np.asarray(d.data, dtype=np.float32)
    if not path.endswith(DVF_EXT):
        path = path + DVF_EXT
    dz, dy, dx = arr.shape[1:]
    sidecar = [
        f"dims = {dz} {dy} {dx}",
        "channels = 3",
        "units = voxels",
        f"level = {d.level}",
        "dtype = f32",
        "order = czyx",
    ]
    if d.grid_tag is not None:
        sidecar.append(f"grid_tag = {d.grid_tag}")
    atomic_write_bytes(_raw_path_for(path), np.ascontiguousarray(arr).astype("<f4").tobytes())
    atomic_write_text(path, "\n".join(sidecar) + "\n")
    return path


def load_dvf(path: str) -> Dvf:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "r", encoding="utf-8") as f:
        kv = _parse_kv_header(f.read(), path)
    dims = tuple(int(t) for t in kv["dims"].split())
    channels = int(kv.get("channels", "3"))
    if channels != 3 or len(dims) != 3:
        raise VolumeFormatError(f"{path}: expected channels=3 and 3 dims, got {kv}")
    raw = np.fromfile(_raw_path_for(path), dtype="<f4")
    expected = 3 * int(np.prod(dims))
    if raw.size != expected:
        raise VolumeFormatError(f"{path}: payload has {raw.size} floats, sidecar declares {expected}")
    data = raw.reshape((3,) + dims)
    if not np.isfinite(data).all():
        raise VolumeFormatError(f"{path}: payload contains non-finite values")
    return Dvf(data, level=int(kv.get("level", "0")), grid_tag=kv.get("grid_tag"))
