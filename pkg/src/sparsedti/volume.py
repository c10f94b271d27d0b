"""Volume containers, gradient tables and their on-disk formats.

Volumes are stored as a pair of files: ``<stem>.hdr.json`` holding the
geometry and channel names, and ``<stem>.raw`` holding little-endian
float32 samples with x varying fastest and the channel index last, i.e.
the linear index of ``(x, y, z, c)`` is ``((z * Y + y) * X + x) * C + c``.
In memory, data is kept as float64 with shape ``(X, Y, Z, C)``.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ValidationError

DTYPE_TAG = "f32le"
TENSOR_CHANNELS = ("Dxx", "Dyy", "Dzz", "Dxy", "Dxz", "Dyz", "S0")
METRIC_CHANNELS = ("FA", "MD", "AD")

_SQRT_HALF = 1.0 / np.sqrt(2.0)
CANONICAL_DIRECTIONS = np.array(
    [
        [1.0, 1.0, 0.0],
        [1.0, -1.0, 0.0],
        [1.0, 0.0, 1.0],
        [1.0, 0.0, -1.0],
        [0.0, 1.0, 1.0],
        [0.0, 1.0, -1.0],
    ]
) * _SQRT_HALF
CANONICAL_BVALUE = 1000.0


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Volume3D:
    """A 4D array ``(X, Y, Z, C)`` with voxel size and channel labels."""

    data: np.ndarray
    voxel_size: tuple = (1.0, 1.0, 1.0)
    channel_names: tuple = ()

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 3:
            data = data[..., None]
        if data.ndim != 4:
            raise ValidationError(f"volume data must be 4D (X, Y, Z, C), got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("volume contains non-finite values")
        names = tuple(self.channel_names) or tuple(f"c{i}" for i in range(data.shape[3]))
        if len(names) != data.shape[3]:
            raise ValidationError(
                f"{len(names)} channel names for {data.shape[3]} channels")
        vs = tuple(float(v) for v in self.voxel_size)
        if len(vs) != 3:
            raise ValidationError("voxel_size needs three entries")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "channel_names", names)
        object.__setattr__(self, "voxel_size", vs)

    @property
    def dims(self):
        return tuple(int(d) for d in self.data.shape)

    def channel(self, name):
        """Return the ``(X, Y, Z)`` array of the named channel."""
        try:
            idx = self.channel_names.index(name)
        except ValueError:
            raise ValidationError(f"no channel named {name!r}; have {self.channel_names}") from None
        return self.data[..., idx]


@dataclass(frozen=True)
class GradientTable:
    """b-values (s/mm^2) and unit encoding directions, one row per volume."""

    bvals: np.ndarray
    bvecs: np.ndarray

    def __post_init__(self):
        bvals = np.asarray(self.bvals, dtype=np.float64).reshape(-1)
        bvecs = np.asarray(self.bvecs, dtype=np.float64).reshape(-1, 3)
        if bvals.shape[0] != bvecs.shape[0]:
            raise ValidationError(f"{bvals.shape[0]} b-values but {bvecs.shape[0]} directions")
        if np.any(bvals < 0):
            raise ValidationError("negative b-value")
        if not np.any(bvals == 0):
            raise ValidationError("gradient table needs at least one b=0 entry")
        dw = bvals > 0
        norms = np.linalg.norm(bvecs[dw], axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValidationError("diffusion-weighted directions must have unit norm")
        object.__setattr__(self, "bvals", _frozen(bvals))
        object.__setattr__(self, "bvecs", _frozen(bvecs))

    def __len__(self):
        return self.bvals.shape[0]

    @property
    def b0_mask(self):
        return self.bvals == 0

    @property
    def dw_mask(self):
        return self.bvals > 0

    def is_six_direction_protocol(self, bvalue=CANONICAL_BVALUE):
        """True for one b=0 entry plus six entries at ``bvalue`` that span tensor space."""
        if not (len(self) == 7 and int(np.sum(self.b0_mask)) == 1
                and int(np.sum(self.bvals == bvalue)) == 6):
            return False
        g = self.bvecs[self.bvals == bvalue]
        x, y, z = g.T
        rows = np.column_stack([x * x, y * y, z * z, 2 * x * y, 2 * x * z, 2 * y * z])
        return bool(np.linalg.matrix_rank(rows) == 6)


def six_direction_table(bvalue=CANONICAL_BVALUE):
    """The default protocol: one b=0 volume followed by the dual-gradient set."""
    bvals = np.concatenate([[0.0], np.full(6, float(bvalue))])
    bvecs = np.vstack([np.zeros(3), CANONICAL_DIRECTIONS])
    return GradientTable(bvals, bvecs)


@dataclass(frozen=True)
class TensorField:
    """Per-voxel symmetric diffusion tensor (mm^2/s) and unweighted signal.

    ``valid`` marks voxels where the tensor is meaningful; fits flag voxels
    with non-positive signal as invalid and zero them.
    """

    dxx: np.ndarray
    dyy: np.ndarray
    dzz: np.ndarray
    dxy: np.ndarray
    dxz: np.ndarray
    dyz: np.ndarray
    s0: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        shape = np.shape(self.dxx)
        for name in ("dxx", "dyy", "dzz", "dxy", "dxz", "dyz", "s0"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape or arr.ndim != 3:
                raise ValidationError(f"tensor component {name} has shape {arr.shape}, expected 3D {shape}")
            object.__setattr__(self, name, _frozen(arr))
        if np.any(self.s0 < 0):
            raise ValidationError("s0 must be non-negative")
        valid = np.ones(shape, dtype=bool) if self.valid is None else np.asarray(self.valid, dtype=bool)
        valid = valid.copy()
        valid.setflags(write=False)
        object.__setattr__(self, "valid", valid)

    @property
    def dims(self):
        return tuple(int(d) for d in self.dxx.shape)

    def components(self):
        """``(X, Y, Z, 6)`` in the order Dxx, Dyy, Dzz, Dxy, Dxz, Dyz."""
        return np.stack([self.dxx, self.dyy, self.dzz, self.dxy, self.dxz, self.dyz], axis=-1)

    def matrices(self):
        """``(X, Y, Z, 3, 3)`` symmetric tensors."""
        m = np.empty(self.dims + (3, 3))
        m[..., 0, 0] = self.dxx
        m[..., 1, 1] = self.dyy
        m[..., 2, 2] = self.dzz
        m[..., 0, 1] = m[..., 1, 0] = self.dxy
        m[..., 0, 2] = m[..., 2, 0] = self.dxz
        m[..., 1, 2] = m[..., 2, 1] = self.dyz
        return m

    @classmethod
    def from_components(cls, comps, s0, valid=None):
        comps = np.asarray(comps, dtype=np.float64)
        return cls(*(comps[..., i] for i in range(6)), s0=s0, valid=valid)

    @classmethod
    def from_matrices(cls, mats, s0, valid=None):
        mats = np.asarray(mats, dtype=np.float64)
        return cls(mats[..., 0, 0], mats[..., 1, 1], mats[..., 2, 2],
                   mats[..., 0, 1], mats[..., 0, 2], mats[..., 1, 2], s0=s0, valid=valid)

    def to_volume(self, voxel_size=(1.0, 1.0, 1.0)):
        data = np.concatenate([self.components(), self.s0[..., None]], axis=-1)
        return Volume3D(data, voxel_size, TENSOR_CHANNELS)

    @classmethod
    def from_volume(cls, vol):
        if vol.dims[3] != 7:
            raise ValidationError(f"tensor volume needs 7 channels, got {vol.dims[3]}")
        d = vol.data
        return cls.from_components(d[..., :6], d[..., 6])


@dataclass(frozen=True)
class EigenSystem:
    """Eigenvalues in descending order with matching unit eigenvectors.

    ``vectors[:, i]`` is the eigenvector of ``values[i]``.
    """

    values: np.ndarray
    vectors: np.ndarray

    @property
    def lambda1(self):
        return float(self.values[0])

    @property
    def lambda2(self):
        return float(self.values[1])

    @property
    def lambda3(self):
        return float(self.values[2])

    def reassemble(self):
        return (self.vectors * self.values) @ self.vectors.T


# ---------------------------------------------------------------------------
# I/O


def _header_path(stem):
    return f"{stem}.hdr.json"


def _raw_path(stem):
    return f"{stem}.raw"


def volume_bytes(v):
    """The raw payload for ``v`` exactly as written to disk."""
    # (X, Y, Z, C) -> (Z, Y, X, C) so a C-order walk has x fastest, c last.
    with np.errstate(over="ignore"):
        payload = np.ascontiguousarray(v.data.transpose(2, 1, 0, 3)).astype("<f4")
    if not np.all(np.isfinite(payload)):
        raise ValidationError("volume values overflow float32")
    return payload.tobytes()


def save_volume(v, path_stem, extra=None):
    """Write ``v`` as ``<stem>.hdr.json`` + ``<stem>.raw``.

    ``extra`` is an optional dict of additional header keys (provenance
    such as the gradient directions used); it must not shadow the
    geometry fields.
    """
    if not np.all(np.isfinite(v.data)):
        raise ValidationError("refusing to save non-finite values")
    payload = volume_bytes(v)
    header = {
        "dims": list(v.dims),
        "voxel_size": list(v.voxel_size),
        "dtype": DTYPE_TAG,
        "channel_names": list(v.channel_names),
    }
    if extra:
        clash = set(extra) & set(header)
        if clash:
            raise ValidationError(f"extra header keys clash with geometry: {sorted(clash)}")
        header.update(extra)
    parent = os.path.dirname(os.fspath(path_stem))
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(_header_path(path_stem), "w", encoding="utf-8") as f:
        json.dump(header, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(_raw_path(path_stem), "wb") as f:
        f.write(payload)


def read_header(path_stem):
    with open(_header_path(path_stem), encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as exc:
            raise FormatError(f"bad volume header {_header_path(path_stem)}: {exc}") from None


def load_volume(path_stem):
    header = read_header(path_stem)
    try:
        dims = tuple(int(d) for d in header["dims"])
        dtype = header["dtype"]
        voxel_size = tuple(header.get("voxel_size", (1.0, 1.0, 1.0)))
        names = tuple(header.get("channel_names", ()))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"incomplete volume header: {exc}") from None
    if dtype != DTYPE_TAG:
        raise FormatError(f"unknown dtype tag {dtype!r}")
    if len(dims) != 4 or min(dims) < 1:
        raise FormatError(f"bad dims {dims}")
    with open(_raw_path(path_stem), "rb") as f:
        raw = f.read()
    expected = int(np.prod(dims)) * 4
    if len(raw) != expected:
        raise FormatError(f"raw payload is {len(raw)} bytes, header implies {expected}")
    X, Y, Z, C = dims
    arr = np.frombuffer(raw, dtype="<f4").reshape(Z, Y, X, C).transpose(2, 1, 0, 3)
    if not np.all(np.isfinite(arr)):
        raise ValidationError("volume payload contains non-finite values")
    return Volume3D(arr.astype(np.float64), voxel_size, names)


def load_gradient_table(bvals_path, bvecs_path):
    """Read FSL-style ``bvals`` (one row) and ``bvecs`` (three rows) files."""
    try:
        bvals = np.loadtxt(bvals_path, dtype=np.float64, ndmin=1)
        bvecs = np.loadtxt(bvecs_path, dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise FormatError(f"cannot parse gradient files: {exc}") from None
    bvals = bvals.reshape(-1)
    if bvecs.shape[0] != 3:
        raise FormatError(f"bvecs must have 3 rows, found {bvecs.shape[0]}")
    if bvecs.shape[1] != bvals.shape[0]:
        raise FormatError(
            f"bvecs has {bvecs.shape[1]} columns but bvals has {bvals.shape[0]} entries")
    dirs = bvecs.T.copy()
    norms = np.linalg.norm(dirs, axis=1)
    dw = bvals > 0
    if np.any(norms[dw] == 0):
        raise ValidationError("zero direction paired with a non-zero b-value")
    dirs[dw] /= norms[dw, None]
    return GradientTable(bvals, dirs)


def save_gradient_table(gtab, bvals_path, bvecs_path):
    with open(bvals_path, "w") as f:
        f.write(" ".join(f"{b:g}" for b in gtab.bvals) + "\n")
    with open(bvecs_path, "w") as f:
        for row in gtab.bvecs.T:
            f.write(" ".join(repr(float(x)) for x in row) + "\n")
