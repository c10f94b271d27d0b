"""Synthetic tensor phantoms, Rician corruption and training-set assembly."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from math import comb

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from .dti import compute_metrics, predict_signal
from .errors import ValidationError
from .volume import METRIC_CHANNELS, TensorField, Volume3D, load_volume, save_volume

CURVE_SAMPLES = 256


@dataclass(frozen=True)
class Bundle:
    """A tube of given radius (voxels) around a Bezier curve through
    ``control_points`` (voxel coordinates ``(x, y, z)``)."""

    control_points: tuple
    radius: float


def default_bundles(dims=(64, 64, 16)):
    """Arc plus three through-plane tracts, scaled to ``dims``."""
    X, Y, Z = dims
    zc = (Z - 1) / 2.0
    top = Z - 1.0
    return (
        Bundle(((0.12 * X, 0.22 * Y, zc), (0.5 * X, 0.62 * Y, zc), (0.88 * X, 0.22 * Y, zc)),
               0.08 * X),
        Bundle(((0.3 * X, 0.68 * Y, 0.0), (0.34 * X, 0.66 * Y, zc), (0.3 * X, 0.64 * Y, top)),
               0.08 * X),
        Bundle(((0.7 * X, 0.68 * Y, 0.0), (0.66 * X, 0.66 * Y, zc), (0.7 * X, 0.64 * Y, top)),
               0.08 * X),
        Bundle(((0.5 * X, 0.25 * Y, 0.0), (0.5 * X, 0.25 * Y, top)), 0.08 * X),
    )


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple = (64, 64, 16)
    background_md: float = 0.7e-3
    axial: float = 1.7e-3
    radial: float = 0.3e-3
    bundles: tuple = None
    s0_value: float = 1.0
    md_texture: float = 0.05
    seed: int = 0
    voxel_size: tuple = (1.25, 1.25, 1.25)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        if self.bundles is None:
            object.__setattr__(self, "bundles", default_bundles(dims))
        self.validate()

    def validate(self):
        if len(self.dims) != 3 or self.dims[0] < 16 or self.dims[1] < 16 or self.dims[2] < 4:
            raise ValidationError(f"phantom dims must be at least (16, 16, 4), got {self.dims}")
        if min(self.background_md, self.axial, self.radial) <= 0:
            raise ValidationError("diffusivities must be positive")
        if self.axial <= self.radial:
            raise ValidationError("axial diffusivity must exceed radial diffusivity")
        if self.s0_value < 0:
            raise ValidationError("s0_value must be non-negative")
        if self.md_texture < 0 or self.md_texture >= 1:
            raise ValidationError("md_texture must be in [0, 1)")
        hi = np.array(self.dims, dtype=float) - 1.0
        for b in self.bundles:
            pts = np.asarray(b.control_points, dtype=float)
            if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 2:
                raise ValidationError("bundle needs at least two (x, y, z) control points")
            if np.any(pts < 0) or np.any(pts > hi):
                raise ValidationError(f"bundle control point outside the volume {self.dims}")
            if b.radius <= 0:
                raise ValidationError("bundle radius must be positive")


def _parse_triplet(text, cast=float):
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 3:
        raise ValidationError(f"expected three numbers, got {text!r}")
    return tuple(cast(p) for p in parts)


def parse_phantom_config(text):
    """Parse ``key = value`` lines. Bundles are given as
    ``bundle = x,y,z; x,y,z; ... | radius`` (repeatable); without any bundle
    line the default set is used, and ``bundles = none`` clears it."""
    kwargs = {}
    bundles = []
    clear = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.lower()
        try:
            if key == "dims":
                kwargs["dims"] = _parse_triplet(value, int)
            elif key == "voxel_size":
                kwargs["voxel_size"] = _parse_triplet(value)
            elif key in ("background_md", "axial", "radial", "s0_value", "md_texture"):
                kwargs[key] = float(value)
            elif key == "seed":
                kwargs["seed"] = int(value)
            elif key == "bundles":
                if value.lower() != "none":
                    raise ValidationError(f"line {lineno}: only 'bundles = none' is allowed")
                clear = True
            elif key == "bundle":
                path, _, radius = value.partition("|")
                if not radius.strip():
                    raise ValidationError(f"line {lineno}: bundle needs '| radius'")
                pts = tuple(_parse_triplet(p) for p in path.split(";") if p.strip())
                bundles.append(Bundle(pts, float(radius)))
            else:
                raise ValidationError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"line {lineno}: {exc}") from None
    if bundles:
        kwargs["bundles"] = tuple(bundles)
    elif clear:
        kwargs["bundles"] = ()
    return PhantomConfig(**kwargs)


def load_phantom_config(path):
    with open(path, encoding="utf-8") as f:
        return parse_phantom_config(f.read())


def _bezier(points, t):
    """Point and derivative of a Bezier curve (Bernstein form) at params ``t``."""
    pts = np.asarray(points, dtype=float)
    n = pts.shape[0] - 1
    basis = np.stack([comb(n, i) * t ** i * (1 - t) ** (n - i) for i in range(n + 1)], axis=1)
    pos = basis @ pts
    if n == 0:
        return pos, np.zeros_like(pos)
    dbasis = np.stack([comb(n - 1, i) * t ** i * (1 - t) ** (n - 1 - i) for i in range(n)], axis=1)
    deriv = n * (dbasis @ np.diff(pts, axis=0))
    return pos, deriv


def _brain_mask(dims):
    X, Y, Z = dims
    x, y, z = np.meshgrid(np.arange(X), np.arange(Y), np.arange(Z), indexing="ij")
    cx, cy, cz = (X - 1) / 2.0, (Y - 1) / 2.0, (Z - 1) / 2.0
    r = ((x - cx) / (0.46 * X)) ** 2 + ((y - cy) / (0.46 * Y)) ** 2 + ((z - cz) / (0.75 * Z)) ** 2
    return r <= 1.0


def generate_phantom(cfg):
    """Tensor field of a brain-like ellipsoid with curved fibre bundles.

    Bundle voxels carry a prolate tensor aligned with the local curve
    tangent; where bundles overlap their tensors are averaged. The
    remaining tissue is isotropic with a smooth, seed-driven MD texture.
    """
    cfg.validate()
    dims = cfg.dims
    mask = _brain_mask(dims)
    grid = np.stack(np.meshgrid(*(np.arange(d, dtype=float) for d in dims), indexing="ij"), axis=-1)

    rng = np.random.default_rng(cfg.seed)
    texture = gaussian_filter(rng.standard_normal(dims), sigma=3.0, mode="nearest")
    peak = np.abs(texture).max()
    if peak > 0:
        texture = texture / peak
    md = cfg.background_md * (1.0 + cfg.md_texture * texture)
    tensors = md[..., None, None] * np.eye(3)

    acc = np.zeros(dims + (3, 3))
    count = np.zeros(dims)
    t = np.linspace(0.0, 1.0, CURVE_SAMPLES)
    flat = grid.reshape(-1, 3)
    for b in cfg.bundles:
        pos, deriv = _bezier(b.control_points, t)
        tang = deriv / np.maximum(np.linalg.norm(deriv, axis=1, keepdims=True), 1e-12)
        dist, nearest = cKDTree(pos).query(flat)
        inside = (dist <= b.radius).reshape(dims)
        e = tang[nearest].reshape(dims + (3,))
        outer = e[..., :, None] * e[..., None, :]
        d = cfg.radial * np.eye(3) + (cfg.axial - cfg.radial) * outer
        acc += np.where(inside[..., None, None], d, 0.0)
        count += inside
    fibre = count > 0
    tensors = np.where(fibre[..., None, None], acc / np.maximum(count, 1)[..., None, None], tensors)
    tensors = np.where(mask[..., None, None], tensors, 0.0)
    s0 = np.where(mask, cfg.s0_value, 0.0)
    return TensorField.from_matrices(tensors, s0)


# ---------------------------------------------------------------------------
# noise

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x):
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & _MASK64
    z = x
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK64
    return z ^ (z >> np.uint64(31))


def counter_uniform(seed, index, stream):
    """Uniform (0, 1] variates keyed only by ``(seed, index, stream)``."""
    index = np.asarray(index, dtype=np.uint64)
    with np.errstate(over="ignore"):
        key = _splitmix64(np.uint64(seed) ^ _splitmix64(np.uint64(stream)))
        bits = _splitmix64(index * np.uint64(2654435761) ^ key)
        bits = _splitmix64(bits ^ index)
    return ((bits >> np.uint64(11)).astype(np.float64) + 1.0) / 9007199254740992.0


def counter_normal_pair(seed, index):
    """Two independent standard normals per index (Box-Muller)."""
    u1 = counter_uniform(seed, index, 0)
    u2 = counter_uniform(seed, index, 1)
    r = np.sqrt(-2.0 * np.log(u1))
    return r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)


@dataclass(frozen=True)
class NoiseConfig:
    sigma: float = 0.04
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValidationError("noise sigma must be non-negative")
        if self.seed < 0:
            raise ValidationError("noise seed must be non-negative")


def linear_index(dims):
    """On-disk linear index of every element of an ``(X, Y, Z, C)`` array."""
    X, Y, Z, C = dims
    idx = np.arange(X * Y * Z * C, dtype=np.uint64).reshape(Z, Y, X, C)
    return idx.transpose(2, 1, 0, 3)


def rician(signal, sigma, seed, index):
    """Magnitude ``sqrt((S + n1)^2 + n2^2)`` with noise keyed by ``index``."""
    signal = np.asarray(signal, dtype=np.float64)
    if sigma == 0:
        return np.abs(signal)
    n1, n2 = counter_normal_pair(seed, index)
    return np.sqrt((signal + sigma * n1) ** 2 + (sigma * n2) ** 2)


def add_rician(v, cfg):
    """Rician-corrupt every value of a volume; the draw for each element
    depends only on the seed and its on-disk linear index."""
    out = rician(v.data, cfg.sigma, cfg.seed, linear_index(v.dims))
    return Volume3D(out, v.voxel_size, v.channel_names)


def simulate_dwi(field, gtab, noise=None, voxel_size=(1.0, 1.0, 1.0)):
    """Noise-free (or Rician-corrupted) DWI volume for a tensor field."""
    signal = predict_signal(field.matrices(), field.s0, gtab)
    names = tuple(f"b{int(b)}_{i}" for i, b in enumerate(gtab.bvals))
    vol = Volume3D(signal, voxel_size, names)
    if noise is not None and noise.sigma > 0:
        vol = add_rician(vol, noise)
    return vol


# ---------------------------------------------------------------------------
# datasets

SPLITS = ("train", "val", "test")
B0_FLOOR = 1e-6


@dataclass(frozen=True)
class Dataset:
    """Normalized 7-channel inputs and scaled FA/MD/AD targets on a common grid.

    ``inputs`` is ``(X, Y, Z, 7)`` with every channel divided by the b=0
    channel; ``targets`` is ``(X, Y, Z, 3)`` with MD and AD divided by
    ``diffusivity_scale`` (mm^2/s). ``splits`` maps split name to z indices.
    """

    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    diffusivity_scale: float
    splits: dict
    meta: dict = field(default_factory=dict)

    @property
    def dims(self):
        return self.inputs.shape[:3]

    def split_slices(self, name):
        if name not in self.splits:
            raise ValidationError(f"unknown split {name!r}")
        return list(self.splits[name])

    def unscale(self, targets):
        """Back to physical units: FA unchanged, MD/AD times the scale."""
        out = np.array(targets, dtype=np.float64, copy=True)
        out[..., 1:] *= self.diffusivity_scale
        return out


def _split_counts(n, fractions):
    raw = np.array(fractions, dtype=float) * n
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    # keep every requested split non-empty when there is room
    for i, f in enumerate(fractions):
        if f > 0 and counts[i] == 0:
            j = int(np.argmax(counts))
            if counts[j] > 1:
                counts[j] -= 1
                counts[i] += 1
    return counts


def normalize_inputs(dwi, gtab):
    b0 = np.mean(dwi[..., gtab.b0_mask], axis=-1)
    return dwi / np.maximum(b0, B0_FLOOR)[..., None]


def make_dataset(field, gtab, noise, split=(0.7, 0.15, 0.15)):
    """Noisy normalized inputs and noise-free targets, split by z-slice."""
    if not gtab.is_six_direction_protocol():
        raise ValidationError("datasets use the 7-channel protocol (one b=0 + six b=1000)")
    fractions = tuple(float(f) for f in split)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError(f"split fractions must be three non-negative numbers summing to 1, got {split}")
    dwi = simulate_dwi(field, gtab, noise)
    inputs = normalize_inputs(dwi.data, gtab)

    metrics = compute_metrics(field).data
    scale = float(metrics[..., 2].max())
    if scale <= 0:
        raise ValidationError("phantom has no diffusion signal")
    targets = metrics.copy()
    targets[..., 1:] /= scale

    Z = field.dims[2]
    order = np.random.default_rng(noise.seed).permutation(Z)
    counts = _split_counts(Z, fractions)
    bounds = np.concatenate([[0], np.cumsum(counts)])
    splits = {name: sorted(int(z) for z in order[bounds[i]:bounds[i + 1]])
              for i, name in enumerate(SPLITS)}
    meta = {"sigma": noise.sigma, "noise_seed": noise.seed, "split": list(fractions)}
    return Dataset(inputs, targets, field.s0 > 0, scale, splits, meta)


def extract_patches(ds, split, patch, stride=None, drop_degenerate=False):
    """``(N, P, P, 7)`` inputs, ``(N, P, P, 3)`` targets and their ``(x, y, z)``
    corners for every tile of the given split's slices.

    With ``drop_degenerate`` tiles whose target has an all-zero channel are
    skipped (the singular-value term is undefined for them).
    """
    stride = patch if stride is None else int(stride)
    if patch < 1 or stride < 1:
        raise ValidationError("patch size and stride must be positive")
    X, Y, _ = ds.dims
    if patch > X or patch > Y:
        raise ValidationError(f"patch {patch} larger than slice {X}x{Y}")
    xs = range(0, X - patch + 1, stride)
    ys = range(0, Y - patch + 1, stride)
    inp, tgt, pos = [], [], []
    for z in ds.split_slices(split):
        for x in xs:
            for y in ys:
                t = ds.targets[x:x + patch, y:y + patch, z, :]
                if drop_degenerate:
                    if patch == 1:
                        if not np.any(t):
                            continue
                    elif np.any(np.all(t == 0, axis=(0, 1))):
                        continue
                inp.append(ds.inputs[x:x + patch, y:y + patch, z, :])
                tgt.append(t)
                pos.append((x, y, z))
    if not inp:
        return (np.zeros((0, patch, patch, ds.inputs.shape[-1])),
                np.zeros((0, patch, patch, ds.targets.shape[-1])), [])
    return np.stack(inp), np.stack(tgt), pos


def save_dataset(ds, stem):
    """Write inputs and targets as volume pairs plus a small JSON sidecar."""
    save_volume(Volume3D(ds.inputs, channel_names=tuple(f"in{i}" for i in range(ds.inputs.shape[-1]))),
                f"{stem}.inputs")
    save_volume(Volume3D(ds.targets, channel_names=METRIC_CHANNELS), f"{stem}.targets")
    save_volume(Volume3D(ds.mask.astype(np.float64), channel_names=("mask",)), f"{stem}.mask")
    info = {"diffusivity_scale": ds.diffusivity_scale, "splits": ds.splits, "meta": ds.meta}
    with open(f"{stem}.dataset.json", "w", encoding="utf-8") as f:
        json.dump(info, f, indent=2, sort_keys=True)
        f.write("\n")


def load_dataset(stem):
    with open(f"{stem}.dataset.json", encoding="utf-8") as f:
        info = json.load(f)
    inputs = load_volume(f"{stem}.inputs").data
    targets = load_volume(f"{stem}.targets").data
    mask = load_volume(f"{stem}.mask").data[..., 0] > 0
    if inputs.shape[:3] != targets.shape[:3]:
        raise ValidationError("dataset inputs and targets disagree on grid size")
    splits = {k: [int(z) for z in v] for k, v in info["splits"].items()}
    return Dataset(inputs, targets, mask, float(info["diffusivity_scale"]), splits,
                   info.get("meta", {}))


def with_splits(ds, splits):
    return replace(ds, splits=splits)
