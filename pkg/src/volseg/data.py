"""Synthetic labeled volumes and their on-disk directory format.

The generator builds small CT-like phantoms: a handful of geometric
structures (spheres, ellipsoids, tubes) placed at fixed anatomical slots with
seeded size, position jitter, and intensity draws, over a uniform background
plus white noise.  Bilateral structures come in `_left`/`_right` pairs that
share one size draw and one intensity distribution and sit at mirrored base
positions, so with zero jitter the pair is an exact mirror image and the two
members are indistinguishable by local appearance.  That property is the
point: a patch around one member of a pair carries no local cue about which
side it is on.

Volume directory format (one directory per volume):
    header.json   canonical JSON: format_version, id, dims, spacing, roster,
                  and the list of classes that carry reference masks
    image.raw     float64 little-endian, C order, shape dims
    mask_<c>.raw  uint8 {0, 1}, C order, shape dims, one file per labeled class
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .serialization import (
    check_version,
    float64_bytes,
    float64_from_bytes,
    read_json,
    uint8_from_bytes,
    write_json,
)

VOLUME_FORMAT_VERSION = 1
_NAME_RE = re.compile(r"^[a-z][a-z0-9_]*$")

# shape parameter conventions, all driven by one scalar size s:
#   sphere     radius s
#   ellipsoid  semi-axes (s, 0.8 s, 0.65 s) along (d, h, w)
#   tube       radius 0.45 s, half-length 1.5 s along its axis
_ELLIPSOID_RATIOS = (1.0, 0.8, 0.65)
_TUBE_RADIUS_FACTOR = 0.45
_TUBE_HALFLEN_FACTOR = 1.5

_AXES = {"d": 0, "h": 1, "w": 2}


@dataclass(frozen=True)
class StructureSpec:
    """One geometric structure: shape family, size range, placement, intensity."""

    name: str
    shape: str  # "sphere" | "ellipsoid" | "tube"
    size_range: tuple[float, float]
    base_center: tuple[float, float, float]  # (d, h, w) before jitter
    intensity: float
    intensity_sigma: float = 0.04
    axis: str = "d"  # tube direction, ignored for other shapes

    def __post_init__(self):
        if not _NAME_RE.match(self.name):
            raise ValueError(f"structure name {self.name!r} is not a valid identifier")
        if self.shape not in ("sphere", "ellipsoid", "tube"):
            raise ValueError(f"unknown shape {self.shape!r} for structure {self.name}")
        lo, hi = self.size_range
        if not (0 < lo <= hi):
            raise ValueError(f"structure {self.name}: size_range must satisfy 0 < lo <= hi, got {self.size_range}")
        if self.axis not in _AXES:
            raise ValueError(f"structure {self.name}: axis must be one of d/h/w, got {self.axis!r}")

    def extent(self, size: float) -> tuple[float, float, float]:
        """Half-extent of the shape along (d, h, w) for bounds checking."""
        if self.shape == "sphere":
            return (size, size, size)
        if self.shape == "ellipsoid":
            return tuple(size * r for r in _ELLIPSOID_RATIOS)
        ext = [_TUBE_RADIUS_FACTOR * size] * 3
        ext[_AXES[self.axis]] = _TUBE_HALFLEN_FACTOR * size
        return tuple(ext)

    def pair_stem(self) -> str | None:
        for suffix in ("_left", "_right"):
            if self.name.endswith(suffix):
                return self.name[: -len(suffix)]
        return None


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int]
    structures: tuple[StructureSpec, ...]
    noise_sigma: float = 0.04
    jitter: int = 2
    background: float = 0.15
    max_retries: int = 30

    def __post_init__(self):
        if len(self.dims) != 3 or any(d < 4 for d in self.dims):
            raise ValueError(f"dims must be three extents >= 4, got {self.dims}")
        names = [s.name for s in self.structures]
        if len(set(names)) != len(names):
            raise ValueError("structure names must be unique")
        if not self.structures:
            raise ValueError("phantom needs at least one structure")
        if self.noise_sigma < 0 or self.jitter < 0:
            raise ValueError("noise_sigma and jitter must be >= 0")
        self._check_pairs()

    def _check_pairs(self):
        by_name = {s.name: s for s in self.structures}
        W = self.dims[2]
        for s in self.structures:
            stem = s.pair_stem()
            if stem is None or not s.name.endswith("_left"):
                continue
            other_name = stem + "_right"
            if other_name not in by_name:
                raise ValueError(f"structure {s.name} has no matching {other_name}")
            o = by_name[other_name]
            same = (
                s.shape == o.shape
                and s.size_range == o.size_range
                and s.intensity == o.intensity
                and s.intensity_sigma == o.intensity_sigma
                and s.axis == o.axis
            )
            if not same:
                raise ValueError(f"pair {stem}: left/right members must share shape, size, and intensity specs")
            mirrored = (
                s.base_center[0] == o.base_center[0]
                and s.base_center[1] == o.base_center[1]
                and abs((W - 1 - s.base_center[2]) - o.base_center[2]) < 1e-9
            )
            if not mirrored:
                raise ValueError(f"pair {stem}: base centers must mirror across the w midplane")

    @property
    def roster(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.structures)

    def groups(self) -> list[tuple[str, ...]]:
        """Structures sharing one size draw: each left/right pair, singles alone."""
        seen: dict[str, list[str]] = {}
        order: list[str] = []
        for s in self.structures:
            key = s.pair_stem() or s.name
            if key not in seen:
                seen[key] = []
                order.append(key)
            seen[key].append(s.name)
        return [tuple(seen[k]) for k in order]


@dataclass
class LabeledVolume:
    """An image with reference masks for some subset of the class roster."""

    volume_id: str
    image: np.ndarray  # (D, H, W) float64
    roster: tuple[str, ...]
    masks: dict[str, np.ndarray] = field(default_factory=dict)  # uint8 (D, H, W)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim != 3:
            raise ValueError(f"volume {self.volume_id}: image must be 3-d, got shape {self.image.shape}")
        unknown = sorted(set(self.masks) - set(self.roster))
        if unknown:
            raise ValueError(f"volume {self.volume_id}: masks for classes outside the roster: {unknown}")
        for name, m in self.masks.items():
            m = np.asarray(m)
            if m.shape != self.image.shape:
                raise ValueError(
                    f"volume {self.volume_id}: mask {name} shape {m.shape} does not match image {self.image.shape}"
                )
            if m.dtype != np.uint8:
                m = m.astype(np.uint8)
            if m.max(initial=0) > 1:
                raise ValueError(f"volume {self.volume_id}: mask {name} has values outside {{0, 1}}")
            self.masks[name] = m

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.image.shape)

    def present_classes(self) -> tuple[str, ...]:
        return tuple(name for name in self.roster if name in self.masks)

    def present_flags(self) -> dict[str, bool]:
        return {name: name in self.masks for name in self.roster}

    def is_fully_labeled(self) -> bool:
        return all(name in self.masks for name in self.roster)

    def reference_stack(self) -> np.ndarray:
        """[N_c, D, H, W] float64 stack; classes without masks get zero channels."""
        out = np.zeros((len(self.roster),) + self.dims, dtype=np.float64)
        for i, name in enumerate(self.roster):
            if name in self.masks:
                out[i] = self.masks[name]
        return out


def _structure_mask(spec: StructureSpec, center: tuple[float, float, float],
                    size: float, dims: tuple[int, int, int]) -> np.ndarray:
    d, h, w = np.ogrid[0 : dims[0], 0 : dims[1], 0 : dims[2]]
    dd = d - center[0]
    dh = h - center[1]
    dw = w - center[2]
    if spec.shape == "sphere":
        inside = dd * dd + dh * dh + dw * dw <= size * size
    elif spec.shape == "ellipsoid":
        a, b, c = (size * r for r in _ELLIPSOID_RATIOS)
        inside = (dd / a) ** 2 + (dh / b) ** 2 + (dw / c) ** 2 <= 1.0
    else:
        r = _TUBE_RADIUS_FACTOR * size
        hl = _TUBE_HALFLEN_FACTOR * size
        deltas = [dd, dh, dw]
        along = deltas.pop(_AXES[spec.axis])
        u, v = deltas
        inside = (np.abs(along) <= hl) & (u * u + v * v <= r * r)
    return np.ascontiguousarray(np.broadcast_to(inside, dims)).astype(np.uint8)


def _fits(center, ext, dims) -> bool:
    return all(c - e >= 0.0 and c + e <= dim - 1.0 for c, e, dim in zip(center, ext, dims))


def generate_phantom(spec: PhantomSpec, seed, volume_id: str = "phantom") -> LabeledVolume:
    """Draw one fully labeled phantom.

    Draw order is fixed so a given (spec, seed) always produces the same
    volume: one size per group, then per structure a jitter vector (redrawn on
    collision or out-of-bounds, bounded retries), then per-structure voxel
    intensities, then the global noise field.
    """
    rng = np.random.default_rng(seed)
    dims = spec.dims
    by_name = {s.name: s for s in spec.structures}

    sizes: dict[str, float] = {}
    for group in spec.groups():
        lo, hi = by_name[group[0]].size_range
        size = float(rng.uniform(lo, hi))
        for name in group:
            sizes[name] = size

    occupied = np.zeros(dims, dtype=bool)
    masks: dict[str, np.ndarray] = {}
    for s in spec.structures:
        size = sizes[s.name]
        placed = False
        for _ in range(spec.max_retries):
            jitter = rng.integers(-spec.jitter, spec.jitter + 1, size=3)
            center = tuple(b + int(j) for b, j in zip(s.base_center, jitter))
            if not _fits(center, s.extent(size), dims):
                continue
            mask = _structure_mask(s, center, size, dims)
            if not mask.any():
                continue
            if np.any(occupied & (mask > 0)):
                continue
            occupied |= mask > 0
            masks[s.name] = mask
            placed = True
            break
        if not placed:
            raise RuntimeError(
                f"could not place structure {s.name} inside {dims} without overlap "
                f"after {spec.max_retries} attempts; spec leaves too little room"
            )

    image = np.full(dims, spec.background, dtype=np.float64)
    for s in spec.structures:
        sel = masks[s.name] > 0
        count = int(sel.sum())
        image[sel] = s.intensity + s.intensity_sigma * rng.standard_normal(count)
    image += spec.noise_sigma * rng.standard_normal(dims)
    return LabeledVolume(volume_id=volume_id, image=image, roster=spec.roster, masks=masks)


def generate_cohort(spec: PhantomSpec, num_volumes: int, master_seed: int,
                    prefix: str = "vol") -> list[LabeledVolume]:
    """Independent phantoms <prefix>_000, <prefix>_001, ... from one master seed."""
    children = np.random.SeedSequence(master_seed).spawn(num_volumes)
    return [
        generate_phantom(spec, child, volume_id=f"{prefix}_{i:03d}")
        for i, child in enumerate(children)
    ]


def drop_labels(volume: LabeledVolume, keep: list[str] | tuple[str, ...]) -> LabeledVolume:
    """Restrict the reference masks to `keep`; image and roster are untouched."""
    unknown = sorted(set(keep) - set(volume.roster))
    if unknown:
        raise ValueError(f"volume {volume.volume_id}: cannot keep unknown classes {unknown}")
    kept = {name: volume.masks[name].copy() for name in volume.roster if name in keep and name in volume.masks}
    return LabeledVolume(
        volume_id=volume.volume_id,
        image=volume.image.copy(),
        roster=volume.roster,
        masks=kept,
        spacing=volume.spacing,
    )


def save_volume(volume: LabeledVolume, dir_path) -> None:
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": VOLUME_FORMAT_VERSION,
        "id": volume.volume_id,
        "dims": list(volume.dims),
        "spacing": list(volume.spacing),
        "roster": list(volume.roster),
        "labeled": list(volume.present_classes()),
    }
    write_json(root / "header.json", header)
    (root / "image.raw").write_bytes(float64_bytes(volume.image))
    for name in volume.present_classes():
        (root / f"mask_{name}.raw").write_bytes(volume.masks[name].tobytes())


def load_volume(dir_path) -> LabeledVolume:
    root = Path(dir_path)
    header = read_json(root / "header.json")
    check_version(header.get("format_version"), VOLUME_FORMAT_VERSION, f"volume {root}")
    dims = tuple(int(d) for d in header["dims"])
    image = float64_from_bytes((root / "image.raw").read_bytes(), dims, f"volume {root}: image")
    masks = {}
    for name in header["labeled"]:
        buf = (root / f"mask_{name}.raw").read_bytes()
        masks[name] = uint8_from_bytes(buf, dims, f"volume {root}: mask {name}")
    return LabeledVolume(
        volume_id=str(header["id"]),
        image=image,
        roster=tuple(header["roster"]),
        masks=masks,
        spacing=tuple(float(s) for s in header.get("spacing", (1.0, 1.0, 1.0))),
    )


def save_cohort(volumes: list[LabeledVolume], root) -> None:
    for v in volumes:
        save_volume(v, Path(root) / v.volume_id)


def load_cohort(root) -> list[LabeledVolume]:
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "header.json").exists())
    if not dirs:
        raise FileNotFoundError(f"no volume directories under {root}")
    return [load_volume(p) for p in dirs]


def structure_spec_to_dict(s: StructureSpec) -> dict:
    return {
        "name": s.name,
        "shape": s.shape,
        "size_range": list(s.size_range),
        "base_center": list(s.base_center),
        "intensity": s.intensity,
        "intensity_sigma": s.intensity_sigma,
        "axis": s.axis,
    }


def structure_spec_from_dict(d: dict) -> StructureSpec:
    return StructureSpec(
        name=str(d["name"]),
        shape=str(d["shape"]),
        size_range=tuple(float(x) for x in d["size_range"]),
        base_center=tuple(float(x) for x in d["base_center"]),
        intensity=float(d["intensity"]),
        intensity_sigma=float(d.get("intensity_sigma", 0.04)),
        axis=str(d.get("axis", "d")),
    )


def phantom_spec_to_dict(spec: PhantomSpec) -> dict:
    return {
        "dims": list(spec.dims),
        "structures": [structure_spec_to_dict(s) for s in spec.structures],
        "noise_sigma": spec.noise_sigma,
        "jitter": spec.jitter,
        "background": spec.background,
        "max_retries": spec.max_retries,
    }


def phantom_spec_from_dict(d: dict) -> PhantomSpec:
    return PhantomSpec(
        dims=tuple(int(x) for x in d["dims"]),
        structures=tuple(structure_spec_from_dict(s) for s in d["structures"]),
        noise_sigma=float(d.get("noise_sigma", 0.04)),
        jitter=int(d.get("jitter", 2)),
        background=float(d.get("background", 0.15)),
        max_retries=int(d.get("max_retries", 30)),
    )


def default_desk_spec() -> PhantomSpec:
    """A 32-cube head-like phantom with two bilateral pairs and one midline tube.

    The eye pair sits far enough apart that a 16-cube patch centered on one
    member cannot see the other; the midline tube is visible from most patch
    positions and has a unique intensity, so it is never laterally ambiguous.
    """
    return PhantomSpec(
        dims=(32, 32, 32),
        structures=(
            StructureSpec("eye_left", "sphere", (3.2, 4.0), (8.0, 16.0, 8.0), 0.90),
            StructureSpec("eye_right", "sphere", (3.2, 4.0), (8.0, 16.0, 23.0), 0.90),
            StructureSpec("nerve_left", "tube", (3.6, 4.4), (21.0, 16.0, 7.0), 0.45, axis="d"),
            StructureSpec("nerve_right", "tube", (3.6, 4.4), (21.0, 16.0, 24.0), 0.45, axis="d"),
            StructureSpec("stem", "tube", (4.2, 5.0), (24.0, 16.0, 15.5), 0.65, axis="h"),
        ),
        noise_sigma=0.04,
        jitter=2,
        background=0.15,
    )


def tiny_phantom_spec() -> PhantomSpec:
    """16-cube variant of the desk layout, small enough to memorize in minutes."""
    return PhantomSpec(
        dims=(16, 16, 16),
        structures=(
            StructureSpec("eye_left", "sphere", (1.6, 2.0), (4.0, 8.0, 4.0), 0.90),
            StructureSpec("eye_right", "sphere", (1.6, 2.0), (4.0, 8.0, 11.0), 0.90),
            StructureSpec("nerve_left", "tube", (1.4, 1.8), (10.0, 8.0, 4.0), 0.45, axis="d"),
            StructureSpec("nerve_right", "tube", (1.4, 1.8), (10.0, 8.0, 11.0), 0.45, axis="d"),
            StructureSpec("stem", "tube", (2.0, 2.4), (12.0, 8.0, 7.5), 0.65, axis="h"),
        ),
        noise_sigma=0.04,
        jitter=1,
        background=0.15,
    )
