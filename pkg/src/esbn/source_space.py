"""Gridded source space, analytic leadfield and dipole orientations."""

from dataclasses import dataclass, replace

import numpy as np

from . import container
from .errors import (
    ConfigurationError,
    DegenerateOrientationError,
    DimensionError,
    GeometryError,
)


@dataclass(frozen=True)
class SourceSpace:
    """Sources on a regular cubic lattice clipped to a ball.

    Attributes
    ----------
    positions : ndarray, shape (N, 3)
        Source positions in mm.
    grid_spacing : float
        Lattice step in mm.
    grid_index : ndarray of int, shape (N, 3)
        Voxel coordinates of each source inside a ``grid_dims`` volume.
    grid_dims : tuple of int
    grid_origin : ndarray, shape (3,)
        Position of voxel (0, 0, 0).
    orientations : ndarray, shape (N, 3) or None
    """

    positions: np.ndarray
    grid_spacing: float
    grid_index: np.ndarray
    grid_dims: tuple
    grid_origin: np.ndarray
    radius: float = float("nan")
    orientations: np.ndarray = None

    def __post_init__(self):
        for name in ("positions", "grid_index", "grid_origin", "orientations"):
            value = getattr(self, name)
            if value is not None:
                value = np.array(value)
                value.setflags(write=False)
                object.__setattr__(self, name, value)
        if self.orientations is not None:
            norms = np.linalg.norm(self.orientations, axis=1)
            if self.orientations.shape != self.positions.shape or np.any(np.abs(norms - 1) > 1e-9):
                raise ConfigurationError("orientations must be N x 3 unit vectors")

    @property
    def n_sources(self):
        return self.positions.shape[0]

    def with_orientations(self, orientations):
        return replace(self, orientations=np.asarray(orientations, dtype=float))


@dataclass(frozen=True)
class LeadField:
    """Gain matrices mapping dipole moments to sensor potentials.

    ``gain_free`` holds three columns per source (x, y, z moment), so
    column ``3 * n + a`` is source ``n`` along axis ``a``.  ``gain_fixed``
    exists once the free gain has been collapsed onto one orientation per
    source, and ``orientations`` records that orientation.
    """

    gain_free: np.ndarray
    sensor_positions: np.ndarray = None
    gain_fixed: np.ndarray = None
    orientations: np.ndarray = None
    referenced: bool = False

    def __post_init__(self):
        for name in ("gain_free", "sensor_positions", "gain_fixed", "orientations"):
            value = getattr(self, name)
            if value is not None:
                value = np.array(value, dtype=float)
                value.setflags(write=False)
                object.__setattr__(self, name, value)
        if self.gain_free is not None:
            if self.gain_free.ndim != 2 or self.gain_free.shape[1] % 3:
                raise DimensionError(f"gain_free must be M x 3N, got {self.gain_free.shape}")
            if not np.all(np.isfinite(self.gain_free)):
                raise GeometryError("gain_free contains non-finite entries")

    @property
    def n_sensors(self):
        ref = self.gain_free if self.gain_free is not None else self.gain_fixed
        return ref.shape[0]

    @property
    def n_sources(self):
        if self.gain_free is not None:
            return self.gain_free.shape[1] // 3
        return self.gain_fixed.shape[1]

    def source_block(self, n):
        return self.gain_free[:, 3 * n:3 * n + 3]


def build_grid_source_space(radius_mm, spacing_mm, origin=(0.0, 0.0, 0.0), min_sources=8):
    """All lattice points within ``radius_mm`` of ``origin``.

    Sources are ordered lexicographically by voxel index.  ``min_sources``
    guards against accidentally degenerate grids; pass a smaller value to
    build toy spaces.
    """
    if not spacing_mm > 0 or not radius_mm > 0:
        raise ConfigurationError(
            f"need radius_mm > 0 and spacing_mm > 0, got {radius_mm}, {spacing_mm}"
        )
    origin = np.asarray(origin, dtype=float).reshape(3)
    half = int(np.floor(radius_mm / spacing_mm + 1e-9))
    side = 2 * half + 1
    idx = np.indices((side, side, side)).reshape(3, -1).T
    offset = idx - half
    # compare in lattice units so points exactly on the sphere are kept
    inside = (offset ** 2).sum(axis=1) <= (radius_mm / spacing_mm) ** 2 + 1e-9
    grid_index = idx[inside]
    if grid_index.shape[0] < min_sources:
        raise ConfigurationError(
            f"grid radius {radius_mm} mm / spacing {spacing_mm} mm yields "
            f"{grid_index.shape[0]} sources, fewer than {min_sources}"
        )
    grid_origin = origin - half * spacing_mm
    positions = grid_origin + grid_index * float(spacing_mm)
    return SourceSpace(
        positions=positions,
        grid_spacing=float(spacing_mm),
        grid_index=grid_index,
        grid_dims=(side, side, side),
        grid_origin=grid_origin,
        radius=float(radius_mm),
    )


def source_space_from_grid(grid_index, spacing_mm=1.0, grid_origin=(0.0, 0.0, 0.0), grid_dims=None):
    """Wrap arbitrary voxel indices (e.g. a full cube) as a :class:`SourceSpace`."""
    grid_index = np.asarray(grid_index, dtype=np.int64)
    if grid_dims is None:
        grid_dims = tuple(int(v) + 1 for v in grid_index.max(axis=0))
    grid_origin = np.asarray(grid_origin, dtype=float)
    return SourceSpace(
        positions=grid_origin + grid_index * float(spacing_mm),
        grid_spacing=float(spacing_mm),
        grid_index=grid_index,
        grid_dims=tuple(grid_dims),
        grid_origin=grid_origin,
    )


def hemisphere_sensors(n_sensors, radius_mm=100.0, center=(0.0, 0.0, 0.0)):
    """Deterministic golden-angle spiral over the upper hemisphere."""
    i = np.arange(n_sensors) + 0.5
    z = 1.0 - i / n_sensors
    r = np.sqrt(1.0 - z ** 2)
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    unit = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    return np.asarray(center, dtype=float) + radius_mm * unit


def dipole_potential(sensors, source, moment, conductivity=0.33):
    """Infinite homogeneous medium potential of a current dipole."""
    d = np.asarray(sensors, dtype=float) - np.asarray(source, dtype=float)
    dist = np.linalg.norm(d, axis=-1)
    return d @ np.asarray(moment, dtype=float) / (4.0 * np.pi * conductivity * dist ** 3)


def average_reference(lf):
    """Subtract the across-sensor mean from every gain column."""
    free = None if lf.gain_free is None else lf.gain_free - lf.gain_free.mean(axis=0)
    fixed = None if lf.gain_fixed is None else lf.gain_fixed - lf.gain_fixed.mean(axis=0)
    return replace(lf, gain_free=free, gain_fixed=fixed, referenced=True)


def analytic_leadfield(space, sensors, conductivity=0.33, reference=True, min_distance_mm=1.0):
    sensors = np.asarray(sensors, dtype=float)
    diff = sensors[:, None, :] - space.positions[None, :, :]  # M x N x 3
    dist = np.linalg.norm(diff, axis=-1)
    if dist.min() <= min_distance_mm:
        m, n = np.unravel_index(np.argmin(dist), dist.shape)
        raise GeometryError(
            f"sensor {m} lies {dist[m, n]:.3g} mm from source {n}; "
            f"minimum allowed is {min_distance_mm} mm"
        )
    gain = diff / (4.0 * np.pi * conductivity * dist[..., None] ** 3)
    lf = LeadField(gain_free=gain.reshape(sensors.shape[0], -1), sensor_positions=sensors)
    return average_reference(lf) if reference else lf


def principal_orientation(lf):
    """Unit vector of the channel-summed gain for every source.

    An average-referenced gain sums to zero over channels, so this is meant
    for the unreferenced model.  Sources whose summed gain vanishes raise
    :class:`DegenerateOrientationError`.
    """
    if lf.gain_free is None:
        raise DimensionError("principal orientation needs gain_free")
    sums = lf.gain_free.sum(axis=0).reshape(-1, 3)
    norms = np.linalg.norm(sums, axis=1)
    bad = np.flatnonzero(norms < 1e-12)
    if bad.size:
        raise DegenerateOrientationError(bad)
    return sums / norms[:, None]


def apply_loose_orientation(d, ori, act, loose):
    """Dipole moment for a source with a partially constrained orientation.

    The random orientation ``ori`` is first flipped into the hemisphere of
    the principal orientation ``d`` (``dot(ori, d) <= 0`` flips), mixed with
    ``d`` by the loose factor, renormalised, and scaled by ``act``.  Works
    element-wise over leading axes: ``d`` and ``ori`` are ``(..., 3)`` and
    ``act`` broadcasts against ``(...)``.
    """
    if not 0.0 <= loose <= 1.0:
        raise ConfigurationError(f"loose must lie in [0, 1], got {loose}")
    d = np.asarray(d, dtype=float)
    ori = np.asarray(ori, dtype=float)
    for name, v in (("d", d), ("ori", ori)):
        if np.any(np.abs(np.linalg.norm(v, axis=-1) - 1.0) > 1e-9):
            raise ConfigurationError(f"{name} must be unit vectors")
    if loose == 0.0:
        direction = d
    else:
        sign = np.where(np.sum(ori * d, axis=-1) > 0, 1.0, -1.0)
        mix = (1.0 - loose) * d + loose * sign[..., None] * ori
        direction = mix / np.linalg.norm(mix, axis=-1, keepdims=True)
    return np.asarray(act, dtype=float)[..., None] * direction


def collapse_leadfield(lf, orientations):
    orientations = np.asarray(orientations, dtype=float)
    n = lf.n_sources
    if orientations.shape != (n, 3):
        raise DimensionError(f"orientations must be {n} x 3, got {orientations.shape}")
    norms = np.linalg.norm(orientations, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise ConfigurationError("orientations must be unit vectors")
    blocks = lf.gain_free.reshape(lf.n_sensors, n, 3)
    fixed = np.einsum("mna,na->mn", blocks, orientations)
    return replace(lf, gain_fixed=fixed, orientations=orientations)


def source_depth_score(lf, n=None):
    """Absolute column sum of the fixed gain; smaller means deeper.

    With ``n=None`` the scores of all sources are returned.
    """
    if lf.gain_fixed is None:
        raise DimensionError("depth score needs gain_fixed")
    scores = np.abs(lf.gain_fixed).sum(axis=0)
    return scores if n is None else float(scores[n])


def head_model_from_gain(raw):
    """Orientations and the referenced, collapsed model of an unreferenced free gain.

    Orientations come from the unreferenced potentials because the
    referenced channel sums are identically zero.
    """
    d = principal_orientation(raw)
    return d, collapse_leadfield(average_reference(raw), d)


def build_head_model(space, sensors, conductivity=0.33):
    """Referenced, orientation-collapsed analytic model for ``space``.

    The orientations are attached to the returned source space.
    """
    raw = analytic_leadfield(space, sensors, conductivity, reference=False)
    d, lf = head_model_from_gain(raw)
    return space.with_orientations(d), lf


def export_leadfield(lf, path, meta=None, fixed=False):
    if fixed:
        if lf.gain_fixed is None:
            raise DimensionError("leadfield has no gain_fixed to export")
        container.write_matrix(path, lf.gain_fixed, container.KIND_LEADFIELD_FIXED, meta)
    else:
        container.write_matrix(path, lf.gain_free, container.KIND_LEADFIELD_FREE, meta)


def import_leadfield(path):
    kind, array, _ = container.read_matrix(
        path, kinds=(container.KIND_LEADFIELD_FREE, container.KIND_LEADFIELD_FIXED)
    )
    if kind == container.KIND_LEADFIELD_FREE:
        return LeadField(gain_free=array)
    return LeadField(gain_free=None, gain_fixed=array)
