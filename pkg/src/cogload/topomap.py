"""Multi-spectral topography maps: multiquadric RBF interpolation of per-band
channel powers onto a 32x32 grid, Jet colour-mapped with a symmetric scale,
stacked into a 32x32x15 tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import CHANNEL_NAMES
from .spectral import N_BANDS
from .util import flag

GRID_SIZE = 32
N_PLANES = 3 * N_BANDS  # RGB per band

# Azimuthal projection of the four headband electrodes onto the unit disk.
ELECTRODE_POSITIONS: dict[str, tuple[float, float]] = {
    "TP9": (-0.95, -0.25),
    "AF7": (-0.55, 0.78),
    "AF8": (0.55, 0.78),
    "TP10": (0.95, -0.25),
}
MIRROR_PAIRS = (("TP9", "TP10"), ("AF7", "AF8"))

LOG_POWER_FLOOR = 1e-12


@dataclass(frozen=True)
class ElectrodeLayout:
    names: tuple[str, ...]
    positions: np.ndarray  # (4, 2) in the unit disk
    grid_x: np.ndarray  # (32,) ascending over [-1, 1]
    grid_y: np.ndarray  # (32,) ascending over [-1, 1]

    def __post_init__(self) -> None:
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.shape != (len(self.names), 2) or len(self.names) != 4:
            raise ValueError(f"layout needs 4 electrode positions, got {pos.shape}")
        if np.any(np.hypot(pos[:, 0], pos[:, 1]) > 1.0 + 1e-9):
            raise ValueError("electrode positions must lie inside the unit disk")
        index = {n: i for i, n in enumerate(self.names)}
        for left, right in MIRROR_PAIRS:
            pl, pr = pos[index[left]], pos[index[right]]
            if abs(pl[0] + pr[0]) > 1e-9 or abs(pl[1] - pr[1]) > 1e-9:
                raise ValueError(f"{left}/{right} must mirror across the vertical axis")
        object.__setattr__(self, "positions", pos)

    def grid_points(self) -> np.ndarray:
        """(1024, 2) lattice points, row-major over (y, x)."""
        gx, gy = np.meshgrid(self.grid_x, self.grid_y)
        return np.column_stack([gx.ravel(), gy.ravel()])


def default_layout() -> ElectrodeLayout:
    coords = np.linspace(-1.0, 1.0, GRID_SIZE)
    return ElectrodeLayout(
        names=CHANNEL_NAMES,
        positions=np.asarray([ELECTRODE_POSITIONS[n] for n in CHANNEL_NAMES]),
        grid_x=coords,
        grid_y=coords,
    )


def _multiquadric(r: np.ndarray, epsilon: float) -> np.ndarray:
    return np.sqrt(r * r + epsilon * epsilon)


@dataclass(frozen=True)
class RbfInterpolator:
    nodes: np.ndarray  # (4, 2)
    weights: np.ndarray  # (4,)
    epsilon: float

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        r = np.linalg.norm(pts[:, None, :] - self.nodes[None, :, :], axis=2)
        return _multiquadric(r, self.epsilon) @ self.weights


def fit_rbf(layout: ElectrodeLayout, values) -> RbfInterpolator:
    """Solve the exact 4x4 multiquadric system for the given node values.

    The kernel shape parameter is the mean pairwise node distance.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.shape != (4,):
        raise ValueError(f"need exactly 4 node values, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("node values must be finite")
    nodes = layout.positions
    dists = np.linalg.norm(nodes[:, None, :] - nodes[None, :, :], axis=2)
    epsilon = float(np.sum(dists) / (nodes.shape[0] * (nodes.shape[0] - 1)))
    a = _multiquadric(dists, epsilon)
    try:
        weights = np.linalg.solve(a, v)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"singular RBF system (coincident electrodes?): {exc}") from exc
    interp = RbfInterpolator(nodes=nodes, weights=weights, epsilon=epsilon)
    residual = float(np.max(np.abs(interp(nodes) - v)))
    if residual > 1e-6 * max(1.0, float(np.max(np.abs(v)))):
        raise ValueError(f"RBF fit failed to reproduce node values (residual {residual:g})")
    return interp


def render_band(interp: RbfInterpolator, layout: ElectrodeLayout) -> np.ndarray:
    """Evaluate the interpolant on the full 32x32 lattice (no head mask)."""
    field = interp(layout.grid_points())
    return field.reshape(GRID_SIZE, GRID_SIZE)


def jet_colormap(field: np.ndarray, vmax: float) -> np.ndarray:
    """Map a field through the symmetric [-vmax, +vmax] Jet scale to RGB in [0,1]."""
    field = np.asarray(field, dtype=np.float64)
    if vmax <= 0.0:
        flag("jet_colormap: non-positive vmax, emitting mid-scale colour")
        v = np.full_like(field, 0.5)
    else:
        v = (field + vmax) / (2.0 * vmax)
    r = np.clip(1.5 - np.abs(4.0 * v - 3.0), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4.0 * v - 2.0), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4.0 * v - 1.0), 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


@dataclass(frozen=True)
class MultiSpectralMap:
    tensor: np.ndarray  # (32, 32, 15), band-major RGB planes, values in [0, 1]

    def __post_init__(self) -> None:
        t = np.asarray(self.tensor, dtype=np.float64)
        if t.shape != (GRID_SIZE, GRID_SIZE, N_PLANES):
            raise ValueError(f"tensor must be {GRID_SIZE}x{GRID_SIZE}x{N_PLANES}, got {t.shape}")
        if np.any(t < 0.0) or np.any(t > 1.0) or not np.all(np.isfinite(t)):
            raise ValueError("tensor entries must be finite and in [0, 1]")
        object.__setattr__(self, "tensor", t)

    def channel_first(self) -> np.ndarray:
        """(15, 32, 32) view for convolutional input."""
        return np.transpose(self.tensor, (2, 0, 1))


def band_plane_values(values, log_power: bool = True) -> np.ndarray:
    """Per-band preparation of 4 channel values: optional log10, then centering."""
    v = np.asarray(values, dtype=np.float64)
    if log_power:
        v = np.log10(np.maximum(v, LOG_POWER_FLOOR))
    return v - v.mean()


def build_multispectral_map(
    band_powers: np.ndarray,
    layout: ElectrodeLayout | None = None,
    log_power: bool = True,
) -> MultiSpectralMap:
    """Build the 32x32x15 tensor from a (4 channels x 5 bands) power matrix.

    Each band is interpolated independently from its (log-transformed,
    mean-centred) channel values and colour-mapped with its own symmetric
    vmax taken from the rendered field.
    """
    powers = np.asarray(band_powers, dtype=np.float64)
    if powers.shape != (4, N_BANDS):
        raise ValueError(f"band powers must be (4, {N_BANDS}), got {powers.shape}")
    if layout is None:
        layout = default_layout()
    planes = np.empty((GRID_SIZE, GRID_SIZE, N_PLANES))
    for b in range(N_BANDS):
        centred = band_plane_values(powers[:, b], log_power=log_power)
        field = render_band(fit_rbf(layout, centred), layout)
        vmax = float(np.max(np.abs(field)))
        planes[:, :, 3 * b:3 * (b + 1)] = jet_colormap(field, vmax)
    return MultiSpectralMap(tensor=planes)


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an RGB [0,1] image as a binary PPM preview."""
    img = np.clip(np.asarray(rgb), 0.0, 1.0)
    data = (img * 255.0 + 0.5).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())
