"""Flow-field algebra on the counting grid.

A flow field stores, for every grid cell, the per-interval person mass
exchanged with its 3x3 neighborhood plus one extra channel for the world
outside the frame.  Channels 0..8 enumerate the (dy, dx) offsets over
{-1, 0, 1}^2 in row-major order, so channel 4 is the stay-in-place flow;
channel 9 is the exterior channel and is only meaningful at boundary cells.

Two representations of the same field exist: INCOMING indexes a flow at its
destination cell, OUTGOING at its source cell.  ``flow_transpose`` converts
between them without losing mass.

The array-level helpers (``channel_sum``, ``transpose_values``, ...) accept
either numpy arrays or torch tensors shaped ``(..., H, W, 10)`` so the same
algebra backs both the exact integer oracle checks and the differentiable
training loss.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

N_CHANNELS = 10
EXTERIOR = 9
CENTER = 4

# (dy, dx) for channels 0..8; channel index c = 3 * (dy + 1) + (dx + 1)
OFFSETS = tuple((dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1))


class GridDomainError(ValueError):
    """A cell, shape, or argument falls outside the grid contract."""


class RepresentationError(ValueError):
    """An operation received a flow field in the wrong representation."""


class Representation(Enum):
    INCOMING = "incoming"
    OUTGOING = "outgoing"


@dataclass(frozen=True)
class GridShape:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise GridDomainError(f"grid must be at least 1x1, got {self.width}x{self.height}")

    def contains(self, cell) -> bool:
        r, c = cell
        return 0 <= r < self.height and 0 <= c < self.width


def channel_for_offset(dy: int, dx: int) -> int:
    if dy not in (-1, 0, 1) or dx not in (-1, 0, 1):
        raise GridDomainError(f"offset ({dy}, {dx}) outside the 3x3 neighborhood")
    return 3 * (dy + 1) + (dx + 1)


def boundary_mask(shape: GridShape) -> np.ndarray:
    """Boolean (H, W) mask of cells with at least one off-grid neighbor."""
    mask = np.zeros((shape.height, shape.width), dtype=bool)
    mask[0, :] = True
    mask[-1, :] = True
    mask[:, 0] = True
    mask[:, -1] = True
    return mask


def validity_mask(shape: GridShape) -> np.ndarray:
    """Boolean (H, W, 10) mask of structurally legal channels.

    An interior channel is legal where its offset stays inside the grid
    (the condition is the same for both representations); the exterior
    channel is legal at boundary cells only.
    """
    h, w = shape.height, shape.width
    mask = np.zeros((h, w, N_CHANNELS), dtype=bool)
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    for c, (dy, dx) in enumerate(OFFSETS):
        mask[:, :, c] = ((rows + dy >= 0) & (rows + dy < h)
                         & (cols + dx >= 0) & (cols + dx < w))
    mask[:, :, EXTERIOR] = boundary_mask(shape)
    return mask


def neighborhood(cell, shape: GridShape):
    """In-grid 3x3 neighborhood of ``cell`` as (channel, neighbor) pairs.

    Returns ``(entries, is_boundary)`` where ``entries`` lists every channel
    0..8 whose offset lands inside the grid together with the neighbor cell
    it points at, and ``is_boundary`` is True when some offset leaves the
    grid.  The self channel (4) is always present.
    """
    if not shape.contains(cell):
        raise GridDomainError(f"cell {cell} outside {shape.width}x{shape.height} grid")
    r, c = cell
    entries = []
    is_boundary = False
    for ch, (dy, dx) in enumerate(OFFSETS):
        nr, nc = r + dy, c + dx
        if shape.contains((nr, nc)):
            entries.append((ch, (nr, nc)))
        else:
            is_boundary = True
    return entries, is_boundary


# ---------------------------------------------------------------------------
# Array-level core: numpy arrays or torch tensors, shape (..., H, W, 10).
# ---------------------------------------------------------------------------

def _new_zeros(like, shape):
    if isinstance(like, np.ndarray):
        return np.zeros(shape, dtype=like.dtype)
    return like.new_zeros(shape)


def _check_flow_shape(values, name="flow"):
    if values.ndim < 3 or values.shape[-1] != N_CHANNELS:
        raise GridDomainError(f"{name} must be shaped (..., H, W, {N_CHANNELS}), got {tuple(values.shape)}")


def channel_sum(values):
    """Per-cell sum of all ten channels: the arrival mass of an INCOMING field."""
    _check_flow_shape(values)
    return values.sum(-1)


def transpose_values(values):
    """Re-index each flow at the other end of its move.

    The value stored at cell j, channel c appears at cell j + offset(c),
    channel 8 - c in the result; the exterior channel is copied in place
    because it has no in-grid counterpart.  Mass in channels 0..8 is
    preserved for any field that keeps off-grid offsets at zero, and the
    restriction to channels 0..8 is an involution.
    """
    _check_flow_shape(values)
    h, w = values.shape[-3], values.shape[-2]
    out = _new_zeros(values, values.shape)
    for c, (dy, dx) in enumerate(OFFSETS):
        dst_r = slice(max(dy, 0), h + min(dy, 0))
        dst_c = slice(max(dx, 0), w + min(dx, 0))
        src_r = slice(max(-dy, 0), h + min(-dy, 0))
        src_c = slice(max(-dx, 0), w + min(-dx, 0))
        out[..., dst_r, dst_c, 8 - c] = values[..., src_r, src_c, c]
    out[..., EXTERIOR] = values[..., EXTERIOR]
    return out


def conservation_values(prev_values, next_values, exterior_out_next=None):
    """Per-cell gap between arrivals over (t-1, t) and departures over (t, t+1).

    ``prev_values`` and ``next_values`` are INCOMING fields for the two
    consecutive intervals.  Departures are read off the transposed next
    field (channels 0..8); mass leaving the frame during (t, t+1) is not
    recorded there, so it is either supplied per cell via
    ``exterior_out_next`` or the boundary cells are zeroed out of the
    residual.
    """
    _check_flow_shape(prev_values, "prev flow")
    _check_flow_shape(next_values, "next flow")
    if prev_values.shape != next_values.shape:
        raise GridDomainError(
            f"flow shapes differ: {tuple(prev_values.shape)} vs {tuple(next_values.shape)}")
    arrived = prev_values.sum(-1)
    departed = transpose_values(next_values)[..., :EXTERIOR].sum(-1)
    residual = arrived - departed
    if exterior_out_next is not None:
        if exterior_out_next.shape != residual.shape:
            raise GridDomainError(
                f"exterior outflow shape {tuple(exterior_out_next.shape)} does not match grid "
                f"{tuple(residual.shape)}")
        residual = residual - exterior_out_next
    else:
        residual[..., 0, :] = 0
        residual[..., -1, :] = 0
        residual[..., :, 0] = 0
        residual[..., :, -1] = 0
    return residual


def symmetry_values(fwd_values, bwd_values):
    """Channelwise gap between a forward field and the realigned backward field."""
    _check_flow_shape(fwd_values, "forward flow")
    _check_flow_shape(bwd_values, "backward flow")
    if fwd_values.shape != bwd_values.shape:
        raise GridDomainError(
            f"flow shapes differ: {tuple(fwd_values.shape)} vs {tuple(bwd_values.shape)}")
    return fwd_values - transpose_values(bwd_values)


# ---------------------------------------------------------------------------
# Typed containers and the operations on them.
# ---------------------------------------------------------------------------

@dataclass
class DensityMap:
    """Non-negative (H, W) person mass whose total is the frame count."""

    shape: GridShape
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        expected = (self.shape.height, self.shape.width)
        if self.values.shape != expected:
            raise GridDomainError(f"density values shaped {self.values.shape}, expected {expected}")
        if (self.values < 0).any():
            raise GridDomainError("density map has negative entries")


@dataclass
class FlowField:
    """Per-cell ten-channel person flows for one frame interval."""

    shape: GridShape
    values: np.ndarray
    representation: Representation = Representation.INCOMING

    def __post_init__(self):
        self.values = np.asarray(self.values)
        expected = (self.shape.height, self.shape.width, N_CHANNELS)
        if self.values.shape != expected:
            raise GridDomainError(f"flow values shaped {self.values.shape}, expected {expected}")
        if (self.values < 0).any():
            raise GridDomainError("flow field has negative entries")
        illegal = self.values[~validity_mask(self.shape)]
        if illegal.size and (illegal != 0).any():
            raise GridDomainError(
                "flow field carries mass on structurally illegal channels "
                "(off-grid offsets or exterior away from the boundary)")


def count(density: DensityMap) -> float:
    """Total person count of a density map."""
    return float(density.values.sum())


def reconstruct_density(flow: FlowField) -> DensityMap:
    """Density at the destination frame: per-cell sum of all arrival channels."""
    if flow.representation is not Representation.INCOMING:
        raise RepresentationError("density reconstruction needs an INCOMING field")
    return DensityMap(flow.shape, channel_sum(flow.values))


def emitted_density(flow: FlowField) -> DensityMap:
    """Source-side marginal: people who were at each cell and stayed in frame.

    Sums, over every destination, the flow that left each source cell; the
    exterior channel is excluded, so cells that lost people to the outside
    come up short by exactly that outflow.
    """
    if flow.representation is not Representation.INCOMING:
        raise RepresentationError("emitted density needs an INCOMING field")
    outgoing = transpose_values(flow.values)
    return DensityMap(flow.shape, outgoing[..., :EXTERIOR].sum(-1))


def flow_transpose(flow: FlowField) -> FlowField:
    """Same flows indexed at the other end of each move (toggles representation)."""
    toggled = (Representation.OUTGOING if flow.representation is Representation.INCOMING
               else Representation.INCOMING)
    return FlowField(flow.shape, transpose_values(flow.values), toggled)


def conservation_residual(flow_in_prev: FlowField, flow_in_next: FlowField,
                          exterior_out_next: DensityMap | None = None) -> np.ndarray:
    """People-conservation residual across two consecutive intervals.

    Zero everywhere for flows of a world where nobody appears or vanishes
    away from the frame edges; with the next interval's per-cell exits
    supplied, zero at the boundary too.  Without them the boundary cells
    are excluded (set to 0) rather than guessed.
    """
    for f, name in ((flow_in_prev, "previous"), (flow_in_next, "next")):
        if f.representation is not Representation.INCOMING:
            raise RepresentationError(f"{name} interval flow must be INCOMING")
    if flow_in_prev.shape != flow_in_next.shape:
        raise GridDomainError("flow fields cover different grids")
    ext = None
    if exterior_out_next is not None:
        if exterior_out_next.shape != flow_in_prev.shape:
            raise GridDomainError("exterior outflow covers a different grid")
        ext = exterior_out_next.values
    return conservation_values(flow_in_prev.values, flow_in_next.values, ext)


def symmetry_residual(flow_fwd: FlowField, flow_bwd: FlowField) -> np.ndarray:
    """Temporal-symmetry residual between a forward and a backward field.

    The backward field is realigned through the transpose so that matching
    moves land on the same (cell, channel); the exterior channels are paired
    in place.  Zero for exact time-reversed flow pairs of a closed world.
    """
    for f, name in ((flow_fwd, "forward"), (flow_bwd, "backward")):
        if f.representation is not Representation.INCOMING:
            raise RepresentationError(f"{name} flow must be INCOMING")
    if flow_fwd.shape != flow_bwd.shape:
        raise GridDomainError("flow fields cover different grids")
    return symmetry_values(flow_fwd.values, flow_bwd.values)


# ---------------------------------------------------------------------------
# Serialization: raw f32le buffer in (row, col, channel) order + JSON sidecar.
# ---------------------------------------------------------------------------

def _sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def save_grid(obj: FlowField | DensityMap, path) -> None:
    """Write a flow field or density map as a raw f32le buffer plus sidecar."""
    path = Path(path)
    if isinstance(obj, FlowField):
        values = obj.values
        channels = N_CHANNELS
        representation = obj.representation.value
    elif isinstance(obj, DensityMap):
        values = obj.values[..., None]
        channels = 1
        representation = "density"
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")
    path.write_bytes(np.ascontiguousarray(values, dtype="<f4").tobytes())
    sidecar = {
        "height": obj.shape.height,
        "width": obj.shape.width,
        "channels": channels,
        "representation": representation,
        "dtype": "f32le",
    }
    _sidecar_path(path).write_text(json.dumps(sidecar, sort_keys=True) + "\n")


def load_grid(path) -> FlowField | DensityMap:
    """Read back a buffer written by :func:`save_grid` (bit-exact for f32 data)."""
    path = Path(path)
    sidecar = json.loads(_sidecar_path(path).read_text())
    if sidecar.get("dtype") != "f32le":
        raise ValueError(f"unsupported buffer dtype {sidecar.get('dtype')!r} in {path}")
    h, w, k = sidecar["height"], sidecar["width"], sidecar["channels"]
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != h * w * k:
        raise ValueError(f"buffer {path} holds {raw.size} floats, expected {h * w * k}")
    values = raw.reshape(h, w, k)
    shape = GridShape(width=w, height=h)
    rep = sidecar["representation"]
    if rep == "density":
        if k != 1:
            raise ValueError(f"density sidecar with {k} channels in {path}")
        return DensityMap(shape, values[..., 0].copy())
    if k != N_CHANNELS:
        raise ValueError(f"flow sidecar with {k} channels in {path}")
    return FlowField(shape, values.copy(), Representation(rep))
