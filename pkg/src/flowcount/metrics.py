"""Counting and localization error metrics.

MAE and RMSE compare per-frame totals.  GAME additionally penalizes
misplaced mass: the map is tiled into regions and the absolute count error
is summed per region before averaging over frames, so mass predicted in the
wrong region no longer cancels.  Region tilings come in two flavors: the
power-of-four scheme (level L splits each axis into 2^L near-equal bands,
4^L regions total) and a fixed grid of a given width and height in regions.
At one region per cell GAME degenerates to the per-cell L1 distance; at a
single region it equals MAE.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

POWER_OF_4 = "power_of_4"
FIXED_GRID = "fixed_grid"


def mae(gt_counts, pred_counts) -> float:
    gt = np.asarray(gt_counts, dtype=np.float64)
    pred = np.asarray(pred_counts, dtype=np.float64)
    if gt.shape != pred.shape or gt.ndim != 1:
        raise ValueError("count lists must be 1-d and equally long")
    if gt.size == 0:
        raise ValueError("cannot average over zero frames")
    return float(np.abs(gt - pred).mean())


def rmse(gt_counts, pred_counts) -> float:
    gt = np.asarray(gt_counts, dtype=np.float64)
    pred = np.asarray(pred_counts, dtype=np.float64)
    if gt.shape != pred.shape or gt.ndim != 1:
        raise ValueError("count lists must be 1-d and equally long")
    if gt.size == 0:
        raise ValueError("cannot average over zero frames")
    return float(np.sqrt(((gt - pred) ** 2).mean()))


def _bands(size: int, n: int):
    """n contiguous bands covering [0, size); remainders go to leading bands."""
    if n > size:
        raise ValueError(f"cannot split {size} cells into {n} bands")
    base, rem = divmod(size, n)
    edges = [0]
    for i in range(n):
        edges.append(edges[-1] + base + (1 if i < rem else 0))
    return edges


@dataclass(frozen=True)
class GamePartition:
    """A rectangular tiling of an (H, W) map into disjoint regions."""

    mode: str
    row_edges: tuple
    col_edges: tuple

    @classmethod
    def power_of_4(cls, level: int, map_height: int, map_width: int) -> "GamePartition":
        if level < 0:
            raise ValueError("level must be non-negative")
        n = 2 ** level
        return cls(POWER_OF_4, tuple(_bands(map_height, n)), tuple(_bands(map_width, n)))

    @classmethod
    def fixed_grid(cls, grid_width: int, grid_height: int,
                   map_height: int, map_width: int) -> "GamePartition":
        return cls(FIXED_GRID, tuple(_bands(map_height, grid_height)),
                   tuple(_bands(map_width, grid_width)))

    @property
    def n_regions(self) -> int:
        return (len(self.row_edges) - 1) * (len(self.col_edges) - 1)

    def check_covers(self, map_height: int, map_width: int) -> None:
        if self.row_edges[-1] != map_height or self.col_edges[-1] != map_width:
            raise ValueError(
                f"partition tiles {self.col_edges[-1]}x{self.row_edges[-1]}, "
                f"maps are {map_width}x{map_height}")

    def region_sums(self, values: np.ndarray) -> np.ndarray:
        self.check_covers(values.shape[0], values.shape[1])
        nr = len(self.row_edges) - 1
        nc = len(self.col_edges) - 1
        sums = np.empty((nr, nc), dtype=np.float64)
        for i in range(nr):
            for j in range(nc):
                sums[i, j] = values[self.row_edges[i]:self.row_edges[i + 1],
                                    self.col_edges[j]:self.col_edges[j + 1]].sum()
        return sums


def game(gt_maps, pred_maps, partition: GamePartition) -> float:
    """Mean over frames of the summed per-region absolute count errors."""
    if len(gt_maps) != len(pred_maps):
        raise ValueError("need one prediction per ground-truth map")
    if not gt_maps:
        raise ValueError("cannot average over zero frames")
    per_frame = np.empty(len(gt_maps), dtype=np.float64)
    for n, (gt, pred) in enumerate(zip(gt_maps, pred_maps)):
        gt_v = gt.values if hasattr(gt, "values") else np.asarray(gt)
        pred_v = pred.values if hasattr(pred, "values") else np.asarray(pred)
        if gt_v.shape != pred_v.shape:
            raise ValueError(f"map shapes differ: {gt_v.shape} vs {pred_v.shape}")
        diff = partition.region_sums(gt_v) - partition.region_sums(pred_v)
        per_frame[n] = np.abs(diff).sum()
    return float(per_frame.mean())


def game_levels(gt_maps, pred_maps, levels=(0, 1, 2, 3)) -> dict:
    """GAME at several power-of-four levels for one shared map shape."""
    first = gt_maps[0].values if hasattr(gt_maps[0], "values") else np.asarray(gt_maps[0])
    h, w = first.shape
    return {
        int(lv): game(gt_maps, pred_maps, GamePartition.power_of_4(lv, h, w))
        for lv in levels
    }


def game_per_cell(gt_maps, pred_maps) -> float:
    """GAME with every cell its own region: mean per-frame L1 distance."""
    first = gt_maps[0].values if hasattr(gt_maps[0], "values") else np.asarray(gt_maps[0])
    h, w = first.shape
    return game(gt_maps, pred_maps, GamePartition.fixed_grid(w, h, h, w))
