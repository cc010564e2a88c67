"""Dataset plumbing: dot annotations, density rasterization, frame triplets,
augmentation, and synthetic sequence rendering from simulated worlds.

On-disk layout::

    root/
      manifest.json
      sequences/<seq>/frames/<idx>.png        (or .jpg)
      sequences/<seq>/annotations/<idx>.json  ({"frame": idx, "points": [[x, y], ...]})
      sequences/<seq>/world.json              (synthetic sequences only)

Annotation points are head positions in pixel coordinates of the stored
frame.  Splits are assigned per sequence, never per frame.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .flowgrid import DensityMap, GridShape
from .oracle import EXITED, ParticleWorld, WorldConfig, save_world, simulate

log = logging.getLogger(__name__)


class AnnotationError(ValueError):
    """A frame or annotation file is missing, malformed, or out of bounds."""


@dataclass
class DotAnnotations:
    frame_id: tuple  # (sequence, index)
    points: np.ndarray  # (N, 2) float, columns (x, y)
    image_size: tuple  # (width, height)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.points = pts

    def check_bounds(self, source="annotations"):
        w, h = self.image_size
        for i, (x, y) in enumerate(self.points):
            if not (0 <= x < w and 0 <= y < h):
                raise AnnotationError(
                    f"{source}: point {i} at ({x}, {y}) outside {w}x{h} image "
                    f"(frame {self.frame_id})")


@dataclass
class DatasetManifest:
    root: Path
    image_size: tuple  # (width, height) the pipeline resizes to
    offset: int
    mean: tuple  # per-channel normalization constants
    std: tuple
    sequences: dict  # name -> frame count
    splits: dict  # split name -> list of sequence names

    def __post_init__(self):
        self.root = Path(self.root)
        seen = {}
        for split, names in self.splits.items():
            for name in names:
                if name in seen:
                    raise ValueError(
                        f"sequence {name!r} assigned to both {seen[name]!r} and {split!r}")
                if name not in self.sequences:
                    raise ValueError(f"split {split!r} references unknown sequence {name!r}")
                seen[name] = split
        if self.offset < 1:
            raise ValueError("offset must be at least 1")

    def to_dict(self) -> dict:
        return {
            "image_size": list(self.image_size),
            "offset": self.offset,
            "normalization": {"mean": list(self.mean), "std": list(self.std)},
            "sequences": self.sequences,
            "splits": self.splits,
        }

    def save(self) -> None:
        path = self.root / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    doc = json.loads((root / "manifest.json").read_text())
    return DatasetManifest(
        root=root,
        image_size=tuple(doc["image_size"]),
        offset=int(doc["offset"]),
        mean=tuple(doc["normalization"]["mean"]),
        std=tuple(doc["normalization"]["std"]),
        sequences={k: int(v) for k, v in doc["sequences"].items()},
        splits={k: list(v) for k, v in doc["splits"].items()},
    )


def sequence_dir(root, seq: str) -> Path:
    return Path(root) / "sequences" / seq


def frame_path(root, seq: str, index: int) -> Path:
    base = sequence_dir(root, seq) / "frames"
    for ext in (".png", ".jpg"):
        p = base / f"{index:04d}{ext}"
        if p.exists():
            return p
    raise AnnotationError(f"missing frame file {base / f'{index:04d}.png'}")


def annotation_path(root, seq: str, index: int) -> Path:
    return sequence_dir(root, seq) / "annotations" / f"{index:04d}.json"


def load_frame(root, seq: str, index: int) -> np.ndarray:
    """Frame as float32 (H, W, 3) in [0, 1], at stored resolution."""
    with Image.open(frame_path(root, seq, index)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def load_frame_annotations(root, seq: str, index: int, image_size=None) -> DotAnnotations:
    path = annotation_path(root, seq, index)
    if not path.exists():
        raise AnnotationError(f"missing annotation file {path}")
    try:
        doc = json.loads(path.read_text())
        points = np.asarray(doc.get("points", []), dtype=np.float64).reshape(-1, 2)
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        raise AnnotationError(f"malformed annotation file {path}: {exc}") from None
    if image_size is None:
        with Image.open(frame_path(root, seq, index)) as im:
            image_size = im.size  # (width, height)
    ann = DotAnnotations(frame_id=(seq, index), points=points, image_size=tuple(image_size))
    ann.check_bounds(source=str(path))
    return ann


def load_annotations(seq_path) -> list:
    """All annotation records of one sequence directory, in frame order."""
    seq_path = Path(seq_path)
    frames_dir = seq_path / "frames"
    if not frames_dir.is_dir():
        raise AnnotationError(f"no frames directory under {seq_path}")
    indices = sorted(int(p.stem) for p in frames_dir.iterdir()
                     if p.suffix in (".png", ".jpg"))
    root = seq_path.parent.parent
    seq = seq_path.name
    return [load_frame_annotations(root, seq, i) for i in indices]


def write_annotations(root, seq: str, index: int, points) -> None:
    path = annotation_path(root, seq, index)
    path.parent.mkdir(parents=True, exist_ok=True)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    path.write_text(json.dumps({"frame": index, "points": pts.tolist()}) + "\n")


def write_frame(root, seq: str, index: int, image: np.ndarray) -> None:
    path = sequence_dir(root, seq) / "frames" / f"{index:04d}.png"
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


# ---------------------------------------------------------------------------
# Ground-truth density rasterization.
# ---------------------------------------------------------------------------

def rasterize_points(points, image_size, grid: GridShape, sigma: float) -> DensityMap:
    """Splat head points onto the grid as unit-mass truncated Gaussians.

    Each point lands at its scaled grid position and spreads over cell
    centers within 3 sigma; the kernel is renormalized over the in-grid
    cells so every dot contributes exactly one person regardless of
    clipping at the borders.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    iw, ih = image_size
    gh, gw = grid.height, grid.width
    density = np.zeros((gh, gw), dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    radius = 3.0 * sigma
    for x, y in pts:
        gx = x * gw / iw
        gy = y * gh / ih
        r0 = max(int(np.floor(gy - radius - 0.5)), 0)
        r1 = min(int(np.ceil(gy + radius - 0.5)), gh - 1)
        c0 = max(int(np.floor(gx - radius - 0.5)), 0)
        c1 = min(int(np.ceil(gx + radius - 0.5)), gw - 1)
        if r0 > r1 or c0 > c1:
            r_near = min(max(int(gy), 0), gh - 1)
            c_near = min(max(int(gx), 0), gw - 1)
            density[r_near, c_near] += 1.0
            continue
        rows = np.arange(r0, r1 + 1, dtype=np.float64) + 0.5
        cols = np.arange(c0, c1 + 1, dtype=np.float64) + 0.5
        d2 = (rows[:, None] - gy) ** 2 + (cols[None, :] - gx) ** 2
        kernel = np.exp(-d2 / (2.0 * sigma * sigma))
        kernel[d2 > radius * radius] = 0.0
        total = kernel.sum()
        if total <= 0.0:
            r_near = min(max(int(gy), 0), gh - 1)
            c_near = min(max(int(gx), 0), gw - 1)
            density[r_near, c_near] += 1.0
            continue
        density[r0:r1 + 1, c0:c1 + 1] += kernel / total
    return DensityMap(grid, density)


def rasterize_density(dots: DotAnnotations, grid: GridShape, sigma: float = 1.0) -> DensityMap:
    return rasterize_points(dots.points, dots.image_size, grid, sigma)


# ---------------------------------------------------------------------------
# Triplets and augmentation.
# ---------------------------------------------------------------------------

@dataclass
class FrameTriplet:
    """Three frames (t-offset, t, t+offset) with aligned points and densities."""

    seq: str
    center: int
    offset: int
    images: list  # three float32 (H, W, 3) arrays
    points: list  # three (N, 2) arrays in current image pixels
    densities: list  # three DensityMap at grid resolution
    sigma: float
    normalized: bool = False

    @property
    def image_size(self) -> tuple:
        h, w = self.images[0].shape[:2]
        return (w, h)

    @property
    def grid(self) -> GridShape:
        return self.densities[0].shape


def triplet_centers(manifest: DatasetManifest, split: str) -> list:
    """(sequence, center) keys for every valid triplet of a split."""
    keys = []
    for seq in manifest.splits.get(split, []):
        n = manifest.sequences[seq]
        if n < 2 * manifest.offset + 1:
            log.warning("sequence %s has %d frames, too short for offset %d; skipped",
                        seq, n, manifest.offset)
            continue
        keys.extend((seq, t) for t in range(manifest.offset, n - manifest.offset))
    return keys


def pair_centers(manifest: DatasetManifest, split: str) -> list:
    """(sequence, t) keys with a valid predecessor frame t - offset."""
    keys = []
    for seq in manifest.splits.get(split, []):
        n = manifest.sequences[seq]
        keys.extend((seq, t) for t in range(manifest.offset, n))
    return keys


def load_pair(manifest: DatasetManifest, seq: str, t: int, grid: GridShape,
              sigma: float = 1.0):
    """Frames (t - offset, t), the current frame's points, and its GT density."""
    tw, th = manifest.image_size
    images = []
    for idx in (t - manifest.offset, t):
        images.append(resize_image(load_frame(manifest.root, seq, idx), (tw, th)))
    ann = load_frame_annotations(manifest.root, seq, t)
    ow, oh = ann.image_size
    pts = ann.points.copy()
    if (ow, oh) != (tw, th) and len(pts):
        pts[:, 0] *= tw / ow
        pts[:, 1] *= th / oh
    density = rasterize_points(pts, (tw, th), grid, sigma)
    return images[0], images[1], pts, density


def resize_image(image: np.ndarray, size) -> np.ndarray:
    w, h = size
    if image.shape[0] == h and image.shape[1] == w:
        return image
    im = Image.fromarray((np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8))
    return np.asarray(im.resize((w, h), Image.BILINEAR), dtype=np.float32) / 255.0


def load_triplet(manifest: DatasetManifest, seq: str, center: int, grid: GridShape,
                 sigma: float = 1.0) -> FrameTriplet:
    """Assemble one un-normalized triplet, resized to the manifest target size."""
    tw, th = manifest.image_size
    images, points, densities = [], [], []
    for t in (center - manifest.offset, center, center + manifest.offset):
        ann = load_frame_annotations(manifest.root, seq, t)
        img = load_frame(manifest.root, seq, t)
        ow, oh = ann.image_size
        img = resize_image(img, (tw, th))
        pts = ann.points.copy()
        if (ow, oh) != (tw, th) and len(pts):
            pts[:, 0] *= tw / ow
            pts[:, 1] *= th / oh
        images.append(img)
        points.append(pts)
        densities.append(rasterize_points(pts, (tw, th), grid, sigma))
    return FrameTriplet(seq=seq, center=center, offset=manifest.offset,
                        images=images, points=points, densities=densities, sigma=sigma)


def make_triplets(manifest: DatasetManifest, split: str, grid: GridShape,
                  sigma: float = 1.0, mode: str = "eval", seed: int = 0):
    """Stream triplets of a split; deterministic order in eval mode, seeded
    shuffle in train mode."""
    keys = triplet_centers(manifest, split)
    if mode == "train":
        rng = np.random.default_rng(seed)
        keys = [keys[i] for i in rng.permutation(len(keys))]
    elif mode != "eval":
        raise ValueError(f"unknown mode {mode!r}")
    for seq, t in keys:
        yield load_triplet(manifest, seq, t, grid, sigma)


def hflip_points(points: np.ndarray, image_width: int) -> np.ndarray:
    """Mirror x coordinates; applying twice is the identity."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2).copy()
    if len(pts):
        pts[:, 0] = image_width - 1 - pts[:, 0]
    return pts


def normalize_image(image: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    return (image - mean) / std


def augment(triplet: FrameTriplet, rng, crop_fraction: float = 0.9,
            mean=None, std=None) -> FrameTriplet:
    """One random flip/crop draw applied identically to all three frames.

    Crops keep ``crop_fraction`` of each dimension and resize back to the
    original size; densities are re-rasterized from the transformed points,
    never warped.  When normalization constants are given the images are
    standardized as the last step.
    """
    if not 0.0 < crop_fraction <= 1.0:
        raise ValueError("crop_fraction must lie in (0, 1]")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    w, h = triplet.image_size
    grid, sigma = triplet.grid, triplet.sigma

    do_flip = rng.random() < 0.5
    cw = max(int(round(w * crop_fraction)), 1)
    ch = max(int(round(h * crop_fraction)), 1)
    x0 = int(rng.integers(0, w - cw + 1))
    y0 = int(rng.integers(0, h - ch + 1))

    images, points, densities = [], [], []
    for img, pts in zip(triplet.images, triplet.points):
        im, p = img, np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        if do_flip:
            im = im[:, ::-1].copy()
            p = hflip_points(p, w)
        if (cw, ch) != (w, h):
            keep = np.ones(len(p), dtype=bool)
            if len(p):
                keep = ((p[:, 0] >= x0) & (p[:, 0] < x0 + cw)
                        & (p[:, 1] >= y0) & (p[:, 1] < y0 + ch))
            p = p[keep].copy()
            if len(p):
                p[:, 0] = (p[:, 0] - x0) * w / cw
                p[:, 1] = (p[:, 1] - y0) * h / ch
            im = resize_image(im[y0:y0 + ch, x0:x0 + cw], (w, h))
        if mean is not None and std is not None:
            im = normalize_image(im, mean, std)
        images.append(im.astype(np.float32))
        points.append(p)
        densities.append(rasterize_points(p, (w, h), grid, sigma))
    return replace(triplet, images=images, points=points, densities=densities,
                   normalized=mean is not None)


def normalize_triplet(triplet: FrameTriplet, mean, std) -> FrameTriplet:
    images = [normalize_image(im, mean, std).astype(np.float32) for im in triplet.images]
    return replace(triplet, images=images, normalized=True)


# ---------------------------------------------------------------------------
# Synthetic sequences rendered from simulated worlds.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RenderStyle:
    blob_sigma: float = 2.0  # pixels
    intensity: float = 1.0
    background: float = 0.05
    noise: float = 0.01
    seed: int = 0


def render_world_frame(world: ParticleWorld, t: int, image_size, style: RenderStyle):
    """Render one timestep as an image plus its dot annotations."""
    iw, ih = image_size
    gw, gh = world.shape.width, world.shape.height
    if iw < gw or ih < gh:
        raise ValueError(f"image {iw}x{ih} smaller than the {gw}x{gh} world grid")
    cell_w = iw / gw
    cell_h = ih / gh
    canvas = np.full((ih, iw), style.background, dtype=np.float64)
    dots = []
    radius = 3.0 * style.blob_sigma
    ys = np.arange(ih, dtype=np.float64) + 0.5
    xs = np.arange(iw, dtype=np.float64) + 0.5
    for traj in world.trajectories:
        cell = traj[t]
        if cell is EXITED:
            continue
        cx = (cell[1] + 0.5) * cell_w
        cy = (cell[0] + 0.5) * cell_h
        dots.append((cx, cy))
        y0 = max(int(cy - radius - 1), 0)
        y1 = min(int(cy + radius + 1), ih - 1)
        x0 = max(int(cx - radius - 1), 0)
        x1 = min(int(cx + radius + 1), iw - 1)
        d2 = ((ys[y0:y1 + 1, None] - cy) ** 2 + (xs[None, x0:x1 + 1] - cx) ** 2)
        canvas[y0:y1 + 1, x0:x1 + 1] += style.intensity * np.exp(
            -d2 / (2.0 * style.blob_sigma ** 2))
    if style.noise > 0:
        frame_rng = np.random.default_rng([style.seed, t])
        canvas = canvas + frame_rng.normal(0.0, style.noise, canvas.shape)
    canvas = np.clip(canvas, 0.0, 1.0).astype(np.float32)
    image = np.repeat(canvas[:, :, None], 3, axis=2)
    points = np.asarray(dots, dtype=np.float64).reshape(-1, 2)
    return image, points


def render_synthetic(world: ParticleWorld, image_size, style: RenderStyle):
    """All frames of a world as (image, DotAnnotations) pairs."""
    out = []
    for t in range(world.n_steps + 1):
        image, points = render_world_frame(world, t, image_size, style)
        out.append((image, DotAnnotations(frame_id=("synthetic", t), points=points,
                                          image_size=tuple(image_size))))
    return out


def build_synthetic_dataset(root, base_config: WorldConfig, n_sequences: int,
                            split_counts, image_size=(64, 64),
                            style: RenderStyle = RenderStyle(), offset: int = 1,
                            ) -> DatasetManifest:
    """Simulate, render, and write a complete dataset with manifest.

    ``split_counts`` maps split names to sequence counts; sequences are
    assigned in generation order.  Per-sequence worlds reuse the base
    config with seeds base_seed, base_seed + 1, ...  Normalization
    constants are measured from the rendered frames.
    """
    root = Path(root)
    if sum(split_counts.values()) != n_sequences:
        raise ValueError("split counts must add up to n_sequences")
    sequences = {}
    splits = {name: [] for name in split_counts}
    order = [name for name, cnt in split_counts.items() for _ in range(cnt)]
    pixel_sum = np.zeros(3, dtype=np.float64)
    pixel_sqsum = np.zeros(3, dtype=np.float64)
    n_pixels = 0
    for i in range(n_sequences):
        seq = f"seq{i:03d}"
        world = simulate(replace_seed(base_config, base_config.seed + i))
        seq_style = RenderStyle(blob_sigma=style.blob_sigma, intensity=style.intensity,
                                background=style.background, noise=style.noise,
                                seed=style.seed + i)
        for t in range(world.n_steps + 1):
            image, points = render_world_frame(world, t, image_size, seq_style)
            write_frame(root, seq, t, image)
            write_annotations(root, seq, t, points)
            pixel_sum += image.reshape(-1, 3).sum(0)
            pixel_sqsum += (image.reshape(-1, 3) ** 2).sum(0)
            n_pixels += image.shape[0] * image.shape[1]
        save_world(world, sequence_dir(root, seq) / "world.json")
        sequences[seq] = world.n_steps + 1
        splits[order[i]].append(seq)
    mean = pixel_sum / n_pixels
    var = pixel_sqsum / n_pixels - mean ** 2
    std = np.sqrt(np.maximum(var, 1e-12))
    manifest = DatasetManifest(root=root, image_size=tuple(image_size), offset=offset,
                               mean=tuple(float(m) for m in mean),
                               std=tuple(float(s) for s in std),
                               sequences=sequences, splits=splits)
    manifest.save()
    return manifest


def replace_seed(config: WorldConfig, seed: int) -> WorldConfig:
    return replace(config, seed=seed)
