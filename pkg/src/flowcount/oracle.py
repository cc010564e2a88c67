"""Exact particle-world simulator used as ground truth for the flow algebra.

Worlds hold per-particle trajectories on a small grid; from a trajectory the
true flow fields, densities, and exterior outflows are simple event counts,
so every conservation and symmetry identity can be checked integer-exactly.
A particle moves at most one cell per step in each axis; it may leave the
frame only from a boundary cell and re-enter only at one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .flowgrid import (
    EXTERIOR,
    N_CHANNELS,
    OFFSETS,
    DensityMap,
    FlowField,
    GridShape,
    Representation,
    boundary_mask,
    channel_for_offset,
)

# Trajectory state for a particle outside the frame.
EXITED = None

RNG_NAME = "numpy-pcg64"

DEFAULT_MOVE_DISTRIBUTION = (0.1, 0.1, 0.1, 0.1, 0.2, 0.1, 0.1, 0.1, 0.1)


@dataclass(frozen=True)
class WorldConfig:
    shape: GridShape
    n_particles: int
    n_steps: int
    move_distribution: tuple = DEFAULT_MOVE_DISTRIBUTION
    exit_probability: float = 0.0
    entry_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_particles < 0 or self.n_steps < 0:
            raise ValueError("particle and step counts must be non-negative")
        probs = np.asarray(self.move_distribution, dtype=float)
        if probs.shape != (9,):
            raise ValueError("move_distribution needs one probability per 3x3 offset")
        if (probs < 0).any() or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("move_distribution must be non-negative and sum to 1")
        if not 0.0 <= self.exit_probability <= 1.0:
            raise ValueError("exit_probability must lie in [0, 1]")
        if self.entry_rate < 0:
            raise ValueError("entry_rate must be non-negative")


@dataclass
class ParticleWorld:
    """Per-particle trajectories over n_steps+1 timesteps; EXITED is None."""

    shape: GridShape
    trajectories: list
    rng_seed: int = 0

    @property
    def n_steps(self) -> int:
        return len(self.trajectories[0]) - 1 if self.trajectories else 0

    @property
    def n_particles(self) -> int:
        return len(self.trajectories)

    def check_valid(self) -> None:
        for p, traj in enumerate(self.trajectories):
            for t, state in enumerate(traj):
                if state is EXITED:
                    continue
                if not self.shape.contains(state):
                    raise ValueError(f"particle {p} leaves the grid at step {t}: {state}")
                if t == 0:
                    continue
                prev = traj[t - 1]
                if prev is EXITED:
                    if not _is_boundary(state, self.shape):
                        raise ValueError(f"particle {p} re-enters away from the boundary at step {t}")
                elif max(abs(state[0] - prev[0]), abs(state[1] - prev[1])) > 1:
                    raise ValueError(f"particle {p} jumps more than one cell at step {t}")
            for t in range(1, len(traj)):
                if traj[t] is EXITED and traj[t - 1] is not EXITED:
                    if not _is_boundary(traj[t - 1], self.shape):
                        raise ValueError(f"particle {p} exits away from the boundary at step {t}")


def _is_boundary(cell, shape: GridShape) -> bool:
    r, c = cell
    return r == 0 or c == 0 or r == shape.height - 1 or c == shape.width - 1


def _boundary_cells(shape: GridShape):
    mask = boundary_mask(shape)
    return [(int(r), int(c)) for r, c in np.argwhere(mask)]


def simulate(config: WorldConfig) -> ParticleWorld:
    """Run the walk; deterministic for a fixed config (PCG64-seeded)."""
    rng = np.random.default_rng(config.seed)
    shape = config.shape
    boundary = _boundary_cells(shape)
    probs = np.asarray(config.move_distribution, dtype=float)

    states = [
        (int(rng.integers(shape.height)), int(rng.integers(shape.width)))
        for _ in range(config.n_particles)
    ]
    trajectories = [[s] for s in states]

    for _ in range(config.n_steps):
        prev = states
        states = []
        for cell in prev:
            if cell is EXITED:
                states.append(EXITED)
                continue
            if _is_boundary(cell, shape) and config.exit_probability > 0 \
                    and rng.random() < config.exit_probability:
                states.append(EXITED)
                continue
            legal = np.array([shape.contains((cell[0] + dy, cell[1] + dx)) for dy, dx in OFFSETS])
            mass = probs * legal
            total = mass.sum()
            if total <= 0.0:
                states.append(cell)  # nowhere legal to go under this distribution
                continue
            ch = int(rng.choice(9, p=mass / total))
            dy, dx = OFFSETS[ch]
            states.append((cell[0] + dy, cell[1] + dx))

        # Re-entries: particles outside the frame before this step may come
        # back through a random boundary cell, at most entry_rate on average.
        if config.entry_rate > 0:
            pool = [i for i, c in enumerate(prev) if c is EXITED]
            n_in = min(len(pool), int(rng.poisson(config.entry_rate)))
            if n_in:
                chosen = rng.choice(len(pool), size=n_in, replace=False)
                for k in chosen:
                    states[pool[int(k)]] = boundary[int(rng.integers(len(boundary)))]

        for traj, s in zip(trajectories, states):
            traj.append(s)

    return ParticleWorld(shape=shape, trajectories=trajectories, rng_seed=config.seed)


def _check_step(world: ParticleWorld, t: int, lo: int) -> None:
    if not lo <= t <= world.n_steps:
        raise ValueError(f"step {t} outside [{lo}, {world.n_steps}]")


def true_flow(world: ParticleWorld, t: int) -> FlowField:
    """Exact INCOMING flow field for the interval (t-1, t): integer move counts."""
    _check_step(world, t, lo=1)
    values = np.zeros((world.shape.height, world.shape.width, N_CHANNELS), dtype=np.int64)
    for traj in world.trajectories:
        src, dst = traj[t - 1], traj[t]
        if dst is EXITED:
            continue  # exits live in the backward field / exterior_outflow
        if src is EXITED:
            values[dst[0], dst[1], EXTERIOR] += 1
        else:
            ch = channel_for_offset(src[0] - dst[0], src[1] - dst[1])
            values[dst[0], dst[1], ch] += 1
    return FlowField(world.shape, values, Representation.INCOMING)


def true_density(world: ParticleWorld, t: int) -> DensityMap:
    """Exact occupancy counts at timestep t."""
    _check_step(world, t, lo=0)
    values = np.zeros((world.shape.height, world.shape.width), dtype=np.int64)
    for traj in world.trajectories:
        cell = traj[t]
        if cell is not EXITED:
            values[cell[0], cell[1]] += 1
    return DensityMap(world.shape, values)


def exterior_outflow(world: ParticleWorld, t: int) -> DensityMap:
    """Per-cell count of particles that left the frame during (t-1, t)."""
    _check_step(world, t, lo=1)
    values = np.zeros((world.shape.height, world.shape.width), dtype=np.int64)
    for traj in world.trajectories:
        src, dst = traj[t - 1], traj[t]
        if src is not EXITED and dst is EXITED:
            values[src[0], src[1]] += 1
    return DensityMap(world.shape, values)


def reversed_world(world: ParticleWorld) -> ParticleWorld:
    """The same world run backwards in time."""
    return ParticleWorld(
        shape=world.shape,
        trajectories=[list(reversed(traj)) for traj in world.trajectories],
        rng_seed=world.rng_seed,
    )


def is_closed(world: ParticleWorld) -> bool:
    """True when no particle is ever outside the frame."""
    return all(state is not EXITED for traj in world.trajectories for state in traj)


# ---------------------------------------------------------------------------
# Brute-force verification of the flow identities on random worlds.
# ---------------------------------------------------------------------------

def random_world_config(rng, max_size: int = 8, max_particles: int = 20,
                        max_steps: int = 10, open_world: bool = True) -> WorldConfig:
    shape = GridShape(width=int(rng.integers(1, max_size + 1)),
                      height=int(rng.integers(1, max_size + 1)))
    probs = rng.random(9) + 0.05
    probs /= probs.sum()
    return WorldConfig(
        shape=shape,
        n_particles=int(rng.integers(0, max_particles + 1)),
        n_steps=int(rng.integers(1, max_steps + 1)),
        move_distribution=tuple(probs),
        exit_probability=float(rng.uniform(0.05, 0.5)) if open_world else 0.0,
        entry_rate=float(rng.uniform(0.0, 2.0)) if open_world else 0.0,
        seed=int(rng.integers(0, 2 ** 31)),
    )


def invariant_violations(n_worlds: int = 100, seed: int = 0) -> list:
    """Check every exact flow identity on random worlds; returns violations.

    Alternates open worlds (with exits and re-entries) and closed ones.
    Density reconstruction, source-side accounting, and conservation with
    the true exterior outflow must hold integer-exactly on any world; the
    forward/backward symmetry must hold on the interior channels of any
    world and on all ten channels of a closed world, where the reversed
    world's flows coincide with the transposed forward flows.
    """
    from . import flowgrid as fg

    rng = np.random.default_rng(seed)
    violations = []

    def bad(world_idx, what):
        violations.append(f"world {world_idx}: {what}")

    for i in range(n_worlds):
        config = random_world_config(rng, open_world=(i % 2 == 0))
        world = simulate(config)
        try:
            world.check_valid()
        except ValueError as exc:
            bad(i, f"invalid trajectories: {exc}")
            continue
        if simulate(config).trajectories != world.trajectories:
            bad(i, "simulation is not deterministic for a fixed config")
        rev = reversed_world(world)
        n = world.n_steps
        for t in range(1, n + 1):
            flow = true_flow(world, t)
            dens = true_density(world, t)
            if not np.array_equal(fg.reconstruct_density(flow).values, dens.values):
                bad(i, f"density reconstruction mismatch at t={t}")
            emitted = fg.emitted_density(flow)
            expected_prev = true_density(world, t - 1).values
            if not np.array_equal(emitted.values + exterior_outflow(world, t).values,
                                  expected_prev):
                bad(i, f"source-side accounting mismatch at t={t}")
            twice = fg.flow_transpose(fg.flow_transpose(flow))
            if not np.array_equal(twice.values[..., :EXTERIOR], flow.values[..., :EXTERIOR]):
                bad(i, f"transpose is not an involution at t={t}")
            bwd = true_flow(rev, n - t + 1)
            sym = fg.symmetry_residual(flow, bwd)
            if sym[..., :EXTERIOR].any():
                bad(i, f"interior symmetry residual nonzero at t={t}")
            if is_closed(world):
                if sym.any():
                    bad(i, f"closed-world symmetry residual nonzero at t={t}")
                if not np.array_equal(fg.flow_transpose(flow).values, bwd.values):
                    bad(i, f"reversed-world flow differs from transposed flow at t={t}")
        for t in range(1, n):
            res = fg.conservation_residual(true_flow(world, t), true_flow(world, t + 1),
                                           exterior_outflow(world, t + 1))
            if res.any():
                bad(i, f"conservation residual nonzero at t={t}")
            masked = fg.conservation_residual(true_flow(world, t), true_flow(world, t + 1))
            if masked.any():
                bad(i, f"interior conservation residual nonzero at t={t}")
    return violations


# ---------------------------------------------------------------------------
# JSON fixtures.
# ---------------------------------------------------------------------------

def save_world(world: ParticleWorld, path) -> None:
    doc = {
        "shape": {"width": world.shape.width, "height": world.shape.height},
        "seed": world.rng_seed,
        "rng": RNG_NAME,
        "trajectories": [
            ["X" if s is EXITED else [int(s[0]), int(s[1])] for s in traj]
            for traj in world.trajectories
        ],
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_world(path) -> ParticleWorld:
    doc = json.loads(Path(path).read_text())
    shape = GridShape(width=doc["shape"]["width"], height=doc["shape"]["height"])
    trajectories = [
        [EXITED if s == "X" else (int(s[0]), int(s[1])) for s in traj]
        for traj in doc["trajectories"]
    ]
    world = ParticleWorld(shape=shape, trajectories=trajectories, rng_seed=doc.get("seed", 0))
    world.check_valid()
    return world
