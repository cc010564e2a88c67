"""flowcount: video crowd counting via people-flow regression.

Counts are never regressed directly; the network predicts per-cell flows
between two frames, densities are reconstructed by summing arrivals, and
training enforces people conservation and temporal symmetry instead of
requiring flow ground truth.  An exact particle simulator provides
brute-force verification of the whole flow algebra.
"""

from .flowgrid import (
    DensityMap,
    FlowField,
    GridShape,
    Representation,
    conservation_residual,
    count,
    emitted_density,
    flow_transpose,
    load_grid,
    neighborhood,
    reconstruct_density,
    save_grid,
    symmetry_residual,
)
from .model import PLAIN_CONCAT, TEMPORAL_FUSION, FlowRegressor, ModelConfig
from .oracle import (
    ParticleWorld,
    WorldConfig,
    exterior_outflow,
    simulate,
    true_density,
    true_flow,
)
from .training import LossWeights, TrainConfig, predict_density, train, triplet_loss

__version__ = "0.1.0"
