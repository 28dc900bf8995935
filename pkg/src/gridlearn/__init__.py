"""Learning fault localization, dynamic state estimation and sensor placement on power grids."""

from .grid import GridError, GridNetwork, bundled_68, load_network, normalized_adjacency, synthesize_grid
from .models import ModelSpec, build, make_spec
from .train import TrainConfig, TrainReport, accuracy_db, train_dse, train_localizer

__version__ = "0.1.0"

__all__ = [
    "GridError", "GridNetwork", "bundled_68", "load_network", "normalized_adjacency", "synthesize_grid",
    "ModelSpec", "build", "make_spec",
    "TrainConfig", "TrainReport", "accuracy_db", "train_dse", "train_localizer",
]
