"""bevlab: a desk-scale BEV 3D detection lab.

A camera-only bird's-eye-view detector augmented by a lightweight LiDAR
prompter (hierarchical gated fusion + online cross-modal distillation),
trained and evaluated end to end on procedurally generated scenes.
"""

__version__ = "0.1.0"

from .config import (  # noqa: F401
    DistillWeights,
    GridSpec,
    ModelSpec,
    TrainConfig,
    WorldSpec,
)
from .geometry import Box3D  # noqa: F401
from .scenes import Scene, build_dataset, generate_scene, load_scene  # noqa: F401
