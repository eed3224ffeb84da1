"""Cross-domain face synthesis at desk scale.

A 3D pose simulator, a three-player adversarial refiner that transfers
target-domain capture conditions onto simulated faces, and a
recognition-via-generation evaluation harness (watch-list pAUC/mAP, FID,
ablations, matching-time bench).
"""

__version__ = "0.1.0"

from . import datakit, evalsuite, losses, netarch, recognition, shape3d, trainer  # noqa: F401
from .datakit import DeskDatasetSpec, generate_desk_dataset, ingest, load_dataset  # noqa: F401
from .losses import LossConfig, LossValue  # noqa: F401
from .netarch import NetSpec, ParamBundle, init_params, load_checkpoint, save_checkpoint  # noqa: F401
from .recognition import (  # noqa: F401
    EmbeddingProvider,
    ProtocolConfig,
    mean_average_precision,
    pauc20,
    run_protocol,
    train_desk_embedding,
)
from .shape3d import (  # noqa: F401
    CameraPose,
    ShapeCoefficients,
    ShapeModel,
    SimulatedFace,
    build_synthetic_shape_model,
    pose_grid,
    render,
    simulate,
)
from .trainer import TrainConfig, refine_gallery, resume, train  # noqa: F401
