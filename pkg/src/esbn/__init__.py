"""Edge sparse basis network (ESBN) for EEG source imaging, with numerical baselines.

The package is organised by stage:

- :mod:`esbn.source_space` grid source spaces, sensor layouts and leadfields
- :mod:`esbn.simulator` Gaussian-blob sources, noise at a target SNR, datasets
- :mod:`esbn.inverse` MNE, dSPM, sLORETA and eLORETA operators
- :mod:`esbn.network` the basis network, its losses, training and checkpoints
- :mod:`esbn.metrics` localization error, spatial dispersion and AUC
- :mod:`esbn.harness` experiment orchestration used by the ``esbn`` command
"""

from .config import TOOL_VERSION as __version__
from .config import ExperimentConfig, load_config, smoke_config
from .edges import EdgeOperator
from .errors import (
    ConfigurationError,
    DataError,
    DimensionError,
    EsbnError,
    FormatError,
    NumericError,
)
from .inverse import (
    PriorModel,
    apply_inverse,
    dspm_operator,
    eloreta_operator,
    mne_operator,
    sloreta_operator,
)
from .metrics import auc_score, localization_error, spatial_dispersion
from .network import EsbnHyper, esbn_forward, init_model, train_supervised
from .simulator import GaussianSourceConfig, synthesize_batch
from .source_space import (
    analytic_leadfield,
    build_grid_source_space,
    build_head_model,
    hemisphere_sensors,
)

__all__ = [
    "__version__", "ExperimentConfig", "load_config", "smoke_config", "EdgeOperator",
    "ConfigurationError", "DataError", "DimensionError", "EsbnError", "FormatError", "NumericError",
    "PriorModel", "apply_inverse", "dspm_operator", "eloreta_operator", "mne_operator",
    "sloreta_operator", "auc_score", "localization_error", "spatial_dispersion", "EsbnHyper",
    "esbn_forward", "init_model", "train_supervised", "GaussianSourceConfig", "synthesize_batch",
    "analytic_leadfield", "build_grid_source_space", "build_head_model", "hemisphere_sensors",
]
