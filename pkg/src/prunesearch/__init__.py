"""Differentiable width/depth pruning search with knowledge-distillation transfer."""

from .autodiff import Tensor, no_grad
from .config import ExperimentConfig, load_config
from .cost import CostSpec, LayerCostTable, cost_loss, e_cost, f_cost, val_loss
from .distill import KDSpec, kd_loss, match_loss, train_student, train_teacher
from .distributions import (
    ArchParams,
    DepthDistribution,
    DerivedArch,
    GumbelSample,
    TemperatureSchedule,
    WidthDistribution,
    derive,
    discrepancy,
    gumbel_soft_sample,
    sample_subset,
)
from .search import SearchRun, cosine_lr, split_dataset
from .supernet import (
    ConvNet,
    LayerSpec,
    SuperNetSpec,
    cwi,
    forward_fixed,
    forward_layer_search,
    forward_search,
    forward_stage_search,
    instantiate_derived,
)

__version__ = "0.1.0"
