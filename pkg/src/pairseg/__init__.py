"""Segmentation under noisy labels with joint class/affinity loss correction.

The package combines three ingredients: pair-wise affinity reasoning to
refine coarse predictions (DAR), noise-transition-matrix loss correction
at both the class level and the affinity level, and a consistency
regularizer tying the two NTMs together through an exact class-to-affinity
translation. A synthetic shapes dataset, noise synthesizers, and a CLI
make the whole pipeline runnable on a CPU in minutes.
"""

__version__ = "0.1.0"

from .affinity import affinity_map, dar_combine, dar_refine, reverse_affinity
from .dataset import Sample, ShapesConfig, gen_shapes
from .errors import PairsegError
from .grids import (
    MetricAccumulator,
    SegMetrics,
    dice_jaccard,
    from_one_hot,
    one_hot,
    read_grid,
    write_grid,
)
from .losses import (
    affinity_bce,
    affinity_corrected_loss,
    cacr,
    ce_loss,
    class_corrected_loss,
    finite_diff_check,
    joint_loss,
)
from .model import SegModel, TrainConfig, build_train_data, evaluate, train
from .noise import (
    NoiseReport,
    NoiseSpec,
    affinity_label,
    class_distribution,
    corrupt,
    empirical_ntm,
    noise_rates,
)
from .ntm import (
    mc_translate_oracle,
    ntm_from_params,
    translate_closed_form,
    translate_exact,
    volume_reg,
)

__all__ = [
    "__version__",
    "affinity_map", "dar_combine", "dar_refine", "reverse_affinity",
    "Sample", "ShapesConfig", "gen_shapes",
    "PairsegError",
    "MetricAccumulator", "SegMetrics", "dice_jaccard", "from_one_hot",
    "one_hot", "read_grid", "write_grid",
    "affinity_bce", "affinity_corrected_loss", "cacr", "ce_loss",
    "class_corrected_loss", "finite_diff_check", "joint_loss",
    "SegModel", "TrainConfig", "build_train_data", "evaluate", "train",
    "NoiseReport", "NoiseSpec", "affinity_label", "class_distribution",
    "corrupt", "empirical_ntm", "noise_rates",
    "mc_translate_oracle", "ntm_from_params", "translate_closed_form",
    "translate_exact", "volume_reg",
]
