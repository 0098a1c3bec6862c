"""Selective state-space classification of hyperspectral pixels in numpy.

The package covers the autodiff plumbing (:mod:`.ndtensor`), the SSM kernels
(:mod:`.ssm`), the network itself (:mod:`.model`), scene handling and splits
(:mod:`.data`, :mod:`.formats`), training and evaluation (:mod:`.train`,
:mod:`.metrics`) and analytic cost counts (:mod:`.cost`).
"""

__version__ = "0.1.0"

from .cost import CostReport, cost_report, count_macs, count_params, layer_costs, param_count
from .data import (HsiCube, LabelMap, Split, SplitSpec, extract_patches, extract_pixels,
                   homogeneous_segments, make_split, normalize, slic_segment, synth_scene)
from .errors import (ConfigError, ContractError, DimensionError, FormatError, NumericError,
                     SpectralMambaError, SplitError, TargetIndexError)
from .formats import (load_cube, load_labels, load_weights, save_class_map_ppm, save_cube,
                      save_labels, save_weights)
from .metrics import Metrics, confusion_matrix, metrics_from_confusion
from .model import (ModelConfig, ModelWeights, forward, gssm_mask, gssm_merge, init_weights,
                    mamba_block, predict, pss_scan, pss_unscan)
from .ssm import (DiscreteSsm, LtiSsm, SelectiveSsmParams, conv_scan, discretize_taylor,
                  discretize_zoh, recurrent_scan, scan_selective, selective_scan, ssm_conv_kernel)
from .train import TrainConfig, ablate, evaluate, lr_at, predict_scene, train
