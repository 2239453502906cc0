"""Depth-adaptive multiscale convolution workbench.

A small, self-contained neural-network framework around one idea: a
convolution whose tap spacing follows the depth map (wider receptive fields
up close, narrower far away) and differs across channel groups, so the
features it extracts are invariant to object distance. Includes hand-derived
backpropagation, momentum SGD, a synthetic pinhole-camera dataset generator,
segmentation metrics, and verification harnesses (finite-difference gradient
checks, the two-layer depth-invariance demonstration).
"""

from .damconv import (DamConvLayer, MultiscaleParams, SparsityMap,
                      compute_sparsity, expand_group_scales, multiscale_param_mm)
from .errors import ConfigError, DamError, NumericalError
from .layers import (LossConfig, MaxPoolLayer, l2_penalty, logistic_loss,
                     relu_backward, relu_forward, softmax)
from .metrics import ConfusionMatrix, compute_all, format_report
from .network import (LayerEntry, Network, NetworkSpec, TrainRecord, build,
                      load_checkpoint, save_checkpoint)
from .optim import (ConstantSchedule, PlateauSchedule, PolySchedule, SgdState,
                    schedule_from_dict)
from .synth import (DatasetConfig, SceneObject, SceneSpec, SplitSpec,
                    generate_dataset, intensity_input, load_manifest,
                    load_split, render)
from .tensor import (DepthMap, FeatureMap, LabelMap, WeightTensor, fill_holes,
                     index, pool_depth)
from .tensorio import read_dat1, write_dat1, write_pgm

__version__ = "0.1.0"
