"""Source-free adaptation that unlearns uncertain over-predicted labels and
trains a pixel head from CAM pseudo-masks, on a synthetic histology-like
benchmark."""

from .adapt import AdaptConfig, RunRecord, SourceConfig, adapt_dep, adapt_selftrain, sgd_step, strip_labels, train_source
from .losses import LossValue, forget_loss, loc_loss, retain_loss, total_loss
from .metrics import MetricsReport, balance_report, cl_accuracy, evaluate, pxap
from .model import ModelParams, cam, classify, embed, init_params, normalized_entropy, pixel_classify
from .partition import Partition, PseudoMask, build_forget_set, build_loc_set, cam_to_pseudomask, dominant_classes, predict_all, rebuild
from .synthbench import DomainSpec, ImageSample, SplitCounts, apply_shift, generate_dataset

__version__ = "0.1.0"
