"""FixMatch-style semi-supervised learning on numpy."""

from .core import RngStream, argmax_onehot, cross_entropy, log_softmax, one_hot, rng_draw, rng_for, softmax
from .data import BatchSampler, Dataset, SplitSpec, load_idx, make_split, sampler_next, synth_glyphs, write_idx
from .harness import (
    ExperimentConfig,
    RunRecord,
    checkpoint_load,
    checkpoint_save,
    default_config,
    emit_metrics_csv,
    emit_plot_svg,
    load_config,
    run_experiment,
    run_sweep,
)
from .network import Classifier, grad_check, load_model, reference_classifier, save_model
from .optim import EMA, SGD, Adam, Schedule, lr_at
from .ssl import (
    BatchStats,
    DaState,
    FixMatchConfig,
    LabeledBatch,
    UnlabeledBatch,
    batch_stats,
    combine_grads,
    distribution_align,
    mixup_inputs,
    pi_model_loss,
    pseudo_label,
    pseudo_labeling_loss,
    sharpen,
    supervised_loss,
    total_loss,
    unsupervised_loss,
)
from .train import TrainState, train_step

__version__ = "0.1.0"
