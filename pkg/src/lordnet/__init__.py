"""Blind symbol detection from one-bit measurements with an unfolded detector."""

from .errors import (CapacityError, ConfigError, ConsistencyError, DomainError, LordNetError,
                     NumericalError, ParseError, ShapeError, TrainingError, ValidationError)
from .likelihood import (Constellation, SystemParams, eta, eta_prime, log_q_tail, nll,
                         nll_batch, nll_grad, nll_grad_batch, q_tail)
from .channel import (Dataset, DatasetMeta, export_channel, generate_dataset, import_channel,
                      load_dataset, sample_rayleigh_channel, save_dataset, sigma_for_snr,
                      snr_params)
from .unfolded import (Checkpoint, UnfoldedWeights, VariantWeights, backward, detect, forward,
                       load_checkpoint, lordnet_num_parameters, project, save_checkpoint,
                       variant_forward)
from .training import (TrainConfig, TrainResult, train, train_one_stage, train_stage1,
                       train_stage2, train_two_stage, train_alternating, train_variant)
from .baselines import brute_force_mle, grid_search_step, nml_detect, relaxed_mle_detect
from .harness import (BerReport, SweepConfig, ber, per_layer_ber, sweep_snr,
                      sweep_train_size)

__version__ = "0.1.0"
