"""Federated learning simulator for heterogeneous and private client label sets."""

from .combiner import ClientPrediction, central_tune, combine_fixed_x, mse_loss, pairwise_loss
from .data import Dataset, LabelSet, PartitionPlan, SyntheticTask, parse_cifar_bin, parse_idx, partition, synth_generate
from .estimator import FederatedLabelSetClassifier
from .exceptions import ConfigurationError, NumericalError, ParseError, UsageError
from .federation import (
    FederationConfig,
    aggregate_private,
    aggregate_public,
    distribute,
    local_train,
    run_federation,
    run_round,
)
from .metrics import accuracy, bootstrap_ci, select_best_snapshot
from .nn import EncoderSpec, Network, ParameterSet

__version__ = "0.1.0"
