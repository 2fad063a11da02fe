"""Switchable normalization: numpy kernels, training harness and analysis tools."""

from .analytics import kl_divergence, receptive_fields, sym_divergence
from .config import ExperimentConfig, load_config, parse_config
from .errors import ConfigurationError, InputError, NormSwitchError, NumericError, ParseError, UsageError
from .model import build_network
from .network import mini_resnet_spec, resnet50_spec
from .switchable import RatioState, SNLayer, harden, restrict_omega, sn_backward, sn_forward
from .training import harden_finetune, train

__version__ = "0.1.0"
