"""Spiking neural network training kit built on numpy.

Discrete LIF neurons, surrogate gradients with absolute, relative and
threshold-scaled arguments, membrane-potential initialisation from a running
mean, gradient and drift diagnostics, and a Monte-Carlo lab for the
single-neuron membrane chain.
"""

from .autodiff import Node, Parameter, Tape
from .checkpoint import load_checkpoint, save_checkpoint
from .diagnostics import drift_report, energy_estimate, gradient_report, ljung_box_lag1, tv_distance
from .errors import (CheckpointError, ConfigError, DataFormatError, DivergenceError, ShapeError,
                     SnnForgeError)
from .lif import LifParams, NeuronState, absorb_threshold, fire, membrane_update, reset, step
from .mpinit import MpInitState, update_running_mean
from .network import Network, build_network, convert_for_inference, mlp_net, small_net
from .surrogate import SurrogateConfig
from .training import TrainConfig, train

__version__ = "0.1.0"
