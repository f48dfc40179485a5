"""Multi-path CNNs with feature-dependent gated cross-connections."""
from .tensor import NonFiniteError, ShapeError, Tape, Tensor, name_scope, set_finite_checks
from .routing import CrossConnectLayer, GateMatrix, GateUnit, average_heads, compute_gates, cross_connect, expand_input
from .models import ArchSpec, ModelGraph, ModelSpec, RouteTrace, build_basecnn_x, build_from_spec, count_parameters, forward
from .checkpoint import load_checkpoint, save_checkpoint
from .training import TrainConfig, TrainReport, evaluate, lr_at, sgd_momentum_step, train
from .gradcheck import GradCheckReport, grad_check, grad_check_tensors

__version__ = "0.1.0"
