"""Quantization-aware training with lottery ticket scratcher weight freezing."""
from lts_qat.config import RunConfig, load_config
from lts_qat.data import LabeledDataset, load_cifar10_bin, load_idx, make_synthetic
from lts_qat.metrics import MetricsRecord, avg_wgs, emit_metrics, ticket_ratio_curve
from lts_qat.models import Network, build_model, convnet_s, mlp_s
from lts_qat.quantizer import ClipBounds, QuantConfig, fake_quant_backward, fake_quant_forward
from lts_qat.scheduler import LtsHyperparams, LtsScheduler, RandomFreezer
from lts_qat.sparse_backward import weight_grad_dense, weight_grad_skipped
from lts_qat.train import TrainResult, train

__version__ = "0.1.0"

__all__ = [
    "ClipBounds",
    "LabeledDataset",
    "LtsHyperparams",
    "LtsScheduler",
    "MetricsRecord",
    "Network",
    "QuantConfig",
    "RandomFreezer",
    "RunConfig",
    "TrainResult",
    "avg_wgs",
    "build_model",
    "convnet_s",
    "emit_metrics",
    "fake_quant_backward",
    "fake_quant_forward",
    "load_cifar10_bin",
    "load_config",
    "load_idx",
    "make_synthetic",
    "mlp_s",
    "ticket_ratio_curve",
    "train",
    "weight_grad_dense",
    "weight_grad_skipped",
    "__version__",
]
