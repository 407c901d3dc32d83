"""Multivariate forecasting with gated local/global channel attention."""

from .attention import (AttentionOutput, BetaGate, MicaAttention, MicaConfig,
                        MlpGate, fused_forward, global_attention,
                        global_memory, local_attention)
from .backbone import (ForecastModel, IntegrityError, ModelConfig,
                       config_digest, load_params, save_params)
from .bench import (FlopReport, ScalingFit, count_flops, count_params,
                    fit_scaling, measure_latency)
from .data import (PanelDataset, chrono_split, gen_independent, gen_leadlag,
                   load_csv, pca_apply, pca_fit, pca_invert, write_csv)
from .gradcheck import GradCheckReport, gradcheck
from .tensor import Tensor, no_grad
from .training import TrainConfig, TrainReport, mae, mae_loss, rmse, train

__version__ = "0.1.0"

__all__ = [
    "AttentionOutput", "BetaGate", "MicaAttention", "MicaConfig", "MlpGate",
    "fused_forward", "global_attention", "global_memory", "local_attention",
    "ForecastModel", "IntegrityError", "ModelConfig", "config_digest",
    "load_params", "save_params", "FlopReport", "ScalingFit", "count_flops",
    "count_params", "fit_scaling", "measure_latency", "PanelDataset",
    "chrono_split", "gen_independent", "gen_leadlag", "load_csv",
    "pca_apply", "pca_fit", "pca_invert", "write_csv", "GradCheckReport",
    "gradcheck", "Tensor", "no_grad", "TrainConfig", "TrainReport", "mae",
    "mae_loss", "rmse", "train",
]
