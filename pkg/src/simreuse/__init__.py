"""Similarity-aware computation reuse for toy video models.

LSH clustering of matmul input rows, centroid-based reuse kernels, KL
similarity regularizers, a similarity-aware training loop, per-layer
Bayesian tuning of the hashers and synthetic correlated frame streams.
"""
from .lsh import ClusterAssignment, LshHasher, cluster_rows, hash_rows, new_hasher
from .models import ToyModel, backward, forward, init_model
from .regularizers import (
    ConfigError, FeatureMapSet, RegConfig, RunningMeans, inter_frame_reg, intra_frame_reg,
    kl_divergence, prepare_distribution,
)
from .reuse import (
    AttentionWeights, ReuseStats, exact_attention, quantize_8bit, reuse_attention, reuse_conv,
    reuse_matmul, reuse_matmul_quantized,
)
from .streams import FrameStream, analyze_similarity, gen_stream, layer_similarity_profile
from .tensor_core import ConvShape, ShapeError, SimilarityError, matmul_exact
from .training import TrainConfig, evaluate, pretrain, sa_train
from .tuner import TrialRecord, TuneBudget, gp_fit, expected_improvement, tune_layer, tune_model

__all__ = [
    "AttentionWeights", "ClusterAssignment", "ConfigError", "ConvShape", "FeatureMapSet",
    "FrameStream", "LshHasher", "RegConfig", "ReuseStats", "RunningMeans", "ShapeError",
    "SimilarityError", "ToyModel", "TrainConfig", "TrialRecord", "TuneBudget",
    "analyze_similarity", "backward", "cluster_rows", "evaluate", "exact_attention",
    "expected_improvement", "forward", "gen_stream", "gp_fit", "hash_rows", "init_model",
    "inter_frame_reg", "intra_frame_reg", "kl_divergence", "layer_similarity_profile",
    "matmul_exact", "new_hasher", "prepare_distribution", "pretrain", "quantize_8bit",
    "reuse_attention", "reuse_conv", "reuse_matmul", "reuse_matmul_quantized", "sa_train",
    "tune_layer", "tune_model",
]
