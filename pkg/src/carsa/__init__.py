"""Shallow sequence-graph classifier for multivariate time series: a shared
biLSTM encoder, self-attention whose weight matrix doubles as a directed
connectivity graph, top-k component pooling, and a reproducible training and
evaluation harness with a synthetic benchmark generator."""

__version__ = "0.1.0"

from .model import ModelConfig, ModelParams, ForwardTrace, forward, init_params  # noqa: F401
from .data import Dataset, Sample, SyntheticSpec, gen_synthetic, load_dataset  # noqa: F401
