"""Two-stage TabNet-style cascade for four-way FH risk staging, built on numpy."""
from .cascade import (CascadeModel, FHLabel, StagePlan, Superclass, cascade_predict, explain,
                      predict, train_cascade, train_single_stage)
from .encoder import EncoderConfig

__all__ = [
    "CascadeModel", "EncoderConfig", "FHLabel", "StagePlan", "Superclass",
    "cascade_predict", "explain", "predict", "train_cascade", "train_single_stage",
]
