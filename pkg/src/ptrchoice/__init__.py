"""Discrete choice models for ranked itinerary lists: a pointer-network
choice model, a multinomial logit baseline, and the tooling around them."""

__version__ = "0.1.0"

from .data import (
    Alternative,
    ChoiceDataset,
    DatasetSplit,
    FeatureSchema,
    FeatureSpec,
    Session,
    load_dataset,
    save_dataset,
    split_dataset,
    table1_schema,
    validate_session,
)
from .preprocess import Preprocessor, embedding_dim, encode_dataset, encode_time, fit_preprocessor, transform_session

__all__ = [
    "Alternative",
    "ChoiceDataset",
    "DatasetSplit",
    "FeatureSchema",
    "FeatureSpec",
    "Session",
    "load_dataset",
    "save_dataset",
    "split_dataset",
    "table1_schema",
    "validate_session",
    "Preprocessor",
    "embedding_dim",
    "encode_dataset",
    "encode_time",
    "fit_preprocessor",
    "transform_session",
]
