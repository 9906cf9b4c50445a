"""Hierarchical sentiment-topic modelling of multi-brand reviews.

A topic tree shared by all brands is grown by a brand-aware nested Chinese
restaurant process; word weights propagate up the tree through a
hierarchical Polya urn; per-brand regression coefficients on the topics
explain review ratings and rank brands aspect by aspect.
"""

from .corpus import Corpus, Review, Vocabulary, load_corpus, load_reviews
from .errors import ConfigError, DataError, InvariantError, MHSTMError
from .inference import FitConfig, Model, run_stochastic_em
from .synthetic import GroundTruth, HierarchySpec, generate_corpus, generate_grid_corpus
from .tree import TopicTree
from .urn import UrnState

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "Corpus",
    "DataError",
    "FitConfig",
    "GroundTruth",
    "HierarchySpec",
    "InvariantError",
    "MHSTMError",
    "Model",
    "Review",
    "TopicTree",
    "UrnState",
    "Vocabulary",
    "generate_corpus",
    "generate_grid_corpus",
    "load_corpus",
    "load_reviews",
    "run_stochastic_em",
]
