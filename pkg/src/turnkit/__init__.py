"""turnkit: streaming two-speaker turn-taking engine.

Primary-speaker segmentation (peeling embeddings + online clustering) feeds
a hierarchical multi-horizon end-of-turn classifier, with desk-scale
training, distillation, synthetic data generation, evaluation, and a
streaming CLI.
"""

__version__ = "0.1.0"

from .eot import TurnState  # noqa: F401
