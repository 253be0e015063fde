"""Parallel ensembles of small MLPs trained from independent random starts.

Each local model is a 784-100-10 sigmoid network trained by per-example SGD.
Predictions are integrated by averaging pre-softmax outputs across models.
An optional per-model input mask (Hadamard product with one randomly chosen
training image) decorrelates the local models further.
"""

from ensemble_forge.errors import EnsembleForgeError

__version__ = "0.1.0"

__all__ = ["EnsembleForgeError", "__version__"]
