"""ranlab: adversarial noise for dual-encoder pre-training, at desk scale.

Crafts multi-modal adversarial noise (PGD image attacks, rule/LLM caption
attacks), pre-trains toy contrastive encoders on noise-mixed corpora, and
fine-tunes with covariance / consistency / centroid-margin regularizers,
with a full ID/OOD, zero-shot, macro-AUC evaluation matrix.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, finite_diff_check, grad

__all__ = ["Tensor", "grad", "finite_diff_check", "__version__"]
