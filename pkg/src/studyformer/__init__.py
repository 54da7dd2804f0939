"""StudyFormer: multi-view X-ray study classification with a ViT over
square-concatenated per-view CNN feature maps, plus baselines, a synthetic
multi-view benchmark, staged training, ROC-AUC evaluation and attention
rollout visualization."""

__version__ = "0.1.0"
