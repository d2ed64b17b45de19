"""Label-free saliency detection by self-distillation on activation maps."""

__version__ = "0.1.0"
