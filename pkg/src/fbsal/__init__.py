"""Feedback-recursive saliency prediction: network, losses, metrics, pseudo labels."""
__version__ = "0.1.0"
