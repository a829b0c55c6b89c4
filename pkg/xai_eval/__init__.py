"""Evaluation toolkit for saliency explanations of a small CNN classifier"""

__version__ = "1.0.0"
