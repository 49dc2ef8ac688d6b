"""Imbalanced SSL - class-imbalanced self-supervised pre-training pipeline"""
__version__ = "0.1.0"
