"""Osteosarcoma histopathology classifiers (CNN, ViT, ResNet50, CNN+ViT fusion) on a numpy autodiff core."""

__version__ = "0.1.0"
