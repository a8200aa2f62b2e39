"""dentssl: self-distillation pre-training and evaluation toolkit for 2D/3D
dental radiographs."""

__version__ = "0.1.0"
