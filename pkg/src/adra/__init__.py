"""Anomaly detection with residual adaptation.

A frozen pretrained convolutional backbone is extended with gated 1x1
residual corrections and trained with a radial one-class objective under
outlier exposure. The package bundles the tensor/autodiff engine, the
model, objectives, synthetic datasets, training loops, metrics, baseline
methods and the experiment CLI.
"""

__version__ = "0.1.0"
