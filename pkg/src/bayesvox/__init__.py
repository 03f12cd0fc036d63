"""Bayesian volumetric segmentation with dilated 3D convolutions.

Subpackages cover the full pipeline: a numpy-backed autodiff engine
(:mod:`bayesvox.tensor`), dilated volumetric convolution
(:mod:`bayesvox.conv3d`), variational layers and KL terms
(:mod:`bayesvox.bayes_layers`, :mod:`bayesvox.objectives`), the MeshNet-style
model with checkpointing (:mod:`bayesvox.model`), minibatch training
(:mod:`bayesvox.trainer`), synthetic volume generation and the SVOL container
(:mod:`bayesvox.volume_io`), segmentation and uncertainty metrics
(:mod:`bayesvox.metrics`), and the command-line interface
(:mod:`bayesvox.cli`).
"""

__version__ = "0.1.0"
