"""Multimodal document segmentation toolkit.

Subpackages and modules:

- ``autodiff``: minimal reverse-mode engine over float32 numpy arrays
- ``embedding``: skip-gram text embeddings and embedding map construction
- ``model``: the encoder/decoder segmentation network
- ``losses``: classification, reconstruction, and consistency terms
- ``optim``: Adadelta parameter updates
- ``synth``: synthetic document page generator
- ``data``: dataset reading/writing and input preprocessing
- ``train``: alternating supervised/unsupervised training loop
- ``postprocess``: box-level label refinement and visualization
- ``evaluate``: IoU and line-level F1 metrics
- ``cli``: command line entry points
"""

__version__ = "0.1.0"
