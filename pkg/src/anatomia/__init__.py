"""Shape-prior uncertainty for semi-supervised image segmentation.

A denoising autoencoder trained on segmentation masks projects model
predictions onto plausible shapes; the per-voxel discrepancy between a
prediction and its projection is an uncertainty estimate obtained in a
single extra inference, and it weights the consistency loss of a
mean-teacher trainer.
"""

__version__ = "0.1.0"
