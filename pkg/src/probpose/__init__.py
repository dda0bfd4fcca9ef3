"""Probabilistic view-invariant pose embeddings.

A library + CLI for training Gaussian embeddings of 2D pose keypoints
whose matching probability tracks 3D pose similarity, with camera and
occlusion augmentation, temporal sequence embeddings, cross-view
retrieval evaluation, and embedding-based action matching / video
alignment.
"""

__version__ = "0.1.0"
