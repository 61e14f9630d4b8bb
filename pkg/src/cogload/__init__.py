"""EEG cognitive-load classification pipeline.

Time-domain preprocessing, multi-spectral topography maps, a dual-stream
convolutional network with gated attention fusion and a cosine orthogonality
loss, trained and evaluated leave-one-subject-out.
"""

__version__ = "0.1.0"
