"""Learning segmentation models from polyline labels with location errors.

The package alternates between inferring where each chunk of an imperfect
polyline label really lies and re-training a pixel classifier on the
inferred labels (an EM loop over discretized rigid shifts).
"""

__version__ = "0.1.0"
