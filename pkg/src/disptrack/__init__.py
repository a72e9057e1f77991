"""disptrack: Bayesian estimation from camera pairs in disparity space.

Single- and multi-object triangulation and tracking with Gaussian beliefs in
disparity coordinates, a GM-PHD filter for cluttered multi-object scenes, and
joint multi-object tracking plus right-camera extrinsic calibration with a
particle population over sensor states.
"""

__version__ = "0.1.0"
