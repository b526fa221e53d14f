"""Camera-in-LiDAR-map localization with a transformer pose estimator.

The pipeline renders depth images from a point-cloud map at a hypothesized
pose, correlates learned image and depth features into a cost volume,
refines implicit pose queries through a decoder stack, and iterates the
render-estimate loop to converge on the camera pose.
"""

__version__ = "0.1.0"
