"""Semi-dense direct stereo SLAM with a feature-based odometry prior."""

__version__ = "0.1.0"
