"""dropgs: a CPU 3D Gaussian splatting trainer with random Gaussian dropping for sparse views."""

__version__ = "0.1.0"
