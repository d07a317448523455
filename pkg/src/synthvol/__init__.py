"""Synthetic multi-contrast MRI engine and toy volumetric regression toolkit.

The package is organized as a plain numpy/scipy library:

- ``geometry``   homogeneous 3D transforms (affine / rigid construction and sampling)
- ``volume``     the core 3D grid type: interpolation, warping, resampling, cropping
- ``nifti_io``   bit-exact single-file NIfTI-1 reader/writer
- ``deform``     stationary velocity fields and scaling-and-squaring exponentials
- ``intensity``  label-conditioned Gaussian-mixture synthesis, gamma, bias fields
- ``acquire``    low-resolution degradation chain and reliability maps
- ``hyper``      robust hyperparameter estimation from labelled scans
- ``generator``  the end-to-end reproducible training-sample pipeline
- ``net``        from-scratch 3D U-net regressor with reverse-mode gradients and Adam
- ``cli``        the ``synthvol`` command line front end
- ``bench``      timing harness for the hot paths
"""

__version__ = "0.1.0"

from . import geometry
from . import volume
from . import nifti_io
from . import deform
from . import intensity
from . import acquire
from . import hyper
from . import generator
from . import net
from . import bench

__all__ = [
    "geometry",
    "volume",
    "nifti_io",
    "deform",
    "intensity",
    "acquire",
    "hyper",
    "generator",
    "net",
    "bench",
]
