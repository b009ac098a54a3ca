"""Focal-sweep calibration and multi-image deconvolution toolkit.

Curved-mirror (and similar wide-field catadioptric) systems trade a flat
focal plane for aperture: each capture of a focal sweep is sharp on a
different annulus of the field.  This package models that spatially
varying blur as a mixture of warped, blurred components, calibrates the
model from displayed test patterns, and fuses a sparse focal stack into
one sharp image by solving the resulting inverse problem.

Subpackage map:

* ``imgio``      -- image validation, PFM files, focal stacks, model container
* ``seidelconv`` -- the blur operator: forward/adjoint/parameter gradients
* ``calib``      -- targets, homography, radiometry, model fitting
* ``solver``     -- multi-image deconvolution (TV / L2 / plug-in denoiser)
* ``baselines``  -- reference methods the operator is compared against
* ``simulate``   -- synthetic mirror-optics data generator
* ``metrics``    -- PSNR / SSIM / sector-star MTF and report tables
* ``cli``        -- the ``mirrordeconv`` command

Set ``MIRRORDECONV_BACKEND=numpy`` to bypass the numba-jitted kernels.
"""

__version__ = "0.1.0"

from ._backend import active_backend, set_thread_count
from .imgio import FocalStack, read_pfm, write_pfm, load_model, save_model
from .seidelconv import (AffineWarp, SeidelConvModel, forward, adjoint,
                         param_gradients, lipschitz_estimate, warp)
from .calib import CalibConfig, RadiometricCal, fit_model, radiometric_correct
from .solver import SolveConfig, deconvolve, tv_prox, DenoiserClient
from .simulate import AberrationSpec, field_sag, local_psf, render_stack

__all__ = [
    "active_backend", "set_thread_count",
    "FocalStack", "read_pfm", "write_pfm", "load_model", "save_model",
    "AffineWarp", "SeidelConvModel", "forward", "adjoint",
    "param_gradients", "lipschitz_estimate", "warp",
    "CalibConfig", "RadiometricCal", "fit_model", "radiometric_correct",
    "SolveConfig", "deconvolve", "tv_prox", "DenoiserClient",
    "AberrationSpec", "field_sag", "local_psf", "render_stack",
    "__version__",
]
