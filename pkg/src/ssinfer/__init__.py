"""Smoothing-spline fits with local and global asymptotic inference."""

from .eigenbasis import (EigenSystem, KernelEval, galerkin_eigensystem, trig_eigensystem,
                         kernel_value, restricted_kernel, q_ratio_c0, spectral_sums,
                         asymptotic_Il, apply_W_lambda, power_law_alpha)
from .models import make_family, derivatives_check
from .fitter import (FittedSpline, ConstrainedFit, fit, fit_constrained, select_lambda,
                     sigma_hat)
from .inference import (pointwise_ci, local_lrt, scb, equivalent_kernel_omega0, plrt,
                        plrt_composite)

__version__ = "0.1.0"
