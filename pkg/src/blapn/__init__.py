"""Best linear approximation of nonlinear systems with process noise.

Excitation design, Volterra loop simulation, nonparametric BLA estimation
and Type I / Type II nonlinearity detection.
"""
from .bla import (BlaEstimate, LpmConfig, bla_fast, bla_from_reference, bla_robust, fast_lpm,
                  lpm_fit)
from .detect import DetectionReport, ExperimentSet, classify_nonlinearity, process_noise_bla_shift
from .signals import (MultisineSpec, NoiseSpec, design_flat_multisine, design_odd_random_multisine,
                      realize_multisine, realize_periodic_noise)
from .spectra import SignalEnsemble, Spectrum, scaled_dft
from .volterra import (FeedbackSystemSpec, LoopDivergedError, VolterraKernel, eval_volterra_dt,
                       simulate_closed_loop, simulate_nfir_feedback)

__version__ = "0.1.0"
