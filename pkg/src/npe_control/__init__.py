"""Starting-control stabilization for the normal parabolic equation on the 3-torus.

Vorticity fields are stored as truncated Fourier coefficient arrays
(:mod:`npe_control.spectral`); the cubic form and its time integral live in
:mod:`npe_control.functionals`, the closed-form solution and its oracle in
:mod:`npe_control.dynamics`, the control and plan in
:mod:`npe_control.control`.
"""
from .control import (
    ControlParams,
    SupportBox,
    SynthesisOptions,
    build_control_u,
    certify_decay,
    evaluate_plan,
    search_amplitudes,
    synthesize,
    verify_psi_bound,
)
from .dynamics import Trajectory, classify, npe_solution_at, simulate, timestep_oracle, timestep_oracle_many
from .errors import (
    BlowUpError,
    CertificationFailure,
    ConfigurationError,
    DomainError,
    InvariantError,
    NPEError,
    QuadratureFailure,
)
from .functionals import QuadratureSpec, compute_trace, nonlinear_term, phi, phi_time_integral, psi, psi3
from .spectral import LatticeSpec, SpectralField, norm0, random_smooth_field, sobolev_norm

__version__ = "0.1.0"
