"""Data-driven optimal control through convex density-space synthesis.

Modules: :mod:`polybasis` (polynomials, dictionaries, quadrature), :mod:`dynsim`
(simulation and datasets), :mod:`gedmd` (generator estimation), :mod:`ocpsynth`
(SOS program construction), :mod:`soscompile` (SOS to SDP), :mod:`conic`
(interior-point solver), :mod:`ctrl` (feedback, blending, rollout,
certification), :mod:`presets` and :mod:`cli`.
"""

from .conic import SdpProblem, solve
from .ctrl import ControllerArtifact, certify_density, extract_controller, local_design, rollout, solve_are
from .dynsim import ControlAffineSystem, TrajectoryDataset, collect_protocol
from .gedmd import GeneratorSet, estimate_generators, exact_generators
from .ocpsynth import OcpSpec, build_constraint_poly, build_program
from .polybasis import BasisDictionary, Poly, build_dictionary
from .soscompile import assemble_sdp, solve_program

__version__ = "0.1.0"

__all__ = [
    "BasisDictionary", "ControlAffineSystem", "ControllerArtifact", "GeneratorSet", "OcpSpec", "Poly",
    "SdpProblem", "TrajectoryDataset", "assemble_sdp", "build_constraint_poly", "build_dictionary",
    "build_program", "certify_density", "collect_protocol", "estimate_generators", "exact_generators",
    "extract_controller", "local_design", "rollout", "solve", "solve_are", "solve_program",
]
