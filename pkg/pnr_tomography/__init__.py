from .detector import (
    ClickStatistics,
    DetectorConfig,
    NoiseModel,
    exact_click_distribution,
    exact_povm,
    sample_detector,
    simulate_coherent_probe,
    simulate_thermal,
)
from .exceptions import TomographyError
from .metrics import Pnd, fidelity, g2, g3, tvd
from .probes import ProbeMatrix, ProbePlan, build_probe_matrix, make_probe_plan
from .qp import QpSolution, SolverOptions, qp_solve
from .reconstruction import EmeOptions, eme_reconstruct
from .tomography import PovmMatrix, solve_mdt, solve_sdt

__version__ = "0.1.0"

__all__ = [
    "ClickStatistics",
    "DetectorConfig",
    "EmeOptions",
    "NoiseModel",
    "Pnd",
    "PovmMatrix",
    "ProbeMatrix",
    "ProbePlan",
    "QpSolution",
    "SolverOptions",
    "TomographyError",
    "build_probe_matrix",
    "eme_reconstruct",
    "exact_click_distribution",
    "exact_povm",
    "fidelity",
    "g2",
    "g3",
    "make_probe_plan",
    "qp_solve",
    "sample_detector",
    "simulate_coherent_probe",
    "simulate_thermal",
    "solve_mdt",
    "solve_sdt",
    "tvd",
]
