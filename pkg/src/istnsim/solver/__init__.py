from .surrogates import f_ap, f_ap_lin, f_exp_lin, f_sqrt_lin
from .conic import Builder, ConeProgram, solve_cone_program
from .sca import sca_phase1, recover_binaries, sca_phase2_calibrate, SolverParams

__all__ = [
    "f_ap", "f_ap_lin", "f_exp_lin", "f_sqrt_lin",
    "Builder", "ConeProgram", "solve_cone_program",
    "sca_phase1", "recover_binaries", "sca_phase2_calibrate", "SolverParams",
]
