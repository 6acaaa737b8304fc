"""Balancing-weights QP, its ridge dual and the Oaxaca-Blinder estimators."""

from balweights.balance.admm import QPResult, SolverSettings, solve_qp
from balweights.balance.problem import (BalanceProblem, KKTCertificate,
                                        assemble_problem, bias_decomposition,
                                        kkt_certificate, solve_admm)

__all__ = [
    'BalanceProblem', 'KKTCertificate', 'QPResult', 'SolverSettings',
    'assemble_problem', 'bias_decomposition', 'kkt_certificate', 'solve_admm',
    'solve_qp',
]
