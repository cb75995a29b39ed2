"""Locally differentially private release of k-way marginals over binary data."""
from ldpm.aggregate import Accumulator, reconstruct_all, reconstruct_marginal
from ldpm.core import Distribution, HadamardCoeffs, MarginalSpec, MarginalTable, hadamard_transform, marginal_operator
from ldpm.experiment import collect
from ldpm.mechanisms import Mechanism, PrivacyParams, Report, client_randomize, randomize_batch, verify_ldp

__version__ = "0.1.0"

__all__ = [
    "Accumulator",
    "Distribution",
    "HadamardCoeffs",
    "MarginalSpec",
    "MarginalTable",
    "Mechanism",
    "PrivacyParams",
    "Report",
    "client_randomize",
    "collect",
    "hadamard_transform",
    "marginal_operator",
    "randomize_batch",
    "reconstruct_all",
    "reconstruct_marginal",
    "verify_ldp",
]
