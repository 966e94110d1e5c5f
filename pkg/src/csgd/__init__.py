"""Filter pruning by centripetal SGD: cluster filters, pull each cluster to a
single point during training, then trim the duplicates without changing the
network's output."""

from .clustering import ClusterAssignment, build_assignment, even_clusters, imbalanced_clusters
from .model import Model, NetworkSpec, build_model, derive_constraint_groups, flops
from .optim import CentripetalSGD, CsgdConfig, build_gamma, build_lambda, chi, phi
from .trim import snap_clusters, trim_network, verify_equivalence

__version__ = "0.1.0"
