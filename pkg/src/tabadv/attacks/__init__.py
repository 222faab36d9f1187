from tabadv.attacks.base import AttackOutcome, BlackBoxHandle, InitFailed, InvalidStart, free_mask
from tabadv.attacks.boundary import BoundaryConfig, boundary_attack, orthogonal_perturbation
from tabadv.attacks.hopskipjump import (
    DegenerateProbes,
    HsjConfig,
    binary_search_boundary,
    estimate_update,
    hopskipjump_attack,
)
from tabadv.attacks.transfer import (
    FeatureSelector,
    PoolExhausted,
    TransferConfig,
    adv_loss,
    compute_perturbation,
    select_features,
    transfer_attack,
)

__all__ = [
    "AttackOutcome", "BlackBoxHandle", "InitFailed", "InvalidStart", "free_mask",
    "BoundaryConfig", "boundary_attack", "orthogonal_perturbation",
    "DegenerateProbes", "HsjConfig", "binary_search_boundary", "estimate_update",
    "hopskipjump_attack", "FeatureSelector", "PoolExhausted", "TransferConfig", "adv_loss",
    "compute_perturbation", "select_features", "transfer_attack",
]
