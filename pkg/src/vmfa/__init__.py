"""Mixtures of factor analyzers trained by truncated variational EM."""

from .errors import *  # noqa: F401,F403
from .model import (
    ComponentCache,
    Dataset,
    MfaParams,
    exact_log_likelihood,
    joint_counter,
    log_joint,
    precompute,
    precompute_component,
    truncated_free_energy,
    variance_floor,
)
from .estep import VarState, variational_e_step
from .mstep import accumulate_suffstats, update_params
from .seeding import afkmc2_seed, init_params, init_varstate, warmup
from .convergence import check_convergence
from .trainer import TrainConfig, TrainReport, train, train_emmfa, train_emmfa_matched, train_vmfa
from .baselines import fit_fa_per_cluster, kmeans_lloyd
from .data import gen_synthetic, load_checkpoint, load_dataset, save_checkpoint, save_dataset

__version__ = "0.1.0"
