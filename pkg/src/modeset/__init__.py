"""Deterministic mode proposals for ambiguous binary segmentation."""
from .core import DatasetItem, FlipStructure, ModeSet, ProposalSet, iou
from .filtering import FilterConfig, filter_proposals
from .flowdecomp import MixtureField, WeightEstimate, estimate_weights
from .matching import solve_assignment
from .metrics import bss, hm_iou, hm_iou_multi, hm_iou_star, selection_f1
from .propnet import ModelParams, TrainConfig, forward, train
from .synthgen import ClassFlipConfig, DirectionalConfig, gen_classflip, gen_directional

__all__ = [
    "ClassFlipConfig", "DatasetItem", "DirectionalConfig", "FilterConfig", "FlipStructure", "MixtureField",
    "ModeSet", "ModelParams", "ProposalSet", "TrainConfig", "WeightEstimate", "bss", "estimate_weights",
    "filter_proposals", "forward", "gen_classflip", "gen_directional", "hm_iou", "hm_iou_multi", "hm_iou_star",
    "iou", "selection_f1", "solve_assignment", "train",
]
