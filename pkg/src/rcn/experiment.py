"""Variant ladders: one shared phase-1 backbone, many phase-2 submodels."""

import copy
import os
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .model import RCNConfig, RCNModel, init_model
from .training import (
    TrainConfig,
    build_candidates,
    precompute_trajectories,
    prepare_phase2,
    train_phase1,
    train_phase2,
)

# variant name -> (inference mode, RCNConfig overrides)
VARIANTS = {
    "full": ("full", {}),
    "no-track": ("no-track", {}),
    "no-lstm": ("no-lstm", {}),
    "single-frame": ("single-frame", {}),
    "gru": ("full", {"cell": "convgru"}),
    "k1": ("full", {"k": 1}),
    "k3": ("full", {"k": 3}),
    "k5": ("full", {"k": 5}),
}
ABLATION_LADDER = ("full", "no-track", "no-lstm", "single-frame", "gru", "k1", "k3", "k5")


def variant_mode(name: str) -> str:
    if name not in VARIANTS:
        raise KeyError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}")
    return VARIANTS[name][0]


def variant_config(base: RCNConfig, name: str) -> RCNConfig:
    overrides = VARIANTS[name][1]
    return replace(base, **overrides) if overrides else copy.deepcopy(base)


@dataclass
class Phase1Result:
    model: RCNModel
    candidates: list
    trajectories: list
    losses: List[float]
    val_loss_start: float
    val_loss_end: float
    seconds: float


@dataclass
class VariantResult:
    name: str
    mode: str
    model: RCNModel
    losses: List[float] = field(default_factory=list)
    seconds: float = 0.0
    checkpoint: Optional[str] = None


def run_phase1(model_cfg: RCNConfig, p1: TrainConfig, train, val=None, out_dir=None, seed=None) -> Phase1Result:
    seed = p1.seed if seed is None else seed
    t0 = time.perf_counter()
    model = init_model(model_cfg, seed)
    cands = build_candidates(train, p1.include_gt)
    res, _ = train_phase1(model, p1, train, out_dir=out_dir, val_dataset=val)
    trajs = precompute_trajectories(model, train, cands, p1.snippet_len)
    return Phase1Result(model, cands, trajs, res.losses, res.val_loss_start, res.val_loss_end,
                        time.perf_counter() - t0)


def model_from_backbone(source: RCNModel, config: RCNConfig, seed: int) -> RCNModel:
    """Fresh recurrent/head parameters on a copy of ``source``'s backbone."""
    model = init_model(config, seed)
    for name, t in source.params.items():
        if name.startswith("backbone/"):
            model.params[name].data = t.data.copy()
    return model


def run_variant(p1res: Phase1Result, name: str, p2: TrainConfig, train, out_dir=None, seed=None) -> VariantResult:
    mode = variant_mode(name)
    seed = p2.seed if seed is None else seed
    cfg = variant_config(p1res.model.config, name)
    model = model_from_backbone(p1res.model, cfg, seed)
    p2 = replace(p2, mode=mode, phase=2, seed=seed)
    t0 = time.perf_counter()
    _, _, samples = prepare_phase2(model, train, p2, p1res.candidates, p1res.trajectories)
    vdir = None
    if out_dir:
        vdir = os.path.join(out_dir, name)
        os.makedirs(vdir, exist_ok=True)
    res = train_phase2(model, p2, train, out_dir=vdir, samples=samples)
    return VariantResult(name, mode, model, res.losses, time.perf_counter() - t0, res.checkpoint)


def run_ladder(model_cfg: RCNConfig, p1: TrainConfig, p2: TrainConfig, train, variants: Sequence[str],
               val=None, out_dir=None, seed=None, on_variant=None) -> Dict[str, VariantResult]:
    """Train every variant on one shared backbone; ``on_variant(result)`` is called as each finishes."""
    p1res = run_phase1(model_cfg, replace(p1, phase=1), train, val=val, out_dir=out_dir, seed=seed)
    out = {}
    for name in variants:
        out[name] = run_variant(p1res, name, p2, train, out_dir=out_dir, seed=seed)
        if on_variant is not None:
            on_variant(out[name])
    return out


def median(values) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))
