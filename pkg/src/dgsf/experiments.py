"""Fixed-seed experiment protocols shared by the acceptance suite and scripts/.

All runs are small enough for a laptop CPU: they measure directions
(which arm is better), not benchmark-scale accuracy.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .network import NetworkConfig, TrainResult, mean_epe, toy_train
from .synth import large_motion_scene, synth

# reduced widths keep each ablation arm around a minute of CPU time
ABLATION_CONFIG = NetworkConfig(channels=(16, 32, 64, 64), image_channels=(8, 16, 32, 32))


@dataclass
class ToyRun:
    n_scenes: int = 2
    height: int = 48
    width: int = 64
    steps: int = 200
    step_size: float = 1e-3
    seed: int = 0


def toy_training(run: ToyRun = ToyRun(), cfg: NetworkConfig | None = None) -> TrainResult:
    """Default network trained full-batch on ``n_scenes`` rigid-object scenes."""
    scenes = [synth(run.seed + i, run.height, run.width) for i in range(run.n_scenes)]
    return toy_train(scenes, cfg or NetworkConfig(), run.steps, run.step_size, run.seed)


@dataclass
class AblationResult:
    epe: dict  # arm -> EPE3D
    trace: dict = field(default_factory=dict)  # arm -> loss trace of its training run


def warp_ablation(n_train: int = 6, steps: int = 150, step_size: float = 2e-3, eval_seed: int = 0,
                  seed: int = 0) -> AblationResult:
    """Train once in full mode on large-motion scenes, then run the same weights in every warp arm.

    The arms differ only in how the cost volume treats warped points, so
    sharing weights isolates that mechanism. EPE3D is measured on the scene
    ``large_motion_scene(eval_seed)``, which is part of the training set.
    """
    scenes = [large_motion_scene(s) for s in range(n_train)]
    res = toy_train(scenes, ABLATION_CONFIG, steps, step_size, seed)
    test = [large_motion_scene(eval_seed)]
    epe = {m: mean_epe(test, res.weights, ABLATION_CONFIG.with_mode(m)) for m in ("full", "no-warp", "reproject")}
    return AblationResult(epe, {"full": res.trace})


def fusion_ablation(n_train: int = 4, steps: int = 100, step_size: float = 2e-3, seed: int = 0) -> AblationResult:
    """Train one model per fusion arm with the same budget and seeds; EPE3D on the training scenes."""
    scenes = [synth(s) for s in range(n_train)]
    epe, trace = {}, {}
    for arm, mode in (("attentive", "full"), ("concat", "concat"), ("off", "no-fusion")):
        res = toy_train(scenes, ABLATION_CONFIG.with_mode(mode), steps, step_size, seed)
        epe[arm], trace[arm] = res.epe_final, res.trace
    return AblationResult(epe, trace)
