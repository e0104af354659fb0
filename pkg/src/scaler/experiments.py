"""Desk benchmark harness shared by scripts/ and the acceptance suite.

The benchmark is 160 train / 64 test scenes at 32 x 32, contrast 0.2, point
supervision. One ``directional_run`` trains the full method once and forks the
two comparison arms from its own snapshots, so the three arms share their
common prefix exactly:

* stage-1 baseline: the student right after Stage 1
* no-phase2: Stage 3 replayed from the Stage-2 snapshot with Phase II disabled
* full: the uninterrupted run
"""
from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field, replace

from .oracles import noisy_generalist
from .synthdata import SceneSpec, make_dataset
from .trainer import TrainConfig, Trainer, evaluate_model, split_train

BENCH_SIZE = 32
BENCH_CONTRAST = 0.2
BENCH_TRAIN, BENCH_TEST = 160, 64

# desk-scale schedule: a faster EMA and larger steps than the full-scale defaults,
# because the whole run is a few hundred optimizer steps
BENCH_CONFIG = TrainConfig(
    lr=3e-3, generalist_lr=1e-3, eta=0.95,
    stage0_epochs=6, aux_samples=128,
    stage1_epochs=10, stage2_epochs=6, stage3_alternations=6,
)


def bench_data(seed: int, contrast: float = BENCH_CONTRAST, n_train: int = BENCH_TRAIN,
               n_test: int = BENCH_TEST, size: int = BENCH_SIZE):
    return make_dataset(SceneSpec(size=size, contrast=contrast, seed=seed), n_train, n_test, "point")


def _scores(bundle, samples, ids, models=("student", "generalist")) -> dict:
    out = {}
    for m in models:
        r = evaluate_model(bundle, samples, ids, m)
        out[m] = {"mae": r.mae, "f_beta": r.f_beta}
    return out


@dataclass
class DirectionalResult:
    seed: int
    stage1: dict = field(default_factory=dict)
    full: dict = field(default_factory=dict)
    no_phase2: dict = field(default_factory=dict)
    seconds: float = 0.0


def directional_run(seed: int, config: TrainConfig = BENCH_CONFIG, data=None) -> DirectionalResult:
    cfg = replace(config, seed=seed)
    samples, manifest = data if data is not None else bench_data(seed)
    test = list(manifest.test_ids)
    res = DirectionalResult(seed)
    snap: dict = {}
    t0 = time.perf_counter()

    def at_stage1(tr):
        res.stage1 = _scores(tr.bundle, samples, test)

    def at_stage2(tr):
        snap["bundle"], snap["state"] = tr.bundle.copy(), copy.deepcopy(tr.state)

    tr = Trainer(cfg, samples, split_train(manifest), hooks={"stage1": at_stage1, "stage2": at_stage2})
    tr.run()
    res.full = _scores(tr.bundle, samples, test)

    fork = Trainer(replace(cfg, use_phase2=False), samples, split_train(manifest),
                   bundle=snap["bundle"], state=snap["state"])
    fork.stage3_alternate()
    res.no_phase2 = _scores(fork.bundle, samples, test)
    res.seconds = time.perf_counter() - t0
    return res


NOISE_AXES = {"full": {}, "no-entropy-weight": {"use_entropy_weight": False},
              "no-uncertainty-weight": {"use_uncertainty_weight": False}}


def noise_runs(seed: int, config: TrainConfig = BENCH_CONFIG, rate: float = 0.2,
               axes: dict = NOISE_AXES, data=None) -> dict[str, float]:
    """Student test MAE per axis with the generalist replaced by boundary-flipped GT.

    All arms start from one shared Stage-1 snapshot (Stage 1 is plain supervision
    and does not depend on the weighting switches).
    """
    cfg = replace(config, seed=seed)
    samples, manifest = data if data is not None else bench_data(seed)
    test = list(manifest.test_ids)
    oracle = noisy_generalist(samples, rate, seed)
    snap: dict = {}

    def at_stage1(tr):
        snap["bundle"], snap["state"] = tr.bundle.copy(), copy.deepcopy(tr.state)
        raise _StopAfterStage1

    try:
        Trainer(cfg, samples, split_train(manifest), oracle=oracle,
                hooks={"stage1": at_stage1}).run()
    except _StopAfterStage1:
        pass
    out = {}
    for name, override in axes.items():
        tr = Trainer(replace(cfg, **override), samples, split_train(manifest),
                     bundle=snap["bundle"].copy(), state=copy.deepcopy(snap["state"]), oracle=oracle)
        tr.run()
        out[name] = evaluate_model(tr.bundle, samples, test, "student").mae
    return out


class _StopAfterStage1(Exception):
    pass


__all__ = ["BENCH_CONFIG", "DirectionalResult", "NOISE_AXES", "bench_data",
           "directional_run", "noise_runs"]
