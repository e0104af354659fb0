"""Three-stage training: initialisation, segmenter warm-up, alternating mutual enhancement.

Randomness is derived from ``config.seed`` by seed-splitting: every epoch
draws its own generator from ``(seed, stage, phase, epoch)``, and the fused
generalist pseudo-label of sample ``i`` from ``(seed, generalist version, i)``.
Nothing else is random, so a run is a pure function of (config, data).
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import augment
from .augment import AugPolicy, WeakAug
from .autodiff import AdamConfig, Graph, NonFiniteError, ParamSet, adam_step, backprop
from .losses import (EASY, HARD, NORMAL, LossReport, RefineOptions, RefinementThresholds,
                     phase1_loss, phase2_loss, supervised, partial_ce)
from .metrics import MetricReport
from .models import (EMAConfig, ModelBundle, build_forward, ema_update, generalist_input, predict)
from .pseudolabel import consensus, ensemble_fuse
from .synthdata import Sample, SceneSpec, SplitManifest, gen_sample, sample_rngs, sparse_annotate

log = logging.getLogger(__name__)

PHASE_CODES = {"stage0": 0, "stage1_student": 1, "stage1_generalist": 2, "phase1": 3, "phase2": 4}


@dataclass
class TrainConfig:
    """Training hyperparameters.

    Paper-scale values are noted where they differ from the desk defaults:
    lr_decay_every 80, epoch counts in the hundreds, 352 x 352 inputs.
    """

    mode: str = "weak"                 # weak | semi
    annotation: str = "point"          # point | scribble (weak mode)
    labeled_fraction: float = 1.0      # semi mode: e.g. 1/8 or 1/16
    batch_size: int = 12
    lr: float = 1e-4
    generalist_lr: float | None = None
    lr_decay: float = 0.1
    lr_decay_every: int = 8            # full scale: 80
    stage0_epochs: int = 10
    aux_samples: int = 160
    aux_contrast_low: float = 0.6
    aux_contrast_high: float = 1.0
    stage1_epochs: int = 10
    stage2_epochs: int = 10
    stage3_alternations: int = 10
    phase1_epochs: int = 1             # per alternation
    phase2_epochs: int = 1             # per alternation
    K: int = 12
    aug_scales: tuple[float, ...] = augment.SCALES
    hard_entropy: float = 0.8
    easy_entropy: float = 0.2
    trust_low: float = 0.1
    trust_high: float = 0.9
    eta: float = 0.996
    seed: int = 0
    # ablation switches; defaults are the full method
    use_plf: bool = True
    use_entropy_weight: bool = True
    use_uncertainty_weight: bool = True
    use_phase2: bool = True
    lai_weak_weak: bool = False
    lnr_with_refine: bool = False
    use_stage1: bool = True
    use_stage2: bool = True
    trust_from_plf: bool = False
    debug: bool = False

    def __post_init__(self):
        if self.mode not in ("weak", "semi"):
            raise ValueError(f"mode must be weak or semi, got {self.mode!r}")
        if self.annotation not in ("point", "scribble"):
            raise ValueError(f"annotation must be point or scribble, got {self.annotation!r}")
        for name in ("batch_size", "lr", "lr_decay", "lr_decay_every", "K"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.generalist_lr is not None and not self.generalist_lr > 0:
            raise ValueError("generalist_lr must be positive")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError("labeled_fraction must lie in (0, 1]")
        for name in ("stage0_epochs", "aux_samples", "stage1_epochs", "stage2_epochs",
                     "stage3_alternations", "phase1_epochs", "phase2_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        self.aug_scales = tuple(float(v) for v in self.aug_scales)
        if not self.aug_scales or min(self.aug_scales) <= 0:
            raise ValueError("aug_scales must be a non-empty list of positive factors")
        # validates the threshold ordering
        self.thresholds()
        EMAConfig(self.eta)

    def thresholds(self) -> RefinementThresholds:
        return RefinementThresholds(self.hard_entropy, self.easy_entropy,
                                    self.trust_low, self.trust_high)

    def refine_options(self) -> RefineOptions:
        return RefineOptions(self.use_entropy_weight, self.use_uncertainty_weight,
                             self.trust_from_plf)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def lr_schedule(epoch: int, config: TrainConfig, base: float | None = None) -> float:
    """Step decay: base * lr_decay ** floor(epoch / lr_decay_every)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    base = config.lr if base is None else base
    return base * config.lr_decay ** (epoch // config.lr_decay_every)


@dataclass
class StageState:
    stage: int = 1
    phase: str = ""
    alternation: int = 0
    step: int = 0
    student_epochs: int = 0
    generalist_epochs: int = 0
    generalist_version: int = 0
    completed: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "StageState":
        return cls(**json.loads(text))


# oracle(sample_index) -> callable(aug_image, aug_prompt, aug) -> mask in the augmented frame
GeneralistOracle = Callable[[int], Callable]


class Trainer:
    """Owns a ModelBundle and drives it through the three stages.

    ``samples`` holds every training sample; ``manifest.ids`` / ``manifest.labeled``
    pick out the train set and its labeled part. ``oracle`` replaces the
    generalist's predictions (noise-injection experiments); the generalist
    ParamSet is then never trained.
    """

    def __init__(self, config: TrainConfig, samples: list[Sample], manifest: SplitManifest,
                 bundle: ModelBundle | None = None, state: StageState | None = None,
                 out_dir: str | Path | None = None, oracle: GeneralistOracle | None = None,
                 hooks: dict[str, Callable] | None = None):
        self.config = config
        self.samples = samples
        self.manifest = manifest
        self.train_ids = list(manifest.ids)
        self.labeled = set(manifest.labeled)
        self.bundle = bundle if bundle is not None else ModelBundle.create(
            config.seed, ema=EMAConfig(config.eta))
        self.state = state if state is not None else StageState()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.oracle = oracle
        self.hooks = hooks or {}
        self.log_records: list[dict] = []
        self._plf_cache: dict[int, np.ndarray] = {}
        self._plf_version = -1
        self.thr = config.thresholds()
        self.options = config.refine_options()
        if config.mode == "weak":
            missing = [i for i in self.train_ids if samples[i].annotation is None]
            if missing:
                raise ValueError(f"weak mode needs annotations; sample {missing[0]} has none")
        if not self.labeled_ids():
            raise ValueError("no labeled training data")

    # ------------------------------------------------------------------ utils
    def labeled_ids(self) -> list[int]:
        if self.config.mode == "weak":
            return list(self.train_ids)
        return [i for i in self.train_ids if i in self.labeled]

    def _rng(self, phase: str, epoch: int) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, self.state.stage, PHASE_CODES[phase], epoch])

    def _batches(self, ids: list[int], rng: np.random.Generator) -> list[list[int]]:
        order = [ids[i] for i in rng.permutation(len(ids))]
        b = self.config.batch_size
        return [order[k:k + b] for k in range(0, len(order), b)]

    def _gen_lr(self) -> float:
        return self.config.generalist_lr or self.config.lr

    def _prompt(self, idx: int):
        if self.config.mode != "weak":
            return None
        return self.samples[idx].annotation.labels

    def _log(self, record: dict) -> None:
        self.log_records.append(record)
        if self.out_dir is not None:
            with open(self.out_dir / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    @staticmethod
    def _summarize(reports: list[LossReport]) -> dict:
        terms: dict[str, list[float]] = {}
        branches = {HARD: 0, EASY: 0, NORMAL: 0}
        for r in reports:
            for k, v in r.values().items():
                terms.setdefault(k, []).append(v)
            for b in r.branches.values():
                branches[b] += 1
        return {"loss": {k: float(np.mean(v)) for k, v in terms.items()}, "branches": branches}

    def _check_finite(self, reports: list[LossReport], where: str) -> None:
        for r in reports:
            if not np.isfinite(float(r.total.value)):
                raise NonFiniteError(f"non-finite loss at {where}, step {self.state.step}")

    def _emit(self, name: str) -> None:
        if name in self.hooks:
            self.hooks[name](self)

    # ------------------------------------------------------- fused labels
    def fused_label(self, idx: int) -> np.ndarray:
        """PL_F for sample ``idx`` in the reference frame, cached per generalist version."""
        if self._plf_version != self.state.generalist_version:
            self._plf_cache.clear()
            self._plf_version = self.state.generalist_version
        if idx not in self._plf_cache:
            s = self.samples[idx]
            rng = np.random.default_rng([self.config.seed, 7, self.state.generalist_version, idx])
            augs = [augment.sample_weak(rng, self.config.aug_scales) for _ in range(self.config.K)]
            gen = self.oracle(idx) if self.oracle is not None else self.bundle.generalist
            self._plf_cache[idx] = ensemble_fuse(gen, s.image, self._prompt(idx),
                                                 arch=self.bundle.generalist_arch, augs=augs)
        return self._plf_cache[idx]

    # ---------------------------------------------------------- phase I
    def run_phase1_step(self, batch: list[int], rng: np.random.Generator, lr: float) -> dict:
        """One student update on ``batch`` followed by one EMA update of the teacher."""
        cfg, b = self.config, self.bundle
        plan = []
        for idx in batch:
            weak = augment.sample_weak(rng, self.config.aug_scales)
            plan.append((idx, weak, augment.sample_strong(rng, weak)))
        reports = []
        gen_digest = b.generalist.digest() if cfg.debug else None
        for idx, weak, strong in plan:
            s = self.samples[idx]
            x_w = augment.apply(weak, s.image)
            pl_t = predict(b.teacher, b.student_arch, x_w[None, None])[0]
            pl_f = augment.apply_mask(weak, self.fused_label(idx)) if cfg.use_plf else None
            g = Graph(b.student)
            pred = build_forward(g, g.input("image", x_w[None, None]), b.student_arch)

            def strong_pred(g=g, strong=strong, s=s):
                x_s = augment.apply(strong, s.image)
                return build_forward(g, g.input("image_strong", x_s[None, None]), b.student_arch)

            labeled = idx in self.labeled
            ann = augment.apply_labels(weak, s.annotation.labels) if cfg.mode == "weak" else None
            dense = augment.apply_mask(weak, s.mask) if (cfg.mode == "semi" and labeled) else None
            report = phase1_loss(cfg.mode, labeled, pl_t, pl_f, pred, strong_pred, ann, dense,
                                 self.thr, self.options, use_plf=cfg.use_plf)
            backprop(g, report.total, b.student, scale=1.0 / len(batch))
            reports.append(report)
        self._check_finite(reports, "phase1")
        adam_step(b.student, AdamConfig(lr=lr))
        ema_update(b.teacher, b.student, b.ema.eta)
        if cfg.debug and b.generalist.digest() != gen_digest:
            raise AssertionError("phase I modified generalist parameters")
        self.state.step += 1
        return self._summarize(reports)

    # --------------------------------------------------------- phase II
    def run_phase2_step(self, batch: list[int], rng: np.random.Generator, lr: float) -> dict:
        """One generalist update against the frozen student/teacher consensus."""
        cfg, b = self.config, self.bundle
        plan = []
        for idx in batch:
            weak = augment.sample_weak(rng, self.config.aug_scales)
            strong = augment.sample_strong(rng, weak)
            other = augment.sample_weak(rng, self.config.aug_scales) if cfg.lai_weak_weak else None
            plan.append((idx, weak, strong, other))
        reports = []
        seg_digest = (b.student.digest(), b.teacher.digest()) if cfg.debug else None
        for idx, weak, strong, other in plan:
            s = self.samples[idx]
            x_w = augment.apply(weak, s.image)
            pl_s = predict(b.student, b.student_arch, x_w[None, None])[0]
            pl_t = predict(b.teacher, b.student_arch, x_w[None, None])[0]
            pl_m = consensus(pl_s, pl_t)
            prompt = self._prompt(idx)
            p_w = None if prompt is None else augment.apply_labels(weak, prompt)
            g = Graph(b.generalist)
            y2 = build_forward(g, g.input("x_weak", generalist_input(x_w, p_w)), b.generalist_arch)
            warp = None
            if other is not None:
                x_o = augment.apply(other, s.image)
                p_o = None if prompt is None else augment.apply_labels(other, prompt)
                y2s = build_forward(g, g.input("x_other", generalist_input(x_o, p_o)),
                                    b.generalist_arch)
                size = s.image.shape[0]

                def warp(m, weak=weak, other=other, size=size):
                    ref = augment.invert_to_reference(weak, m.reshape(m.shape[-2:]), size=size)
                    return augment.apply_mask(other, ref)
            else:
                x_s = augment.apply(strong, s.image)
                y2s = build_forward(g, g.input("x_strong", generalist_input(x_s, p_w)),
                                    b.generalist_arch)
            labeled = idx in self.labeled
            ann = None if p_w is None else p_w
            dense = augment.apply_mask(weak, s.mask) if (cfg.mode == "semi" and labeled) else None
            report = phase2_loss(cfg.mode, labeled, y2, y2s, pl_m, ann, dense, warp,
                                 cfg.lnr_with_refine, self.thr, self.options)
            backprop(g, report.total, b.generalist, scale=1.0 / len(batch))
            reports.append(report)
        self._check_finite(reports, "phase2")
        adam_step(b.generalist, AdamConfig(lr=lr))
        if cfg.debug and (b.student.digest(), b.teacher.digest()) != seg_digest:
            raise AssertionError("phase II modified student/teacher parameters")
        self.state.step += 1
        return self._summarize(reports)

    # ------------------------------------------------------------ epochs
    def phase1_epoch(self, ids: list[int] | None = None) -> None:
        ids = self.train_ids if ids is None else ids
        epoch = self.state.student_epochs
        lr = lr_schedule(epoch, self.config)
        rng = self._rng("phase1", epoch)
        for batch in self._batches(ids, rng):
            summary = self.run_phase1_step(batch, rng, lr)
            self._log({"stage": self.state.stage, "phase": "I", "epoch": epoch,
                       "step": self.state.step, "lr": lr, **summary})
        self.state.student_epochs += 1

    def phase2_epoch(self) -> None:
        epoch = self.state.generalist_epochs
        lr = lr_schedule(epoch, self.config, self._gen_lr())
        rng = self._rng("phase2", epoch)
        for batch in self._batches(self.train_ids, rng):
            summary = self.run_phase2_step(batch, rng, lr)
            self._log({"stage": self.state.stage, "phase": "II", "epoch": epoch,
                       "step": self.state.step, "lr": lr, **summary})
        self.state.generalist_epochs += 1
        self.state.generalist_version += 1

    def _supervised_epoch(self, role: str, ids: list[int], epoch: int, lr: float,
                          phase: str, data: list[Sample] | None = None) -> None:
        """Plain supervised epoch for the student (+EMA teacher) or the generalist."""
        cfg, b = self.config, self.bundle
        data = self.samples if data is None else data
        rng = self._rng(phase, epoch)
        params: ParamSet = b.student if role == "student" else b.generalist
        arch = b.student_arch if role == "student" else b.generalist_arch
        for batch in self._batches(ids, rng):
            losses = []
            for idx in batch:
                s = data[idx]
                weak = augment.sample_weak(rng, self.config.aug_scales)
                x = augment.apply(weak, s.image)
                g = Graph(params)
                if role == "student":
                    inp = x[None, None]
                else:
                    prompt = s.annotation.labels if s.annotation is not None else None
                    if phase == "stage0" and rng.random() < 0.25:
                        prompt = None
                    if phase != "stage0" and cfg.mode != "weak":
                        prompt = None
                    p = None if prompt is None else augment.apply_labels(weak, prompt)
                    inp = generalist_input(x, p)
                pred = build_forward(g, g.input("image", inp), arch)
                if phase != "stage0" and cfg.mode == "weak":
                    loss = partial_ce(pred, augment.apply_labels(weak, s.annotation.labels))
                else:
                    loss = supervised(pred, augment.apply_mask(weak, s.mask))
                if not np.isfinite(float(loss.value)):
                    raise NonFiniteError(f"non-finite loss in {phase}, sample {idx}")
                backprop(g, loss, params, scale=1.0 / len(batch))
                losses.append(float(loss.value))
            adam_step(params, AdamConfig(lr=lr))
            if role == "student":
                ema_update(b.teacher, b.student, b.ema.eta)
            self.state.step += 1
            self._log({"stage": self.state.stage, "phase": phase, "epoch": epoch,
                       "step": self.state.step, "lr": lr,
                       "loss": {"supervised": float(np.mean(losses))}, "branches": {}})

    # ------------------------------------------------------------ stages
    def aux_dataset(self) -> list[Sample]:
        """High-contrast auxiliary scenes for the generalist's pre-training."""
        cfg = self.config
        size = self.samples[self.train_ids[0]].image.shape[0]
        out = []
        for rng in sample_rngs(cfg.seed, cfg.aux_samples, stream=99):
            spec = SceneSpec(size=size, contrast=float(rng.uniform(cfg.aux_contrast_low,
                                                                   cfg.aux_contrast_high)))
            image, gt = gen_sample(spec, rng)
            out.append(Sample(image, gt, sparse_annotate(gt, "point", rng)))
        return out

    def stage0_pretrain(self) -> None:
        """Give the generalist its prior on the auxiliary distribution, then reset its optimizer."""
        if self.oracle is not None or self.config.stage0_epochs == 0:
            return
        aux = self.aux_dataset()
        self.state.stage = 0
        for epoch in range(self.config.stage0_epochs):
            self._supervised_epoch("generalist", list(range(len(aux))), epoch,
                                   lr_schedule(epoch, self.config, self._gen_lr()), "stage0", aux)
        fresh = ParamSet(self.bundle.generalist.tensors)
        self.bundle.generalist = fresh

    def stage1_init(self) -> None:
        """Supervised start on the labeled data for both the segmenter and the generalist."""
        self.stage0_pretrain()
        self.state.stage = 1
        if self.config.use_stage1:
            ids = self.labeled_ids()
            for _ in range(self.config.stage1_epochs):
                e = self.state.student_epochs
                self._supervised_epoch("student", ids, e, lr_schedule(e, self.config),
                                       "stage1_student")
                self.state.student_epochs += 1
            if self.oracle is None:
                for _ in range(self.config.stage1_epochs):
                    e = self.state.generalist_epochs
                    self._supervised_epoch("generalist", ids, e,
                                           lr_schedule(e, self.config, self._gen_lr()),
                                           "stage1_generalist")
                    self.state.generalist_epochs += 1
        self.state.generalist_version += 1
        self._finish("stage1")

    def stage2_warmup(self) -> None:
        """Phase I only; the generalist stays frozen."""
        self.state.stage = 2
        if self.config.use_stage2:
            for _ in range(self.config.stage2_epochs):
                self.phase1_epoch()
        self._finish("stage2")

    def stage3_alternate(self) -> None:
        self.state.stage = 3
        cfg = self.config
        while self.state.alternation < cfg.stage3_alternations:
            self.state.phase = "I"
            for _ in range(cfg.phase1_epochs):
                self.phase1_epoch()
            if cfg.use_phase2 and self.oracle is None:
                self.state.phase = "II"
                for _ in range(cfg.phase2_epochs):
                    self.phase2_epoch()
            self.state.alternation += 1
            self.state.phase = ""
            self.checkpoint(f"alt_{self.state.alternation:03d}")
            self._emit("alternation")
        self._finish("stage3")

    def _finish(self, name: str) -> None:
        self.state.completed.append(name)
        self.checkpoint(name)
        self._emit(name)

    def run(self) -> ModelBundle:
        """Run (or resume) stages 1 -> 2 -> 3."""
        done = set(self.state.completed)
        if "stage1" not in done:
            self.stage1_init()
        if "stage2" not in done:
            self.stage2_warmup()
        if "stage3" not in done:
            self.stage3_alternate()
        return self.bundle

    # -------------------------------------------------------- checkpoints
    def checkpoint(self, name: str) -> None:
        if self.out_dir is None:
            return
        d = self.out_dir / "checkpoints" / name
        self.bundle.save(d)
        (d / "config.json").write_text(json.dumps(asdict(self.config), indent=2, sort_keys=True))
        tmp = d / "state.json.tmp"
        tmp.write_text(self.state.to_json())
        tmp.replace(d / "state.json")

    @classmethod
    def resume(cls, checkpoint_dir: str | Path, config: TrainConfig, samples, manifest,
               out_dir: str | Path | None = None, **kwargs) -> "Trainer":
        d = Path(checkpoint_dir)
        bundle = ModelBundle.load(d)
        state = StageState.from_json((d / "state.json").read_text())
        trainer = cls(config, samples, manifest, bundle, state, out_dir, **kwargs)
        if trainer.out_dir is not None:
            logf = trainer.out_dir / "train_log.jsonl"
            if logf.exists():
                kept = [ln for ln in logf.read_text().splitlines()
                        if json.loads(ln)["step"] <= state.step]
                logf.write_text("".join(ln + "\n" for ln in kept))
        return trainer


# ---------------------------------------------------------------- evaluation

def model_predictions(bundle: ModelBundle, samples: list[Sample], ids: list[int], model: str,
                      mode: str = "weak", chunk: int = 16) -> list[np.ndarray]:
    """Predictions of ``model`` (student | teacher | generalist) on un-augmented images."""
    if model not in ("student", "teacher", "generalist"):
        raise ValueError(f"unknown model {model!r}")
    out = []
    for k in range(0, len(ids), chunk):
        part = [samples[i] for i in ids[k:k + chunk]]
        if model == "generalist":
            x = np.concatenate([generalist_input(
                s.image, s.annotation.labels if (mode == "weak" and s.annotation is not None) else None)
                for s in part])
            out.extend(predict(bundle.generalist, bundle.generalist_arch, x))
        else:
            x = np.stack([s.image for s in part])[:, None]
            out.extend(predict(getattr(bundle, model), bundle.student_arch, x))
    return out


def evaluate_model(bundle: ModelBundle, samples: list[Sample], ids: list[int], model: str,
                   mode: str = "weak") -> MetricReport:
    report = MetricReport()
    for sid, pred in zip(ids, model_predictions(bundle, samples, ids, model, mode)):
        report.add(sid, pred, samples[sid].mask)
    return report


def split_train(manifest: SplitManifest) -> SplitManifest:
    """Manifest restricted to the training ids (test ids dropped)."""
    return SplitManifest(list(manifest.ids), list(manifest.labeled), manifest.labeled_fraction,
                         [], manifest.mode, dict(manifest.extra))
