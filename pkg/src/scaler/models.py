"""Student / teacher / generalist segmenters on the autodiff substrate."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import (ConfigError, Graph, ParamSet, ShapeError, Var, conv2d_forward,
                       leaky_relu, load_params, save_params, sigmoid)


@dataclass(frozen=True)
class SegmenterArch:
    """Stack of 3x3 convs with leaky-relu between them and a 1-channel sigmoid head."""

    in_channels: int = 1
    widths: tuple[int, ...] = (8, 16, 16, 8)

    @property
    def depth(self) -> int:
        return len(self.widths) + 1

    def layer_shapes(self) -> list[tuple[int, int]]:
        chans = (self.in_channels, *self.widths, 1)
        return list(zip(chans[:-1], chans[1:]))

    def to_dict(self) -> dict:
        return {"in_channels": self.in_channels, "widths": list(self.widths)}

    @classmethod
    def from_dict(cls, d: dict) -> "SegmenterArch":
        return cls(int(d["in_channels"]), tuple(int(w) for w in d["widths"]))


STUDENT_ARCH = SegmenterArch(1, (8, 16, 16, 8))
GENERALIST_ARCH = SegmenterArch(2, (16, 24, 32, 24, 16))


@dataclass
class EMAConfig:
    eta: float = 0.996

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must lie in [0, 1], got {self.eta}")


def init_params(arch: SegmenterArch, rng: np.random.Generator,
                zero_head: bool = False) -> ParamSet:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    params = ParamSet()
    layers = arch.layer_shapes()
    for i, (cin, cout) in enumerate(layers):
        bound = np.sqrt(6.0 / (cin * 9))
        w = rng.uniform(-bound, bound, size=(cout, cin, 3, 3))
        if zero_head and i == len(layers) - 1:
            w = np.zeros_like(w)
        params.add(f"conv{i}.w", w)
        params.add(f"conv{i}.b", np.zeros(cout))
    return params


def _check_image(image: np.ndarray, channels: int | None = None) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None, None]
    if image.ndim != 4:
        raise ShapeError(f"expected N x C x H x W image, got shape {image.shape}")
    if channels is not None and image.shape[1] != channels:
        raise ShapeError(f"expected {channels} input channel(s), got {image.shape[1]}")
    return image


def build_forward(graph: Graph, x: Var, arch: SegmenterArch) -> Var:
    """Record the segmenter on ``graph``; parameters come from ``graph.params``."""
    h = x
    n = arch.depth
    for i in range(n):
        h = graph.conv2d(h, graph.param(f"conv{i}.w"), graph.param(f"conv{i}.b"))
        h = graph.leaky_relu(h) if i < n - 1 else graph.sigmoid(h)
    return h


def predict(params: ParamSet, arch: SegmenterArch, x: np.ndarray) -> np.ndarray:
    """No-grad forward pass on an N x C x H x W batch; returns N x H x W."""
    h = _check_image(x, arch.in_channels)
    n = arch.depth
    for i in range(n):
        h, _ = conv2d_forward(h, params[f"conv{i}.w"], params[f"conv{i}.b"])
        h = leaky_relu(h) if i < n - 1 else sigmoid(h)
    return h[:, 0]


def student_forward(image, params: ParamSet, arch: SegmenterArch = STUDENT_ARCH,
                    graph: Graph | None = None) -> Var:
    """Differentiable student pass. Returns the 1x1xHxW output node; ``.graph`` is the handle."""
    image = _check_image(image, arch.in_channels)
    if image.shape[0] != 1:
        raise ShapeError(f"student_forward takes a single image, got batch {image.shape[0]}")
    graph = graph if graph is not None else Graph(params)
    return build_forward(graph, graph.input("image", image), arch)


def teacher_forward(image, params: ParamSet, arch: SegmenterArch = STUDENT_ARCH) -> np.ndarray:
    """Teacher prediction as an H x W array; records no graph, touches no gradients."""
    image = _check_image(image, arch.in_channels)
    if image.shape[0] != 1:
        raise ShapeError(f"teacher_forward takes a single image, got batch {image.shape[0]}")
    return predict(params, arch, image)[0]


def encode_prompt(prompt, shape: tuple[int, int]) -> np.ndarray:
    """Prompt channel: +1 foreground point, -1 background point, 0 elsewhere."""
    if prompt is None:
        return np.zeros(shape)
    labels = np.asarray(getattr(prompt, "labels", prompt), dtype=np.float64)
    if labels.shape != tuple(shape):
        raise ShapeError(f"prompt shape {labels.shape} does not match image {tuple(shape)}")
    return labels


def generalist_input(image, prompt) -> np.ndarray:
    image = _check_image(image, 1)
    chan = encode_prompt(prompt, image.shape[2:])
    return np.concatenate([image, chan[None, None]], axis=1)


def generalist_forward(image, prompt, params: ParamSet, arch: SegmenterArch = GENERALIST_ARCH,
                       graph: Graph | None = None, differentiable: bool = False):
    """Generalist pass. Returns an H x W array, or the output node when ``differentiable``."""
    image = _check_image(image, 1)
    chan = encode_prompt(prompt, image.shape[2:])
    if not differentiable:
        x = np.concatenate([image, chan[None, None]], axis=1)
        return predict(params, arch, x)[0]
    graph = graph if graph is not None else Graph(params)
    x = graph.concat(graph.input("image", image), graph.input("prompt", chan[None, None]))
    return build_forward(graph, x, arch)


def ema_update(teacher: ParamSet, student: ParamSet, eta: float) -> ParamSet:
    """teacher <- eta * teacher + (1 - eta) * student, tensor by tensor, in place."""
    if not 0.0 <= eta <= 1.0:
        raise ConfigError(f"eta must lie in [0, 1], got {eta}")
    if set(teacher.names()) != set(student.names()):
        raise ShapeError("teacher and student have different parameter names")
    for name in teacher:
        t, s = teacher[name], student[name]
        if t.shape != s.shape:
            raise ShapeError(f"{name}: teacher {t.shape} vs student {s.shape}")
        t[...] = eta * t + (1.0 - eta) * s
    return teacher


@dataclass
class ModelBundle:
    student: ParamSet
    teacher: ParamSet
    generalist: ParamSet
    student_arch: SegmenterArch = STUDENT_ARCH
    generalist_arch: SegmenterArch = GENERALIST_ARCH
    ema: EMAConfig = field(default_factory=EMAConfig)

    @classmethod
    def create(cls, seed: int, student_arch: SegmenterArch = STUDENT_ARCH,
               generalist_arch: SegmenterArch = GENERALIST_ARCH,
               ema: EMAConfig | None = None) -> "ModelBundle":
        rng_s, rng_g = (np.random.default_rng(s) for s in np.random.SeedSequence([seed, 101]).spawn(2))
        student = init_params(student_arch, rng_s)
        teacher = student.copy()
        return cls(student, teacher, init_params(generalist_arch, rng_g),
                   student_arch, generalist_arch, ema or EMAConfig())

    def copy(self) -> "ModelBundle":
        return ModelBundle(self.student.copy(), self.teacher.copy(), self.generalist.copy(),
                           self.student_arch, self.generalist_arch, EMAConfig(self.ema.eta))

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for role in ("student", "teacher", "generalist"):
            ps = getattr(self, role)
            save_params(ps, d / f"{role}.bin")
            save_params(ps, d / f"{role}.opt.bin", optimizer_state=True)
        arch = {"student": self.student_arch.to_dict(),
                "teacher": self.student_arch.to_dict(),
                "generalist": self.generalist_arch.to_dict(),
                "ema": asdict(self.ema)}
        tmp = d / "arch.json.tmp"
        tmp.write_text(json.dumps(arch, indent=2, sort_keys=True))
        tmp.replace(d / "arch.json")

    @classmethod
    def load(cls, directory: str | Path) -> "ModelBundle":
        d = Path(directory)
        arch = json.loads((d / "arch.json").read_text())
        roles = {}
        for role in ("student", "teacher", "generalist"):
            opt = d / f"{role}.opt.bin"
            roles[role] = load_params(d / f"{role}.bin", opt if opt.exists() else None)
        bundle = cls(roles["student"], roles["teacher"], roles["generalist"],
                     SegmenterArch.from_dict(arch["student"]),
                     SegmenterArch.from_dict(arch["generalist"]),
                     EMAConfig(**arch["ema"]))
        bundle.validate()
        return bundle

    def validate(self) -> None:
        """Check every ParamSet matches its architecture descriptor."""
        for role, arch in (("student", self.student_arch), ("teacher", self.student_arch),
                           ("generalist", self.generalist_arch)):
            ps = getattr(self, role)
            for i, (cin, cout) in enumerate(arch.layer_shapes()):
                w, b = f"conv{i}.w", f"conv{i}.b"
                if w not in ps or ps[w].shape != (cout, cin, 3, 3) or ps[b].shape != (cout,):
                    raise ShapeError(f"{role} parameters do not match architecture at layer {i}")
            if len(ps.names()) != 2 * arch.depth:
                raise ShapeError(f"{role} has unexpected extra parameters")
