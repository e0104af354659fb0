import numpy as np
import pytest

from scaler.autodiff import ConfigError, ParamSet, ShapeError, backprop, finite_diff_check
from scaler.losses import bce
from scaler.models import (GENERALIST_ARCH, STUDENT_ARCH, ModelBundle, EMAConfig, ema_update,
                           generalist_forward, init_params, student_forward, teacher_forward)


@pytest.fixture
def image():
    return np.random.default_rng(0).random((1, 1, 16, 16))


@pytest.fixture
def student():
    return init_params(STUDENT_ARCH, np.random.default_rng(1))


def test_architecture_sizes():
    s = init_params(STUDENT_ARCH, np.random.default_rng(0))
    g = init_params(GENERALIST_ARCH, np.random.default_rng(0))
    assert 3_000 <= s.num_params() <= 6_000
    assert 15_000 <= g.num_params() <= 25_000
    assert GENERALIST_ARCH.depth == 6 and STUDENT_ARCH.depth == 5


def test_student_output_in_open_unit_interval(image, student):
    out = student_forward(image, student)
    assert out.shape == (1, 1, 16, 16)
    assert np.all((out.value > 0) & (out.value < 1))


def test_zero_head_gives_half(image):
    p = init_params(STUDENT_ARCH, np.random.default_rng(0), zero_head=True)
    np.testing.assert_array_equal(student_forward(image, p).value, 0.5)
    np.testing.assert_array_equal(teacher_forward(image, p), 0.5)


def test_student_forward_deterministic(image):
    a = student_forward(image, init_params(STUDENT_ARCH, np.random.default_rng(5))).value
    b = student_forward(image, init_params(STUDENT_ARCH, np.random.default_rng(5))).value
    assert a.tobytes() == b.tobytes()


def test_teacher_matches_student_exactly(image, student):
    assert teacher_forward(image, student).tobytes() == student_forward(image, student).value[0, 0].tobytes()


def test_teacher_forward_leaves_gradients_untouched(image, student):
    student.grads["conv0.w"][...] = 3.0
    teacher_forward(image, student)
    assert np.all(student.grads["conv0.w"] == 3.0)
    assert not any(student.grads[n].any() for n in student if n != "conv0.w")


def test_shape_errors(student):
    with pytest.raises(ShapeError):
        student_forward(np.zeros((1, 2, 8, 8)), student)
    with pytest.raises(ShapeError):
        generalist_forward(np.zeros((1, 1, 8, 8)), np.zeros((4, 4)),
                           init_params(GENERALIST_ARCH, np.random.default_rng(0)))


def test_generalist_prompt_participates(image):
    g = init_params(GENERALIST_ARCH, np.random.default_rng(2))
    prompt = np.zeros((16, 16))
    prompt[4, 4], prompt[12, 12] = 1, -1
    without = generalist_forward(image, None, g)
    explicit_zero = generalist_forward(image, np.zeros((16, 16)), g)
    with_prompt = generalist_forward(image, prompt, g)
    np.testing.assert_array_equal(without, explicit_zero)
    assert not np.allclose(without, with_prompt)


def test_generalist_differentiable_mode(image):
    g = init_params(GENERALIST_ARCH, np.random.default_rng(2))
    out = generalist_forward(image, None, g, differentiable=True)
    np.testing.assert_allclose(out.value[0, 0], generalist_forward(image, None, g), rtol=0, atol=1e-15)
    loss = out.graph.mean(out)
    backprop(out.graph, loss)
    assert all(g.grads[n].any() for n in g)


def test_student_gradients_match_finite_differences(student):
    x = np.random.default_rng(4).random((1, 1, 16, 16))
    target = (np.random.default_rng(5).random((16, 16)) > 0.5).astype(float)
    out = student_forward(x, student)
    loss = bce(out, target)
    report = finite_diff_check(out.graph, loss, student, tolerance=1e-6)
    assert report.passed, report.errors


def test_ema_default_eta():
    assert EMAConfig().eta == 0.996


def test_ema_fixed_points():
    rng = np.random.default_rng(0)
    s = init_params(STUDENT_ARCH, rng)
    t = init_params(STUDENT_ARCH, rng)
    t_before = t.copy()
    ema_update(t, s, 1.0)
    assert t.max_abs_diff(t_before) == 0.0
    ema_update(t, s, 0.0)
    assert t.max_abs_diff(s) == 0.0


def test_ema_contracts_by_eta():
    rng = np.random.default_rng(1)
    s, t = init_params(STUDENT_ARCH, rng), init_params(STUDENT_ARCH, rng)
    d0 = t.max_abs_diff(s)
    ema_update(t, s, 0.9)
    assert t.max_abs_diff(s) == pytest.approx(0.9 * d0, rel=1e-12)


def test_ema_rejects_bad_input():
    a = ParamSet({"w": np.ones(2)})
    with pytest.raises(ShapeError):
        ema_update(a, ParamSet({"w": np.ones(3)}), 0.5)
    with pytest.raises(ConfigError):
        ema_update(a, a.copy(), 1.5)


def test_bundle_roundtrip(tmp_path):
    b = ModelBundle.create(seed=3)
    b.save(tmp_path / "ck")
    c = ModelBundle.load(tmp_path / "ck")
    for role in ("student", "teacher", "generalist"):
        assert getattr(b, role).digest() == getattr(c, role).digest()
    assert c.student_arch == STUDENT_ARCH and c.generalist_arch == GENERALIST_ARCH
    assert c.ema.eta == 0.996


def test_bundle_teacher_starts_as_student():
    b = ModelBundle.create(seed=0)
    assert b.teacher.digest() == b.student.digest()
