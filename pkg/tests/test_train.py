"""Optimizer, config parsing, checkpoints, and short training runs."""

import numpy as np
import pytest

from mattedistill import synth, tenfile
from mattedistill.distill import DistillConfig
from mattedistill.nets import init_net_params, student_forward
from mattedistill.tensor import Tensor, parameter
from mattedistill.train import (
    ConfigError,
    NumericError,
    OptState,
    TrainConfig,
    config_from_json,
    evaluate_checkpoint,
    load_net_params,
    lr_at,
    sgd_step,
    train_student,
    train_teacher,
)


def cfg_for(tmp, **kw):
    kw.setdefault("dataset", str(tmp))
    return TrainConfig(**kw)


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------

def test_lr_schedule_endpoints_and_midpoint():
    cfg = TrainConfig(dataset="unused", lr0=0.01, max_iter=2000)
    assert lr_at(0, cfg) == 0.01
    assert lr_at(2000, cfg) == 0.0
    assert abs(lr_at(1000, cfg) - 0.01 * 0.5 ** 0.9) <= 1e-12


def test_lr_schedule_closed_form_and_monotone():
    cfg = TrainConfig(dataset="unused", lr0=0.05, max_iter=77)
    vals = [lr_at(i, cfg) for i in range(78)]
    for i, v in enumerate(vals):
        assert v == 0.05 * (1.0 - i / 77) ** 0.9
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_lr_rejects_out_of_range_iteration():
    cfg = TrainConfig(dataset="unused", max_iter=10)
    with pytest.raises(ValueError):
        lr_at(-1, cfg)
    with pytest.raises(ValueError):
        lr_at(11, cfg)


# ---------------------------------------------------------------------------
# sgd_step
# ---------------------------------------------------------------------------

def test_plain_gradient_step():
    cfg = TrainConfig(dataset="unused", momentum=0.0, weight_decay=0.0)
    p = parameter(np.array([1.0, -2.0, 3.0]))
    g = np.array([0.5, 0.5, -1.0])
    state = OptState()
    sgd_step({"w": p}, state, cfg, grads={"w": g}, lr=0.1)
    assert np.array_equal(p.data, np.array([1.0, -2.0, 3.0]) - 0.1 * g)
    assert state.iteration == 1


def test_zero_gradient_keeps_params():
    cfg = TrainConfig(dataset="unused", weight_decay=0.0)
    p = parameter(np.array([0.25, -0.5]))
    state = OptState()
    for _ in range(5):
        sgd_step({"w": p}, state, cfg, grads={"w": np.zeros(2)}, lr=0.1)
    assert np.array_equal(p.data, np.array([0.25, -0.5]))
    assert state.iteration == 5


def test_two_step_momentum_unroll():
    # theta=1, g=1 twice, momentum 0.9, lr 0.1: 1 - 0.1 - 0.1*1.9 = 0.71
    cfg = TrainConfig(dataset="unused", momentum=0.9, weight_decay=0.0)
    p = parameter(np.array(1.0))
    state = OptState()
    sgd_step({"w": p}, state, cfg, grads={"w": np.array(1.0)}, lr=0.1)
    sgd_step({"w": p}, state, cfg, grads={"w": np.array(1.0)}, lr=0.1)
    assert abs(p.data - 0.71) <= 1e-15


def test_weight_decay_enters_gradient():
    cfg = TrainConfig(dataset="unused", momentum=0.0, weight_decay=0.5)
    p = parameter(np.array(2.0))
    sgd_step({"w": p}, OptState(), cfg, grads={"w": np.array(0.0)}, lr=0.1)
    assert abs(p.data - 1.9) <= 1e-15  # g' = 0 + 0.5*2 = 1


def test_default_lr_uses_pre_increment_iteration():
    cfg = TrainConfig(dataset="unused", lr0=0.01, max_iter=2,
                      momentum=0.0, weight_decay=0.0)
    p = parameter(np.array(0.0))
    state = OptState()
    sgd_step({"w": p}, state, cfg, grads={"w": np.array(1.0)})
    assert p.data == -0.01  # lr_at(0), not lr_at(1)


def test_nan_gradient_aborts_with_parameter_name():
    cfg = TrainConfig(dataset="unused")
    p = parameter(np.array(1.0))
    with pytest.raises(NumericError, match="net.enc1a.w"):
        sgd_step({"net.enc1a.w": p}, OptState(), cfg,
                 grads={"net.enc1a.w": np.array(np.nan)}, lr=0.1)


def test_backward_grads_used_when_not_overridden():
    cfg = TrainConfig(dataset="unused", momentum=0.0, weight_decay=0.0)
    p = parameter(np.array([2.0, 3.0]))
    (p * p).sum().backward()
    sgd_step({"w": p}, OptState(), cfg, lr=0.5)
    # grad = 2p, step = 0.5*2p = p -> zero
    assert np.array_equal(p.data, np.zeros(2))
    assert p.grad is None  # consumed by the step


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------

def test_config_defaults_from_minimal_json(tmp_path):
    f = tmp_path / "c.json"
    f.write_text('{"dataset": "data/train"}')
    cfg = config_from_json(f)
    assert cfg.lr0 == 0.01
    assert cfg.momentum == 0.9
    assert cfg.weight_decay == 0.0005
    assert cfg.distill.lambda1 == 0.2
    assert cfg.distill.lambda2 == 1.0
    assert cfg.distill.alpha_ald == 0.002
    assert cfg.distill.beta_ald == 0.0002
    assert cfg.distill.gamma == 1.0
    assert cfg.distill.semantic_mode == "CLSD"
    assert cfg.distill.local_mode == "ALD"


def test_config_nested_distill_section(tmp_path):
    f = tmp_path / "c.json"
    f.write_text('{"dataset": "d", "distill": {"semantic_mode": "SD", '
                 '"tap_levels": [2, 3]}}')
    cfg = config_from_json(f)
    assert cfg.distill.semantic_mode == "SD"
    assert cfg.distill.tap_levels == (2, 3)


@pytest.mark.parametrize("body,phrase", [
    ('{"dataset": "d", "max_itr": 5}', "unknown config keys"),
    ('{"dataset": "d", "distill": {"lamda1": 1}}', "unknown distill keys"),
    ('{"lr0": 0.01}', "dataset"),
    ('[1, 2]', "JSON object"),
    ('{"dataset": "d", "distill": 5}', "JSON object"),
    ('{"dataset": "d", "lr0": -1}', "lr0"),
    ('{"dataset": "d", "lr0": "fast"}', "not supported"),
    ('{"dataset": "d", "distill": {"semantic_mode": "zzz"}}', "semantic_mode"),
    ('not json', "valid JSON"),
])
def test_config_rejections(tmp_path, body, phrase):
    f = tmp_path / "c.json"
    f.write_text(body)
    with pytest.raises(ConfigError, match=phrase):
        config_from_json(f)


def test_config_missing_file():
    with pytest.raises(ConfigError, match="not found"):
        config_from_json("/nonexistent/cfg.json")


# ---------------------------------------------------------------------------
# checkpoint reconstruction
# ---------------------------------------------------------------------------

def test_network_checkpoint_round_trip(tmp_path):
    net = init_net_params(np.random.default_rng(21), in_channels=3)
    named = net.named("net")
    path = tmp_path / "s.ppid"
    tenfile.save_checkpoint(path, {k: t.data for k, t in named.items()})
    back = load_net_params(tenfile.load_checkpoint(path), "net")
    for k, t in back.named("net").items():
        assert np.array_equal(t.data, named[k].data), k
        assert not t.requires_grad
    again = load_net_params(tenfile.load_checkpoint(path), "net",
                            trainable=True)
    assert all(t.requires_grad for t in again.named("net").values())


def test_checkpoint_missing_tensor_named_in_error(tmp_path):
    net = init_net_params(np.random.default_rng(23), in_channels=3)
    arrays = {k: t.data for k, t in net.named("net").items()}
    del arrays["net.dec2.b"]
    path = tmp_path / "bad.ppid"
    tenfile.save_checkpoint(path, arrays)
    with pytest.raises(ConfigError, match="net.dec2"):
        load_net_params(tenfile.load_checkpoint(path), "net")


def test_checkpoint_stray_tensor_reported_in_diff(tmp_path):
    net = init_net_params(np.random.default_rng(23), in_channels=3)
    arrays = {k: t.data for k, t in net.named("net").items()}
    arrays["net.stray"] = np.zeros(3)
    path = tmp_path / "bad.ppid"
    tenfile.save_checkpoint(path, arrays)
    with pytest.raises(ConfigError) as exc:
        load_net_params(tenfile.load_checkpoint(path), "net")
    assert "net.stray" in str(exc.value)


def test_checkpoint_wrong_shape_rejected(tmp_path):
    net = init_net_params(np.random.default_rng(25), in_channels=3)
    arrays = {k: t.data for k, t in net.named("net").items()}
    arrays["net.enc2a.w"] = np.zeros((8, 8, 3, 3))
    path = tmp_path / "bad.ppid"
    tenfile.save_checkpoint(path, arrays)
    with pytest.raises(ConfigError, match="enc2a"):
        load_net_params(tenfile.load_checkpoint(path), "net")


def test_checkpoint_bad_input_width_rejected(tmp_path):
    net = init_net_params(np.random.default_rng(27), in_channels=3)
    arrays = {k: t.data for k, t in net.named("net").items()}
    arrays["net.enc1a.w"] = np.zeros((16, 5, 3, 3))
    path = tmp_path / "bad.ppid"
    tenfile.save_checkpoint(path, arrays)
    with pytest.raises(ConfigError, match="input"):
        load_net_params(tenfile.load_checkpoint(path), "net")


# ---------------------------------------------------------------------------
# training loops on a miniature dataset
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("tiny")
    synth.generate_dataset(d / "train", 16, (32, 32), seed=70)
    synth.generate_dataset(d / "test", 4, (32, 32), seed=71)
    return d


def _short_cfg(tiny_data, **kw):
    kw.setdefault("dataset", str(tiny_data / "train"))
    kw.setdefault("max_iter", 6)
    kw.setdefault("batch_size", 4)
    kw.setdefault("image_size", 32)
    kw.setdefault("eval_every", 3)
    return TrainConfig(**kw)


def _quiet(*_a, **_k):
    pass


def test_teacher_short_run_deterministic(tiny_data, tmp_path):
    outs = []
    for run in range(2):
        ck = tmp_path / f"t{run}.ppid"
        cfg = _short_cfg(tiny_data, checkpoint=str(ck), seed=5)
        path, hist = train_teacher(cfg, log=_quiet)
        assert path == str(ck)
        assert all(np.isfinite(v) for _, _, v in hist)
        outs.append(ck.read_bytes())
    assert outs[0] == outs[1]


def test_student_gamma_zero_is_bitwise_baseline(tiny_data, tmp_path):
    base_cfg = _short_cfg(
        tiny_data, checkpoint=str(tmp_path / "base.ppid"), seed=6,
        distill=DistillConfig(semantic_mode="none", local_mode="none",
                              tap_levels=()))
    base_path, _ = train_student(base_cfg, log=_quiet)

    teacher_cfg = _short_cfg(tiny_data, checkpoint=str(tmp_path / "t.ppid"),
                             seed=6)
    teacher_path, _ = train_teacher(teacher_cfg, log=_quiet)

    g0_cfg = _short_cfg(tiny_data, checkpoint=str(tmp_path / "g0.ppid"),
                        seed=6, distill=DistillConfig(gamma=0.0))
    g0_path, _ = train_student(g0_cfg, teacher_ckpt=teacher_path, log=_quiet)

    a = tenfile.load_checkpoint(base_path)
    b = tenfile.load_checkpoint(g0_path)
    assert a.keys() == b.keys()
    for k in a:
        assert np.array_equal(a[k], b[k]), k


def test_student_distillation_run(tiny_data, tmp_path):
    teacher_cfg = _short_cfg(tiny_data, checkpoint=str(tmp_path / "t.ppid"),
                             seed=7)
    teacher_path, _ = train_teacher(teacher_cfg, log=_quiet)
    before = (tmp_path / "t.ppid").read_bytes()

    cfg = _short_cfg(tiny_data, checkpoint=str(tmp_path / "s.ppid"), seed=7)
    path, hist = train_student(cfg, teacher_ckpt=teacher_path, log=_quiet)
    assert (tmp_path / "t.ppid").read_bytes() == before  # teacher untouched

    named = tenfile.load_checkpoint(path)
    assert any(k.startswith("distill.") for k in named)
    assert any(k.startswith("net.") for k in named)
    # no teacher-side attention params in the checkpoint's trainable set
    net = load_net_params(named, "net")
    pred, _ = student_forward(
        Tensor(synth.load_dataset(tiny_data / "test")[0].image), net)
    assert pred.data.min() >= 0.0 and pred.data.max() <= 1.0


def test_student_distillation_needs_teacher(tiny_data):
    cfg = _short_cfg(tiny_data)
    with pytest.raises(ConfigError, match="teacher"):
        train_student(cfg, teacher_ckpt=None, log=_quiet)


def test_student_checkpoint_rejected_as_teacher(tiny_data, tmp_path):
    base_cfg = _short_cfg(
        tiny_data, checkpoint=str(tmp_path / "b.ppid"), seed=8,
        distill=DistillConfig(semantic_mode="none", local_mode="none",
                              tap_levels=()))
    base_path, _ = train_student(base_cfg, log=_quiet)
    cfg = _short_cfg(tiny_data, seed=8)
    with pytest.raises(ConfigError, match="teacher"):
        train_student(cfg, teacher_ckpt=base_path, log=_quiet)


def test_dataset_validation(tiny_data, tmp_path):
    with pytest.raises(ConfigError, match="manifest|empty"):
        train_teacher(_short_cfg(tiny_data, dataset=str(tmp_path / "nope")),
                      log=_quiet)
    with pytest.raises(ConfigError, match="32"):
        train_teacher(_short_cfg(tiny_data, image_size=64), log=_quiet)
    with pytest.raises(ConfigError, match="batch_size"):
        train_teacher(_short_cfg(tiny_data, batch_size=64), log=_quiet)


def test_evaluate_checkpoint_roles(tiny_data, tmp_path):
    teacher_cfg = _short_cfg(tiny_data, checkpoint=str(tmp_path / "t.ppid"),
                             seed=9)
    teacher_path, _ = train_teacher(teacher_cfg, log=_quiet)
    rep1 = evaluate_checkpoint(teacher_path, tiny_data / "test")
    rep2 = evaluate_checkpoint(teacher_path, tiny_data / "test")
    assert rep1.groups == rep2.groups  # bitwise-deterministic evaluation
    assert rep1.groups["whole"]["count"] == 4
    assert rep1.groups["whole"]["sad"] >= 0.0


def test_evaluate_checkpoint_missing_data(tiny_data, tmp_path):
    teacher_cfg = _short_cfg(tiny_data, checkpoint=str(tmp_path / "t.ppid"),
                             seed=10)
    teacher_path, _ = train_teacher(teacher_cfg, log=_quiet)
    with pytest.raises((ConfigError, FileNotFoundError)):
        evaluate_checkpoint(teacher_path, tmp_path / "missing")
