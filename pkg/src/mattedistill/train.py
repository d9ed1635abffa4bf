"""Training loops, optimizer, and checkpoint plumbing.

Two-stage protocol: the teacher (RGB + trimap in) is pretrained on the
supervised alpha loss alone, frozen, and then the student (RGB only)
trains on alpha loss plus the distillation losses against the frozen
teacher's encoder taps.

Determinism contract: every random draw comes from a named stream keyed
as [seed, stream, ...], so runs with equal seeds are bitwise identical
and turning the distillation term off cannot perturb the baseline's
draws (criterion: a gamma = 0 run IS the baseline run).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .tensor import Tensor, parameter, backward, concat
from . import synth, tenfile
from .nets import (ENC_WIDTHS, DEC_WIDTHS, NetParams, ConvParams,
                   init_net_params, widen_input, student_forward,
                   teacher_forward, encoder_taps)
from .distill import DistillConfig, DistillParams, LevelParams, \
    init_distill_params, distill_loss
from .alpha_loss import alpha_loss
from .metrics import report, MetricsReport

__all__ = [
    "ConfigError",
    "NumericError",
    "TrainConfig",
    "OptState",
    "lr_at",
    "sgd_step",
    "config_from_json",
    "train_teacher",
    "train_student",
    "evaluate_checkpoint",
    "load_net_params",
]


class ConfigError(ValueError):
    """Bad configuration or incompatible inputs (CLI exit code 2)."""


class NumericError(RuntimeError):
    """Non-finite value encountered during optimization (CLI exit code 3)."""


# Seed-stream tags; each independent concern draws from its own stream.
# (The teacher reuses the student's init stream on purpose; see
# train_teacher.)
STREAM_STUDENT_INIT = 12
STREAM_DISTILL_INIT = 13
STREAM_BATCH = 14
STREAM_TRIMAP = 15

# Global-norm gradient clip applied by the training loops before the SGD
# update.  The hard clamp-to-[0,1] prediction head has zero gradient
# outside its range, so one overshooting step at the full 0.01 learning
# rate can park every pixel's preactivation outside [0,1] at once; that
# state is absorbing (the gradient is exactly zero everywhere) and kills
# the run.  Scaling the gradient to at most unit norm keeps early steps
# inside the responsive band; the update rule itself is untouched.
#
# When distillation is on, the clip is applied per parameter group.  The
# backbone's combined gradient (supervised + distillation, whose relative
# sizes the loss weights already set) is clipped as one vector, so the
# distillation pull keeps its intended few-percent share of the step.
# The adapter parameters (context blocks, attention convs, projections)
# receive gradient only from the distillation loss, which runs one to
# two orders of magnitude smaller than the supervised spikes; scaling
# them by the backbone's clip factor would freeze their convergence and
# leave the mimicry residual noisy for the whole run, so they are
# clipped under their own unit budget instead.
GRAD_CLIP_NORM = 1.0


def _clipped_grads(trainables):
    total = 0.0
    for t in trainables.values():
        g = t.grad_array()
        total += float((g * g).sum())
    norm = np.sqrt(total)
    scale = min(1.0, GRAD_CLIP_NORM / max(norm, 1e-12))
    return {k: t.grad_array() * scale for k, t in trainables.items()}


@dataclass
class TrainConfig:
    dataset: str
    checkpoint: str | None = None
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    max_iter: int = 2000
    batch_size: int = 8
    seed: int = 1
    image_size: int = 64
    eval_every: int = 200
    ce_eps: float = 1e-6
    distill: DistillConfig = field(default_factory=DistillConfig)

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be > 0")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")


def config_from_json(path) -> TrainConfig:
    """Parse a JSON config file; unknown keys are rejected."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    allowed = {f.name for f in fields(TrainConfig)}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "dataset" not in raw:
        raise ConfigError("config must name a dataset directory")
    dk = raw.pop("distill", None)
    try:
        if dk is not None:
            if not isinstance(dk, dict):
                raise ConfigError("distill must be a JSON object")
            d_allowed = {f.name for f in fields(DistillConfig)}
            d_unknown = set(dk) - d_allowed
            if d_unknown:
                raise ConfigError(f"unknown distill keys: {sorted(d_unknown)}")
            raw["distill"] = DistillConfig(**dk)
        return TrainConfig(**raw)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e))


# -- optimizer ----------------------------------------------------------------


@dataclass
class OptState:
    velocities: dict = field(default_factory=dict)
    iteration: int = 0


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Poly schedule: lr0 * (1 - iter/max_iter)^0.9."""
    if iteration < 0 or iteration > cfg.max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.max_iter}]")
    return cfg.lr0 * (1.0 - iteration / cfg.max_iter) ** 0.9


def sgd_step(params: dict, state: OptState, cfg: TrainConfig,
             grads=None, lr=None) -> None:
    """One SGD-with-momentum update over named parameter tensors.

    g' = g + wd*theta; v <- momentum*v + g'; theta <- theta - lr*v.
    Gradients default to those accumulated on the tensors by backward;
    pass ``grads`` (name -> array) to override.  The learning rate uses
    the pre-increment iteration count; the counter advances once per
    call.
    """
    if lr is None:
        lr = lr_at(state.iteration, cfg)
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad_array()
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name} "
                               f"at iteration {state.iteration}")
        g = g + cfg.weight_decay * p.data
        v = state.velocities.get(name)
        v = g if v is None else cfg.momentum * v + g
        state.velocities[name] = v
        p.data = p.data - lr * v
        p.grad = None
    state.iteration += 1


# -- checkpoint reconstruction -------------------------------------------------


def _rebuild_conv(named, prefix, expect_w, trainable):
    w = named.get(f"{prefix}.w")
    b = named.get(f"{prefix}.b")
    if w is None or b is None:
        raise ConfigError(f"checkpoint missing tensors for {prefix}")
    if w.shape != expect_w or b.shape != (expect_w[0],):
        raise ConfigError(f"checkpoint tensor {prefix}.w has shape {w.shape}, "
                          f"expected {expect_w}")
    mk = parameter if trainable else Tensor
    return ConvParams(w=mk(w), b=mk(b))


def load_net_params(named: dict, prefix="net", trainable=False) -> NetParams:
    """Rebuild NetParams from checkpoint arrays, validating every shape."""
    first = named.get(f"{prefix}.enc1a.w")
    if first is None:
        raise ConfigError(f"checkpoint has no {prefix}.enc1a.w tensor")
    in_ch = first.shape[1]
    if in_ch not in (3, 4):
        raise ConfigError(f"checkpoint first conv expects {in_ch} input "
                          f"channels; only 3 (student) or 4 (teacher) are valid")
    enc, prev = [], in_ch
    for n, width in enumerate(ENC_WIDTHS, start=1):
        a = _rebuild_conv(named, f"{prefix}.enc{n}a", (width, prev, 3, 3), trainable)
        b = _rebuild_conv(named, f"{prefix}.enc{n}b", (width, width, 3, 3), trainable)
        enc.append((a, b))
        prev = width
    dec = []
    for n, width in enumerate(DEC_WIDTHS, start=1):
        dec.append(_rebuild_conv(named, f"{prefix}.dec{n}", (width, prev, 3, 3),
                                 trainable))
        prev = width
    head = _rebuild_conv(named, f"{prefix}.head", (1, prev, 1, 1), trainable)
    params = NetParams(enc=enc, dec=dec, head=head, in_channels=in_ch)
    got = {k for k in named if k.startswith(f"{prefix}.")}
    expect = set(params.named(prefix))
    if got != expect:
        missing = sorted(expect - got)
        extra = sorted(got - expect)
        raise ConfigError(f"checkpoint does not match the network layout; "
                          f"missing {missing}, unexpected {extra}")
    return params


def _save_params(path, *param_groups):
    named = {}
    for group in param_groups:
        for k, t in group.items():
            named[k] = t.data
    tenfile.save_checkpoint(path, named)


# -- batching -----------------------------------------------------------------


def _epoch_plan(cfg: TrainConfig, epoch: int, n: int):
    """Deterministic per-epoch sample order and trimap radii."""
    perm = np.random.default_rng(
        [cfg.seed, STREAM_BATCH, epoch]).permutation(n)
    lo, hi = synth.TRAIN_TRIMAP_RADII
    radii = np.random.default_rng(
        [cfg.seed, STREAM_TRIMAP, epoch]).integers(lo, hi + 1, size=n)
    return perm, radii


def _assemble(samples, idx, radii, want_regions, cache=None):
    """Stack one batch: images, gt alpha, fresh trimaps, loss masks.

    ``cache`` memoizes the per-(sample, radius) trimap artifacts; they
    are pure functions of the key, so reuse is exact.
    """
    imgs, alphas, trimaps, scalings = [], [], [], []
    regions = {n: [] for n in want_regions}
    for i in idx:
        s = samples[i]
        key = (int(i), int(radii[i]))
        hit = cache.get(key) if cache is not None else None
        if hit is None:
            tm = synth.make_trimap(s.alpha, int(radii[i]))
            sc = synth.scaling_mask(tm)
            rg = {n: synth.region_mask(tm, n) for n in want_regions}
            if cache is not None:
                cache[key] = (tm, sc, rg)
        else:
            tm, sc, rg = hit
        imgs.append(s.image)
        alphas.append(s.alpha)
        trimaps.append(tm)
        scalings.append(sc)
        for n in want_regions:
            regions[n].append(rg[n])
    batch = {
        "image": Tensor(np.concatenate(imgs, axis=0)),
        "alpha": np.concatenate(alphas, axis=0),
        "trimap": np.concatenate(trimaps, axis=0),
        "scaling": np.concatenate(scalings, axis=0),
    }
    batch["regions"] = [
        Tensor(np.concatenate(regions[n], axis=0)) if n in regions else None
        for n in range(1, 5)
    ]
    return batch


def _check_dataset(cfg: TrainConfig):
    try:
        samples = synth.load_dataset(cfg.dataset)
    except FileNotFoundError as e:
        raise ConfigError(str(e))
    if not samples:
        raise ConfigError(f"dataset at {cfg.dataset} is empty")
    h, w = samples[0].alpha.shape[-2:]
    if (h, w) != (cfg.image_size, cfg.image_size):
        raise ConfigError(f"dataset samples are {h}x{w}, config says "
                          f"{cfg.image_size}x{cfg.image_size}")
    if len(samples) < cfg.batch_size:
        raise ConfigError(f"dataset has {len(samples)} samples, "
                          f"batch_size is {cfg.batch_size}")
    return samples


def _finite_or_abort(loss_val, iteration):
    if not np.isfinite(loss_val):
        raise NumericError(f"non-finite loss at iteration {iteration}")


# -- training loops -----------------------------------------------------------


def train_teacher(cfg: TrainConfig, log=print):
    """Pretrain the trimap-fed teacher on the supervised alpha loss."""
    samples = _check_dataset(cfg)
    # The teacher starts from the SAME weight draw the student of this
    # seed will use, widened by a zero column for the trimap plane.  Both
    # nets therefore share an init basin, and the teacher's features stay
    # reachable targets for the trimap-free student during distillation;
    # with independent inits the feature-mimicry terms drag the student
    # toward an alien solution and measurably hurt it.
    rng = np.random.default_rng([cfg.seed, STREAM_STUDENT_INIT])
    net = widen_input(init_net_params(rng, in_channels=3))
    trainables = net.named("net")
    state = OptState()
    per_epoch = len(samples) // cfg.batch_size
    history = []
    mask_cache = {}
    t0 = time.time()
    for it in range(cfg.max_iter):
        epoch, pos = divmod(it, per_epoch)
        if pos == 0:
            perm, radii = _epoch_plan(cfg, epoch, len(samples))
        idx = perm[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
        batch = _assemble(samples, idx, radii, want_regions=(),
                          cache=mask_cache)
        trimap_plane = Tensor(batch["trimap"])
        pred, _ = teacher_forward(batch["image"], trimap_plane, net)
        loss = alpha_loss(pred, batch["alpha"], batch["trimap"],
                          batch["scaling"], ce_eps=cfg.ce_eps)
        val = loss.item()
        _finite_or_abort(val, it)
        backward(loss)
        lr = lr_at(state.iteration, cfg)
        sgd_step(trainables, state, cfg, grads=_clipped_grads(trainables))
        if it % cfg.eval_every == 0 or it == cfg.max_iter - 1:
            history.append((it, lr, val))
            log(f"[teacher] iter {it:5d}  lr {lr:.5f}  loss {val:.5f}  "
                f"({time.time() - t0:.1f}s)")
    ckpt = cfg.checkpoint or "teacher.ppid"
    _save_params(ckpt, trainables)
    return ckpt, history


def _distill_active(cfg: TrainConfig) -> bool:
    d = cfg.distill
    return d.gamma != 0.0 and (d.semantic_mode != "none" or
                               d.local_mode != "none")


def _teacher_taps(teacher: NetParams, samples, idx, radii, batch, cache):
    """Frozen-teacher encoder taps for one batch, memoized per sample.

    The teacher never updates during student training and its taps
    depend only on (sample, trimap radius), so each pair is computed
    once; misses are batched into a single forward.
    """
    keys = [(int(i), int(radii[i])) for i in idx]
    misses = [b for b, key in enumerate(keys) if key not in cache]
    if misses:
        img = Tensor(batch["image"].data[misses])
        tm = Tensor(batch["trimap"][misses])
        taps = encoder_taps(concat([img, tm], axis=1), teacher)
        for j, b in enumerate(misses):
            cache[keys[b]] = [t.data[j:j + 1] for t in taps]
    return [Tensor(np.concatenate([cache[key][n] for key in keys], axis=0))
            for n in range(4)]


def train_student(cfg: TrainConfig, teacher_ckpt=None, log=print):
    """Train the trimap-free student, optionally distilling from a teacher.

    With gamma = 0 or both distillation modes off, the teacher is never
    loaded and no distillation parameters exist: the run IS the baseline
    run, draw for draw.
    """
    samples = _check_dataset(cfg)
    active = _distill_active(cfg)
    teacher = None
    if active:
        if teacher_ckpt is None:
            raise ConfigError("distillation is enabled but no teacher "
                              "checkpoint was given")
        named = tenfile.load_checkpoint(teacher_ckpt)
        teacher = load_net_params(named, "net", trainable=False)
        if teacher.in_channels != 4:
            raise ConfigError(f"{teacher_ckpt} is not a teacher checkpoint "
                              f"(first conv has {teacher.in_channels} input "
                              f"channels, expected 4)")

    net = init_net_params(
        np.random.default_rng([cfg.seed, STREAM_STUDENT_INIT]), in_channels=3)
    trainables = dict(net.named("net"))
    dparams = None
    if active:
        dparams = init_distill_params(
            np.random.default_rng([cfg.seed, STREAM_DISTILL_INIT]), cfg.distill)
        trainables.update(dparams.trainable("distill"))

    state = OptState()
    per_epoch = len(samples) // cfg.batch_size
    want_regions = cfg.distill.tap_levels if (active and
                                              cfg.distill.local_mode != "none") \
        else ()
    history = []
    mask_cache = {}
    tap_cache = {}
    t0 = time.time()
    for it in range(cfg.max_iter):
        epoch, pos = divmod(it, per_epoch)
        if pos == 0:
            perm, radii = _epoch_plan(cfg, epoch, len(samples))
        idx = perm[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
        batch = _assemble(samples, idx, radii, want_regions,
                          cache=mask_cache)
        pred, s_taps = student_forward(batch["image"], net)
        loss = alpha_loss(pred, batch["alpha"], batch["trimap"],
                          batch["scaling"], ce_eps=cfg.ce_eps)
        if active:
            t_taps = _teacher_taps(teacher, samples, idx, radii,
                                   batch, tap_cache)
            loss = loss + cfg.distill.gamma * distill_loss(
                t_taps, s_taps, batch["regions"], dparams, cfg.distill)
        val = loss.item()
        _finite_or_abort(val, it)
        backward(loss)
        if active:
            grads = _clipped_grads({k: v for k, v in trainables.items()
                                    if k.startswith("net.")})
            grads.update(_clipped_grads({k: v for k, v in trainables.items()
                                         if not k.startswith("net.")}))
        else:
            grads = _clipped_grads(trainables)
        lr = lr_at(state.iteration, cfg)
        sgd_step(trainables, state, cfg, grads=grads)
        if it % cfg.eval_every == 0 or it == cfg.max_iter - 1:
            history.append((it, lr, val))
            log(f"[student] iter {it:5d}  lr {lr:.5f}  loss {val:.5f}  "
                f"({time.time() - t0:.1f}s)")
    ckpt = cfg.checkpoint or "student.ppid"
    groups = [net.named("net")]
    if dparams is not None:
        groups.append(dparams.named("distill"))
    _save_params(ckpt, *groups)
    return ckpt, history


# -- evaluation ----------------------------------------------------------------


def evaluate_checkpoint(ckpt_path, data_dir) -> MetricsReport:
    """Forward every dataset sample through the checkpointed network.

    The network role is inferred from the checkpoint (4 input channels =
    teacher, which consumes the dataset's stored trimaps; 3 = student,
    which sees RGB only) and the grouped metric report is returned.
    """
    named = tenfile.load_checkpoint(ckpt_path)
    net = load_net_params(named, "net", trainable=False)
    samples = synth.load_dataset(data_dir)
    if not samples:
        raise ConfigError(f"dataset at {data_dir} is empty")
    triples = []
    for s in samples:
        img = Tensor(s.image)
        if net.in_channels == 4:
            pred, _ = teacher_forward(img, Tensor(s.trimap), net)
        else:
            pred, _ = student_forward(img, net)
        triples.append((pred.data, s.alpha, s.attribute))
    return report(triples)
