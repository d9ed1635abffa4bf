"""Privileged-information distillation losses.

Two complementary transfers from the trimap-fed teacher to the
trimap-free student:

* cross-layer semantic distillation (CLSD): per tap level, match
  global-context transforms of teacher vs student features, and teacher
  vs a stride-2 projection of the student's accumulated earlier layers
  (accumulator F̄_n = F_n + f3x3(F̄_{n-1}), base F̄_1 = F_1).
* attention-guided local distillation (ALD): squared feature mimicry
  inside the transition region, weighted by the teacher's spatial
  attention distribution, plus an L1 match between the two attention
  distributions in that region.

Teacher taps and the teacher's attention mask enter every loss as
constants; knowledge flows one way.  The Gc, projection, and student
attention parameters all train together with the student.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, conv2d
from .nets import (ENC_WIDTHS, GcParams, AttnParams, ConvParams,
                   init_gc_params, init_attn_params, init_conv,
                   gc_block, spatial_attention)

__all__ = [
    "SEMANTIC_MODES",
    "LOCAL_MODES",
    "DistillConfig",
    "LevelParams",
    "DistillParams",
    "init_distill_params",
    "clsd_loss",
    "ald_feature_loss",
    "ald_attention_loss",
    "ald_loss",
    "distill_loss",
]

SEMANTIC_MODES = ("none", "SD", "CLSD")
LOCAL_MODES = ("none", "LD", "ALD")


@dataclass
class DistillConfig:
    lambda1: float = 0.2
    lambda2: float = 1.0
    alpha_ald: float = 0.002
    beta_ald: float = 0.0002
    gamma: float = 1.0
    temperature: float = 1.0
    tap_levels: tuple = (1, 2, 3, 4)
    semantic_mode: str = "CLSD"
    local_mode: str = "ALD"
    normalize_clsd: bool = True

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "alpha_ald", "beta_ald", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.semantic_mode not in SEMANTIC_MODES:
            raise ValueError(f"semantic_mode must be one of {SEMANTIC_MODES}")
        if self.local_mode not in LOCAL_MODES:
            raise ValueError(f"local_mode must be one of {LOCAL_MODES}")
        levels = tuple(sorted(set(int(v) for v in self.tap_levels)))
        if any(v < 1 or v > 4 for v in levels):
            raise ValueError("tap_levels must be a subset of {1, 2, 3, 4}")
        active = self.semantic_mode != "none" or self.local_mode != "none"
        if active and not levels:
            raise ValueError("tap_levels must be nonempty when distillation is on")
        self.tap_levels = levels


@dataclass
class LevelParams:
    """Distillation parameters attached to one encoder tap level."""

    teacher_gc: GcParams
    student_gc: GcParams
    attn_teacher: AttnParams
    attn_student: AttnParams
    proj: ConvParams | None = None  # f3x3 stride 2 from the previous level

    def named(self, prefix):
        out = {}
        if self.teacher_gc is not None:
            out.update(self.teacher_gc.named(f"{prefix}.gc_t"))
            out.update(self.student_gc.named(f"{prefix}.gc_s"))
            out.update(self.attn_teacher.named(f"{prefix}.attn_t"))
            out.update(self.attn_student.named(f"{prefix}.attn_s"))
        if self.proj is not None:
            out.update(self.proj.named(f"{prefix}.proj"))
        return out


@dataclass
class DistillParams:
    levels: dict = field(default_factory=dict)  # level -> LevelParams

    def named(self, prefix="distill"):
        out = {}
        for n in sorted(self.levels):
            out.update(self.levels[n].named(f"{prefix}.L{n}"))
        return out

    def trainable(self, prefix="distill"):
        """Everything except the teacher-side attention conv.

        The teacher mask is used as a constant, so its parameters never
        receive gradients; keeping them out of the optimizer stops
        weight decay from eroding a frozen quantity.
        """
        frozen = set()
        for n, lp in self.levels.items():
            if lp.attn_teacher is not None:
                frozen.update(lp.attn_teacher.named(f"{prefix}.L{n}.attn_t"))
        return {k: v for k, v in self.named(prefix).items() if k not in frozen}


def init_distill_params(rng, cfg: DistillConfig) -> DistillParams:
    """Per-level parameter draw in ascending level order (deterministic)."""
    if not cfg.tap_levels:
        return DistillParams()
    top = max(cfg.tap_levels)
    params = DistillParams()
    for n in range(1, top + 1):
        if n in cfg.tap_levels:
            width = ENC_WIDTHS[n - 1]
            lp = LevelParams(
                teacher_gc=init_gc_params(rng, width),
                student_gc=init_gc_params(rng, width),
                attn_teacher=init_attn_params(rng, cfg.temperature),
                attn_student=init_attn_params(rng, cfg.temperature),
            )
            params.levels[n] = lp
        if n >= 2:
            proj = init_conv(rng, ENC_WIDTHS[n - 1], ENC_WIDTHS[n - 2], 3)
            if n in cfg.tap_levels:
                params.levels[n].proj = proj
            else:
                # accumulator still threads through skipped levels
                params.levels[n] = LevelParams(
                    teacher_gc=None, student_gc=None,
                    attn_teacher=None, attn_student=None, proj=proj)
    return params


def _sq_term(diff: Tensor, normalize: bool) -> Tensor:
    s = (diff * diff).sum()
    if normalize:
        return s * (1.0 / diff.data.size)
    return s


def clsd_loss(teacher_taps, student_taps, params: DistillParams,
              cfg: DistillConfig):
    """Cross-layer semantic distillation; returns (loss, accumulator list).

    Per level, the lambda1 term compares global-context transforms of the
    teacher and student taps; the lambda2 term (levels >= 2) compares the
    teacher against the projected accumulator.  In SD mode lambda2 is
    forced to 0 and the accumulator is never built.
    """
    lam2 = 0.0 if cfg.semantic_mode == "SD" else cfg.lambda2
    need_accum = lam2 != 0.0
    top = max(cfg.tap_levels)
    loss = Tensor(0.0)
    fbar = []
    prev = None
    for n in range(1, top + 1):
        lp = params.levels.get(n)
        s_n = student_taps[n - 1]
        proj_out = None
        if n >= 2 and need_accum:
            if lp is None or lp.proj is None:
                raise ValueError(f"no cross-layer projection for level {n}")
            proj_out = conv2d(prev, lp.proj.w, lp.proj.b, stride=2, pad=1)
        if n in cfg.tap_levels:
            if lp is None or lp.teacher_gc is None:
                raise ValueError(f"no Gc parameters for tap level {n}")
            wants_t = cfg.lambda1 != 0.0 or (n >= 2 and lam2 != 0.0)
            if wants_t:
                t_n = teacher_taps[n - 1].detach()
                gc_t = gc_block(t_n, lp.teacher_gc)
            if cfg.lambda1 != 0.0:
                gc_s = gc_block(s_n, lp.student_gc)
                loss = loss + cfg.lambda1 * _sq_term(gc_t - gc_s, cfg.normalize_clsd)
            if n >= 2 and lam2 != 0.0:
                gc_x = gc_block(proj_out, lp.student_gc)
                loss = loss + lam2 * _sq_term(gc_t - gc_x, cfg.normalize_clsd)
        if need_accum:
            acc = s_n if n == 1 else s_n + proj_out
            fbar.append(acc)
            prev = acc
    return loss, fbar


def _uniform_mask(like: Tensor) -> Tensor:
    n, _, h, w = like.data.shape
    return Tensor(np.full((n, 1, h, w), 1.0 / (h * w)))


def ald_feature_loss(f_teacher: Tensor, f_student: Tensor,
                     region: Tensor, mask: Tensor) -> Tensor:
    """Masked squared feature mimicry, averaged over the batch.

    sum_k,i,j R_ij * M_ij * (Ft_kij - Fs_kij)^2 with the teacher feature
    and mask as constants.
    """
    if f_teacher.data.shape != f_student.data.shape:
        raise ValueError(f"teacher {f_teacher.shape} vs student "
                         f"{f_student.shape} feature shapes differ")
    if region.data.shape[-2:] != f_teacher.data.shape[-2:]:
        raise ValueError(f"region mask {region.shape} does not match "
                         f"features {f_teacher.shape}")
    if mask.data.shape[-2:] != f_teacher.data.shape[-2:]:
        raise ValueError(f"attention mask {mask.shape} does not match "
                         f"features {f_teacher.shape}")
    d = f_teacher.detach() - f_student
    weighted = region.detach() * mask.detach() * (d * d)
    return weighted.sum() * (1.0 / f_teacher.data.shape[0])


def ald_attention_loss(m_teacher: Tensor, m_student: Tensor,
                       region: Tensor) -> Tensor:
    """L1 distance between region-limited attention maps (batch mean)."""
    if m_teacher.data.shape != m_student.data.shape:
        raise ValueError(f"attention shapes differ: {m_teacher.shape} vs "
                         f"{m_student.shape}")
    if region.data.shape[-2:] != m_teacher.data.shape[-2:]:
        raise ValueError(f"region mask {region.shape} does not match "
                         f"attention {m_teacher.shape}")
    r = region.detach()
    diff = abs(r * m_teacher.detach() - r * m_student)
    return diff.sum() * (1.0 / m_teacher.data.shape[0])


def ald_loss(teacher_taps, student_taps, region_masks, params: DistillParams,
             cfg: DistillConfig) -> Tensor:
    """alpha * feature term + beta * attention term over the tap levels.

    LD mode swaps the teacher attention for a uniform distribution and
    drops the attention term (local distillation without guidance).
    """
    loss = Tensor(0.0)
    guided = cfg.local_mode == "ALD"
    if cfg.alpha_ald == 0.0 and (not guided or cfg.beta_ald == 0.0):
        return loss
    for n in cfg.tap_levels:
        lp = params.levels[n]
        f_t = teacher_taps[n - 1].detach()
        f_s = student_taps[n - 1]
        region = region_masks[n - 1]
        if guided:
            m_t = spatial_attention(f_t, lp.attn_teacher)
        else:
            m_t = _uniform_mask(f_t)
        if cfg.alpha_ald != 0.0:
            loss = loss + cfg.alpha_ald * ald_feature_loss(f_t, f_s, region, m_t)
        if guided and cfg.beta_ald != 0.0:
            m_s = spatial_attention(f_s, lp.attn_student)
            loss = loss + cfg.beta_ald * ald_attention_loss(m_t, m_s, region)
    return loss


def distill_loss(teacher_taps, student_taps, region_masks,
                 params: DistillParams, cfg: DistillConfig) -> Tensor:
    """Sum of the enabled semantic and local components."""
    loss = Tensor(0.0)
    if cfg.semantic_mode != "none":
        semantic, _ = clsd_loss(teacher_taps, student_taps, params, cfg)
        loss = loss + semantic
    if cfg.local_mode != "none":
        loss = loss + ald_loss(teacher_taps, student_taps, region_masks,
                               params, cfg)
    return loss
