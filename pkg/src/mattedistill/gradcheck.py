"""Finite-difference verification of reverse-mode gradients.

``check_gradients`` perturbs every coordinate of every leaf parameter of
a scalar-valued function with central differences and compares against
the gradients produced by ``backward``.  It is deliberately slow and
exact; the CLI wires it to small fixed problem sizes so a full sweep
stays under a minute.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward

__all__ = ["check_gradients", "max_rel_error"]


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(|a|, |n|, 1e-8), elementwise."""
    denom = np.maximum(1e-8, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(fn, params, eps=1e-6):
    """Compare analytic and central-difference gradients of ``fn``.

    ``fn`` maps the list of leaf tensors to a scalar Tensor and must be
    deterministic (re-evaluated 2 * total-coordinate times).  Returns the
    worst relative error over all coordinates of all parameters.
    """
    loss = fn(params)
    if loss.data.size != 1:
        raise ValueError("check_gradients needs a scalar-valued function")
    backward(loss)
    analytic = [p.grad_array().copy() for p in params]
    for p in params:
        p.grad = None

    worst = 0.0
    for pi, p in enumerate(params):
        num = np.zeros_like(p.data)
        for idx in np.ndindex(p.data.shape):
            keep = p.data[idx]
            p.data[idx] = keep + eps
            f_plus = fn(params).item()
            p.data[idx] = keep - eps
            f_minus = fn(params).item()
            p.data[idx] = keep
            num[idx] = (f_plus - f_minus) / (2.0 * eps)
        err = max_rel_error(analytic[pi].reshape(-1), num.reshape(-1))
        worst = max(worst, err)
    return worst


# -- ready-made check problems -------------------------------------------------
#
# Small fixed-seed instances of each loss, sized so a full sweep of every
# parameter coordinate finishes in seconds.  Teacher-side tensors are
# built as constants: they are excluded both from training and from the
# checks, exactly as in the real loop.


def _alpha_problem(rng):
    from .tensor import parameter
    from .synth import scaling_mask
    from .alpha_loss import alpha_loss

    pred = parameter(rng.uniform(0.25, 0.7, size=(1, 1, 8, 8)))
    # continuous per-pixel offsets keep both the L1 kink and the
    # gradient-magnitude |.| kink far from every probe point
    delta = rng.uniform(0.05, 0.15, size=pred.shape) * \
        rng.choice([-1.0, 1.0], size=pred.shape)
    gt = np.clip(pred.data + delta, 0.0, 1.0)
    trimap = rng.choice([0.0, 0.5, 1.0], size=(1, 1, 8, 8))
    scaling = scaling_mask(trimap)

    def fn(_):
        return alpha_loss(pred, gt, trimap, scaling)

    return fn, [pred]


def _distill_problem(rng, semantic, local, **weights):
    from .tensor import Tensor, parameter
    from .nets import init_gc_params, init_attn_params, init_conv
    from .distill import DistillConfig, DistillParams, LevelParams, distill_loss

    cfg = DistillConfig(tap_levels=(1, 2), semantic_mode=semantic,
                        local_mode=local, **weights)
    # 16 channels -> a 4-wide Gc bottleneck, keeping the layer norm well
    # away from its degenerate two-channel sign-function regime
    c = 16
    lvl1 = LevelParams(teacher_gc=init_gc_params(rng, c),
                       student_gc=init_gc_params(rng, c),
                       attn_teacher=init_attn_params(rng),
                       attn_student=init_attn_params(rng))
    lvl2 = LevelParams(teacher_gc=init_gc_params(rng, c),
                       student_gc=init_gc_params(rng, c),
                       attn_teacher=init_attn_params(rng),
                       attn_student=init_attn_params(rng),
                       proj=init_conv(rng, c, c, 3))
    params = DistillParams(levels={1: lvl1, 2: lvl2})
    # zero-initialized Wv2 would hide its upstream path; randomize it
    for lp in (lvl1, lvl2):
        for gc in (lp.teacher_gc, lp.student_gc):
            gc.wv2.w.data = rng.uniform(-0.2, 0.2, size=gc.wv2.w.shape)

    t_taps = [Tensor(rng.standard_normal((1, c, 8, 8))),
              Tensor(rng.standard_normal((1, c, 4, 4)))]
    s_taps = [parameter(rng.standard_normal((1, c, 8, 8))),
              parameter(rng.standard_normal((1, c, 4, 4)))]
    regions = [Tensor((rng.uniform(size=(1, 1, 8, 8)) < 0.5).astype(float)),
               Tensor((rng.uniform(size=(1, 1, 4, 4)) < 0.5).astype(float))]

    leaves = list(s_taps)
    for n, lp in sorted(params.levels.items()):
        for group in (lp.teacher_gc, lp.student_gc):
            leaves += [group.wk.w, group.wk.b, group.wv1.w, group.wv1.b,
                       group.ln_gamma, group.ln_beta, group.wv2.w, group.wv2.b]
        if local != "none":
            leaves += [lp.attn_student.conv7.w, lp.attn_student.conv7.b]
        if lp.proj is not None:
            leaves += [lp.proj.w, lp.proj.b]

    def fn(_):
        return distill_loss(t_taps, s_taps, regions, params, cfg)

    return fn, leaves


def run_gradient_checks(module="all", eps=1e-4):
    """Finite-difference sweeps for the loss modules; returns name -> error.

    The probe step is larger than the classic 1e-6: the losses contain
    heavily damped paths (attention maps scaled by beta) whose true
    gradients sit near the 1e-8 denominator floor, and a larger step
    keeps the difference quotient's cancellation noise below tolerance
    while truncation error stays negligible for these smooth losses.
    """
    results = {}
    if module in ("all", "alpha"):
        fn, leaves = _alpha_problem(np.random.default_rng(101))
        results["alpha"] = check_gradients(fn, leaves, eps=eps)
    if module in ("all", "clsd"):
        fn, leaves = _distill_problem(np.random.default_rng(202),
                                      semantic="CLSD", local="none")
        results["clsd"] = check_gradients(fn, leaves, eps=eps)
    if module in ("all", "ald"):
        fn, leaves = _distill_problem(np.random.default_rng(303),
                                      semantic="none", local="ALD")
        results["ald"] = check_gradients(fn, leaves, eps=eps)
    if module == "all":
        rng = np.random.default_rng(404)
        fa, la = _alpha_problem(rng)
        # order-one weights: correctness is invariant to the static
        # weights, and keeping all paths at comparable magnitude keeps the
        # finite differences well-conditioned
        fd, ld = _distill_problem(rng, semantic="CLSD", local="ALD",
                                  alpha_ald=0.2, beta_ald=0.1)
        gamma = 1.0

        def fn(_):
            return fa(None) + gamma * fd(None)

        results["total"] = check_gradients(fn, la + ld, eps=eps)
    if not results:
        raise ValueError(f"unknown grad-check module {module!r}")
    return results
