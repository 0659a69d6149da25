"""Finite-difference checks over every differentiable op and the full training loss.

Shared by the ``gradcheck`` subcommand and the test-suite. Everything runs in
float64 with central differences at ``eps = 1e-3``.
"""

from __future__ import annotations

import time
from dataclasses import replace
from typing import Callable

import numpy as np

from .numerics import autograd as ag
from .numerics.autograd import Tensor
from .numerics.gradcheck import grad_check
from .rng import derive_rng

EPS = 1e-3


def _weighted(op: Callable[[Tensor], Tensor], out_shape, rng) -> Callable[[Tensor], Tensor]:
    # a random linear readout makes every output coordinate matter
    w = rng.normal(size=out_shape)
    return lambda x: (op(x) * w).sum()


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, np.ndarray]]:
    """name -> (scalar function of one Tensor, input point)."""
    x = rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    other = rng.normal(size=(3, 4))
    row = rng.normal(size=(4,))
    mat = rng.normal(size=(4, 5))
    bmat = rng.normal(size=(2, 3, 4))
    gamma = rng.uniform(0.5, 1.5, size=4)
    beta = rng.normal(size=4)
    ids = np.array([0, 2, 2, 1, 0])
    mask = rng.random((3, 4)) > 0.5
    # keep relu/maximum inputs away from the kink
    away = np.where(np.abs(x) < 0.1, x + 0.3, x)

    def w(op, shape):
        return _weighted(op, shape, rng)

    s34 = (3, 4)
    cases = {
        "add": (w(lambda t: ag.add(t, other), s34), x),
        "add_broadcast": (w(lambda t: ag.add(t, row), s34), x),
        "sub": (w(lambda t: ag.sub(other, t), s34), x),
        "mul": (w(lambda t: ag.mul(t, t), s34), x),
        "div": (w(lambda t: ag.div(other, t), s34), pos),
        "neg": (w(ag.neg, s34), x),
        "power": (w(lambda t: ag.power(t, 1.7), s34), pos),
        "maximum": (w(lambda t: ag.maximum(t, 0.0), s34), away),
        "exp": (w(ag.exp, s34), x),
        "log": (w(ag.log, s34), pos),
        "sqrt": (w(ag.sqrt, s34), pos),
        "sin": (w(ag.sin, s34), x),
        "cos": (w(ag.cos, s34), x),
        "tanh": (w(ag.tanh, s34), x),
        "sigmoid": (w(ag.sigmoid, s34), x),
        "softplus": (w(ag.softplus, s34), x),
        "log_sigmoid": (w(ag.log_sigmoid, s34), x * 5),
        "relu": (w(ag.relu, s34), away),
        "gelu": (w(ag.gelu, s34), x),
        "sum": (w(lambda t: ag.sum_(t, axis=0), (4,)), x),
        "mean": (w(lambda t: ag.mean(t, axis=1, keepdims=True), (3, 1)), x),
        "l1_norm": (w(lambda t: ag.l1_norm(t, axis=-1), (3,)), away),
        "l2_norm": (w(lambda t: ag.l2_norm(t, axis=-1), (3,)), x),
        "logsumexp": (w(lambda t: ag.logsumexp(t, axis=-1), (3,)), x),
        "softmax": (w(lambda t: ag.softmax(t, axis=-1), s34), x),
        "log_softmax": (w(lambda t: ag.log_softmax(t, axis=0), s34), x),
        "layernorm": (w(lambda t: ag.layernorm(t, Tensor(gamma), Tensor(beta)), s34), x),
        "layernorm_gamma": (w(lambda g: ag.layernorm(Tensor(x), g, Tensor(beta)), s34), gamma),
        "matmul_left": (w(lambda t: ag.matmul(t, mat), (3, 5)), x),
        "matmul_right": (w(lambda m: ag.matmul(Tensor(x), m), (3, 5)), mat),
        "matmul_batched": (w(lambda t: ag.matmul(t, mat), (2, 3, 5)), bmat),
        "matmul_batched_weight": (w(lambda m: ag.matmul(Tensor(bmat), m), (2, 3, 5)), mat),
        "matmul_bmm": (w(lambda t: ag.matmul(t, ag.swapaxes(t, 1, 2)), (2, 3, 3)), bmat),
        "reshape": (w(lambda t: ag.reshape(t, (2, 6)), (2, 6)), x),
        "transpose": (w(lambda t: ag.transpose(t), (4, 3)), x),
        "swapaxes": (w(lambda t: ag.swapaxes(t, 0, 2), (4, 3, 2)), bmat),
        "getitem_slice": (w(lambda t: ag.getitem(t, (slice(None), 1)), (3,)), x),
        "getitem_fancy": (w(lambda t: ag.getitem(t, (np.array([0, 0, 2]), np.array([1, 1, 3]))), (3,)), x),
        "take_rows": (w(lambda t: ag.take_rows(t, ids), (5, 5)), mat),
        "concat": (w(lambda t: ag.concat([t, ag.mul(t, 2.0)], axis=1), (3, 8)), x),
        "stack": (w(lambda t: ag.stack([t, ag.exp(t)], axis=0), (2, 3, 4)), x),
        "where": (w(lambda t: ag.where(mask, t, ag.mul(t, t)), s34), x),
        "astype": (w(lambda t: ag.astype(t, np.float64), s34), x),
    }
    return cases


def check_ops(seed: int = 0) -> dict[str, float]:
    rng = derive_rng(seed, "gradsuite", "ops")
    return {name: grad_check(f, x0, EPS) for name, (f, x0) in op_cases(rng).items()}


def tiny_setup(seed: int = 0, batch_size: int = 8):
    """A small float64 model and one fixed random batch from the synthetic generator."""
    from .geodata import SynthConfig, synth_dataset
    from .model import ModelConfig, TriModalModel
    from .training import TrainConfig, make_batch

    samples, store = synth_dataset(batch_size, 4, seed, SynthConfig(tile_hw=24, audio_dim=6, token_bins=3))
    mc = ModelConfig.for_store(store.info, d=8, input_hw=(4, 4), patch=2, zoom_hw=(4, 4), image_width=8,
                               image_heads=2, image_depth=1, audio_width=8, text_width=8, text_heads=2,
                               text_depth=1, fusion_depth=1, fusion_heads=2, log_var_init=-1.0,
                               mu_init_scale=2.0)
    tc = TrainConfig(batch_size=batch_size, steps=1, seed=seed)
    model = TriModalModel(mc, seed=seed).astype(np.float64)
    # Zero-initialized metadata embedders would leave their gradients trivially
    # zero, and 0.02-scale token tables put LayerNorm inputs at a std where a
    # 1e-3 stencil is a 5% step; unit-scale draws give a well-conditioned point.
    rng = derive_rng(seed, "gradsuite", "meta-init")
    for name, p in model.fusion.named_parameters().items():
        if name.split(".")[0] in ("latlon", "month", "hour", "audio_source", "text_source"):
            p.data[...] = rng.normal(0.0, 0.3, size=p.shape)
    for p in (model.fusion.special, model.text.tokens.table, model.text.positions.table):
        p.data[...] = rng.normal(0.0, 1.0, size=p.shape)
    # the narrow audio MLP emits ~0.1-norm features; cosine normalization has
    # 1/|mu|^3 curvature down there
    model.audio.proj.weight.data *= 5.0
    model.loss.a_log.data[...] = np.log(2.0)
    batch = make_batch(samples, store, tc, mc, 0)
    return model, batch, tc


def _mask_key(breakdown) -> tuple:
    return tuple((k, v.tobytes()) for k, v in sorted(breakdown.pseudo_masks.items()))


def stable_param_check(loss_fn, params: dict[str, Tensor], eps: float = EPS, coords_per_param: int = 4,
                       rng: np.random.Generator | None = None) -> tuple[dict[str, float], int]:
    """Like :func:`grad_check_params`, for a loss that is only piecewise smooth.

    ``loss_fn`` returns ``(loss, breakdown)``. The pseudo-positive sets are
    re-mined on every evaluation, so a stencil ``x +- eps`` that changes them
    straddles a jump of the loss and says nothing about the gradient. Such
    coordinates are skipped and replaced by other ones. Returns the per-tensor
    errors and the number of skipped coordinates.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    loss, br = loss_fn()
    center = _mask_key(br)
    grads = ag.backward(loss, params)
    errors, skipped = {}, 0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        analytic = np.asarray(grads[name]).reshape(-1)
        worst, taken = 0.0, 0
        for i in rng.permutation(flat.size):
            if taken == coords_per_param:
                break
            orig = flat[i]
            flat[i] = orig + eps
            fp, bp = loss_fn()
            flat[i] = orig - eps
            fm, bm = loss_fn()
            flat[i] = orig
            if _mask_key(bp) != center or _mask_key(bm) != center:
                skipped += 1
                continue
            num = (float(fp.data) - float(fm.data)) / (2 * eps)
            worst = max(worst, abs(analytic[i] - num) / max(1.0, abs(analytic[i])))
            taken += 1
        errors[name] = worst
    return errors, skipped


def check_full_loss(seed: int = 0, coords_per_param: int = 4, kind: str = "pcmepp") -> dict[str, float]:
    """Per-parameter worst relative error of the summed three-pair loss."""
    return check_full_loss_detail(seed, coords_per_param, kind)[0]


def check_full_loss_detail(seed: int = 0, coords_per_param: int = 4, kind: str = "pcmepp"):
    from .training import forward_loss

    model, batch, tc = tiny_setup(seed)
    tc = replace(tc, loss_kind=kind)
    params = model.named_parameters()
    if kind == "pcmepp":
        params = {k: v for k, v in params.items() if k != "loss.logit_scale"}
    else:
        params = {k: v for k, v in params.items() if k not in ("loss.a_log", "loss.b")}
        # unit temperature; at 1/0.07 the cosine logits are curved enough for
        # the O(eps^2) truncation error of central differences to show
        model.loss.logit_scale.data[...] = 0.0
    return stable_param_check(lambda: forward_loss(model, batch, tc), params, EPS, coords_per_param,
                              derive_rng(seed, "gradsuite", "coords"))


def _group(name: str) -> str:
    head = name.split(".")[0]
    return {"audio_head": "encoders", "text_head": "encoders", "image": "encoders", "audio": "encoders",
            "text": "encoders", "fusion": "fusion", "loss": "probloss"}.get(head, head)


def run_suite(seed: int = 0, coords_per_param: int = 4) -> dict:
    """Worst relative error per module plus the offending entry and timing."""
    t0 = time.perf_counter()
    ops = check_ops(seed)
    full, skipped = check_full_loss_detail(seed, coords_per_param)
    infonce, _ = check_full_loss_detail(seed, coords_per_param, kind="infonce")
    groups: dict[str, dict[str, float]] = {"numerics": ops}
    for name, err in full.items():
        groups.setdefault(_group(name), {})[name] = err
    groups["training.infonce"] = infonce
    out = {}
    for module, errs in groups.items():
        worst = max(errs, key=errs.get)
        out[module] = {"max_rel_error": errs[worst], "worst": worst, "n_checked": len(errs)}
    return {"modules": out, "max_rel_error": max(v["max_rel_error"] for v in out.values()),
            "skipped_coords": skipped, "seconds": time.perf_counter() - t0}
