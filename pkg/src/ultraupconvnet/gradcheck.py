"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import Tensor, backward


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor] | Mapping[str, Tensor],
    h: float = 1e-5,
    max_coords: int | None = 64,
    seed: int = 0,
) -> dict[str, float]:
    """Compare tape gradients of ``f()`` with central differences.

    ``f`` must rebuild its graph on every call and return a scalar. Tensors
    with more than ``max_coords`` entries are checked on a seeded random
    subsample of that many coordinates (``None`` checks everything). Returns
    the max relative error per parameter, keyed by name or position.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    if isinstance(params, Mapping):
        named = list(params.items())
    else:
        named = [(p.name or str(i), p) for i, p in enumerate(params)]

    for _, p in named:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in named}

    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    for name, p in named:
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        else:
            coords = np.arange(flat.size)
        numeric = np.empty(len(coords))
        for k, idx in enumerate(coords):
            orig = flat[idx]
            flat[idx] = orig + h
            up = f().item()
            flat[idx] = orig - h
            down = f().item()
            flat[idx] = orig
            numeric[k] = (up - down) / (2.0 * h)
        exact = analytic[name].reshape(-1)[coords]
        report[name] = float(relative_error(exact, numeric).max()) if len(coords) else 0.0
        p.grad = None
    return report


def randomize_params(params: Mapping[str, Tensor], seed: int = 0) -> None:
    """Move ``params`` in place to a generic point for gradient checking.

    At the default initialization many gradients sit near 1e-8, below the
    central-difference noise floor (about one ulp of the loss divided by 2h),
    so weights are redrawn at fan-in scale and vectors are jittered.
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        if p.ndim >= 2:
            fan_in = int(np.prod(p.shape[1:]))
            p.data[...] = rng.standard_normal(p.shape) / np.sqrt(fan_in)
        else:
            p.data[...] = p.data + 0.1 * rng.standard_normal(p.shape)


SMOOTH_TOL = 1e-7
DEFAULT_TOL = 1e-4
SMOOTH_GROUPS = ("gelu", "softmax", "log_softmax", "linear")


def gradcheck_suite(scale: str = "toy", seed: int = 0, max_coords: int = 12) -> dict[str, tuple[float, float]]:
    """Finite-difference check of every op group and the full toy model.

    Returns ``{group: (max_relative_error, tolerance)}``.
    """
    from . import functional as F
    from .losses import LossWeights, cls_loss, cross_entropy, final_loss, seg_loss, soft_dice_loss
    from .model import ModelConfig, PromptSet, build_model, forward
    from .tensor import concat

    if scale != "toy":
        raise ValueError(f"unsupported gradcheck scale {scale!r}; only 'toy' is available")
    rng = np.random.default_rng(seed)

    def leaf(*shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    def const(*shape):
        return Tensor(rng.standard_normal(shape))

    def worst(f, ps, **kw):
        return max(finite_diff_check(f, ps, seed=seed, **kw).values())

    results: dict[str, float] = {}
    x = leaf(2, 4, 8, 8)
    for name, (k, s, p, g) in {"conv2d": (3, 1, 1, 1), "conv2d_depthwise": (7, 1, 3, 4), "conv2d_strided": (2, 2, 0, 2)}.items():
        w, b = leaf(4, 4 // g, k, k), leaf(4)
        c = const(*F.conv2d(x, w, b, s, p, g).shape)
        results[name] = worst(lambda: (F.conv2d(x, w, b, s, p, g) * c).sum(), [x, w, b])

    v, w, b = leaf(3, 5), leaf(4, 5), leaf(4)
    c4 = const(3, 4)
    results["linear"] = worst(lambda: (F.linear(v, w, b) * c4).sum(), [v, w, b])
    gam, bet = leaf(5), leaf(5)
    c5 = const(3, 5)
    results["layer_norm"] = worst(lambda: (F.layer_norm(v, gam, bet) * c5).sum(), [v, gam, bet])
    results["gelu"] = worst(lambda: (F.gelu(v) * c5).sum(), [v])
    results["softmax"] = worst(lambda: (F.softmax(v, axis=1) * c5).sum(), [v])
    results["log_softmax"] = worst(lambda: (F.log_softmax(v, axis=1) * c5).sum(), [v])

    cp = const(2, 4, 3, 2)
    results["pool_avg2d"] = worst(lambda: (F.pool_avg2d(x, 3, 2) * cp).sum(), [x])
    cu = const(2, 4, 13, 11)
    results["upsample_bilinear"] = worst(lambda: (F.upsample_bilinear(x, 13, 11) * cu).sum(), [x])
    off = leaf(2, 4)
    cx = const(2, 4, 8, 8)
    results["broadcast_add_channels"] = worst(lambda: (F.broadcast_add_channels(x, off) * cx).sum(), [x, off])
    y = leaf(2, 3, 8, 8)
    cc = const(2, 7, 8, 8)
    results["concat"] = worst(lambda: (concat([x, y], axis=1) * cc).sum(), [x, y])
    cg = const(2, 4)
    results["global_avg_pool"] = worst(lambda: (F.global_avg_pool(x) * cg).sum(), [x])

    logits = leaf(2, 3, 5, 5)
    labels = rng.integers(0, 3, size=(2, 5, 5))
    results["cross_entropy"] = worst(lambda: cross_entropy(logits, labels), [logits])
    results["soft_dice_loss"] = worst(lambda: soft_dice_loss(logits, labels), [logits])
    results["seg_loss"] = worst(lambda: seg_loss(logits, labels), [logits])
    l2, l4 = leaf(4, 2), leaf(4, 4)
    results["cls_loss"] = worst(
        lambda: cls_loss(l2, l4, np.array([1, 0, 3, 2]), np.array([2, 2, 4, 4])), [l2, l4]
    )

    cfg = ModelConfig.toy(layer_scale_init=1.0)
    params = build_model(cfg, seed)
    randomize_params(params, seed)
    image = Tensor(rng.random((2, cfg.in_channels, cfg.input_size, cfg.input_size)))
    yy, xx = np.mgrid[: cfg.input_size, : cfg.input_size]
    mask = np.stack([((yy - 30) ** 2 + (xx - 28) ** 2 < 150), ((yy - 20) ** 2 / 2 + (xx - 40) ** 2 < 100)]).astype(int)
    prompts = [PromptSet(0, 1, 0, 0), PromptSet(1, 5, 1, 1)]
    weights = LossWeights()
    results["model_seg"] = worst(
        lambda: final_loss("seg", seg_l=seg_loss(forward(params, cfg, image, prompts, "seg"), mask, weights), weights=weights),
        params,
        max_coords=max_coords,
    )
    cls_params = {k: p for k, p in params.items() if not k.startswith("decoder.")}
    results["model_cls"] = worst(
        lambda: final_loss("cls", cls_l=cls_loss(*forward(params, cfg, image, prompts, "cls"), np.array([1, 3]), np.array([2, 4])), weights=weights),
        cls_params,
        max_coords=max_coords,
    )
    return {k: (v, SMOOTH_TOL if k in SMOOTH_GROUPS else DEFAULT_TOL) for k, v in results.items()}
