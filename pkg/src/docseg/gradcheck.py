"""Numeric gradient verification for the autodiff engine.

Every analytic backward rule is compared against central finite differences
of the same forward computation. Errors are summarized as a norm-based
relative error, max|g_a - g_n| / (max|g_n| + tiny), which stays meaningful
when individual gradient entries are near zero.

Ops are looked up through the `autodiff` module object at call time so that
a deliberately corrupted backward rule (the negative control) is picked up
by the same code path the real checks use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation
from .geometry import Box

FD_STEP = 1e-3
OP_TOLERANCE = 1e-3
END_TO_END_TOLERANCE = 1e-2
_TINY = 1e-12


@dataclass
class CheckResult:
    name: str
    max_relative_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error <= self.tolerance

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        return (
            f"{self.name:<28s} rel_err={self.max_relative_error:.3e} "
            f"tol={self.tolerance:.0e} {status}"
        )


def finite_difference(f, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar f() w.r.t. x, perturbed in place."""
    grad = np.zeros(x.size, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * step)
    return grad.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise ContractViolation(
            f"gradient shape mismatch: analytic {analytic.shape} vs numeric {numeric.shape}"
        )
    return float(np.max(np.abs(analytic - numeric)) / (np.max(np.abs(numeric)) + _TINY))


def _projected(forward, proj: np.ndarray) -> float:
    out = forward()
    return float(np.sum(out.data.astype(np.float64) * proj))


def _check_inputs(forward, tensors: dict[str, "ad.Tensor"], out_shape) -> float:
    """Backprop a fixed random projection of the output; compare per input."""
    rng = np.random.default_rng(7)
    proj = rng.standard_normal(out_shape)
    proj32 = ad.Tensor(proj)

    with ad.ComputationGraph() as g:
        loss = ad.sum_all(ad.mul(forward(), proj32))
    g.backward(loss)

    worst = 0.0
    for name, t in tensors.items():
        numeric = finite_difference(lambda: _projected(forward, proj), t.data)
        err = relative_error(t.grad, numeric)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# individual op checks (each returns its worst relative error)
# ---------------------------------------------------------------------------

OP_CHECKS: dict = {}


def _op_check(name):
    def deco(fn):
        OP_CHECKS[name] = fn
        return fn
    return deco


def _rand(rng, *shape, lo=-1.0, hi=1.0):
    return ad.Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _rand_safe(rng, *shape, margin=0.2):
    # values bounded away from zero so relu/max kinks sit outside the FD step
    mag = rng.uniform(margin, 1.0, size=shape)
    sign = rng.choice([-1.0, 1.0], size=shape)
    return ad.Tensor(mag * sign, requires_grad=True)


@_op_check("add_broadcast")
def _check_add(rng):
    a = _rand(rng, 3, 4, 5)
    b = _rand(rng, 3, 1, 1)
    return _check_inputs(lambda: ad.add(a, b), {"a": a, "b": b}, (3, 4, 5))


@_op_check("sub_broadcast")
def _check_sub(rng):
    a = _rand(rng, 2, 4, 4)
    b = _rand(rng, 2, 1, 1)
    return _check_inputs(lambda: ad.sub(a, b), {"a": a, "b": b}, (2, 4, 4))


@_op_check("mul_broadcast")
def _check_mul(rng):
    a = _rand(rng, 3, 4, 5)
    b = _rand(rng, 1, 4, 5)
    return _check_inputs(lambda: ad.mul(a, b), {"a": a, "b": b}, (3, 4, 5))


@_op_check("scale")
def _check_scale(rng):
    a = _rand(rng, 2, 3, 3)
    return _check_inputs(lambda: ad.scale(a, -1.7), {"a": a}, (2, 3, 3))


@_op_check("relu")
def _check_relu(rng):
    a = _rand_safe(rng, 3, 5, 4)
    return _check_inputs(lambda: ad.relu(a), {"a": a}, (3, 5, 4))


@_op_check("conv2d")
def _check_conv2d(rng):
    x = _rand(rng, 2, 5, 4)
    w = _rand(rng, 3, 2, 3, 3)
    b = _rand(rng, 3)
    return _check_inputs(
        lambda: ad.conv2d(x, w, b, dilation=1), {"x": x, "w": w, "b": b}, (3, 5, 4)
    )


@_op_check("conv2d_dilated")
def _check_conv2d_dilated(rng):
    x = _rand(rng, 2, 8, 7)
    w = _rand(rng, 2, 2, 3, 3)
    b = _rand(rng, 2)
    return _check_inputs(
        lambda: ad.conv2d(x, w, b, dilation=3), {"x": x, "w": w, "b": b}, (2, 8, 7)
    )


@_op_check("pointwise_conv")
def _check_pointwise(rng):
    x = _rand(rng, 4, 3, 5)
    w = _rand(rng, 2, 4)
    b = _rand(rng, 2)
    return _check_inputs(
        lambda: ad.pointwise_conv(x, w, b), {"x": x, "w": w, "b": b}, (2, 3, 5)
    )


@_op_check("max_pool2d")
def _check_max_pool(rng):
    x = _rand_safe(rng, 2, 6, 4)
    # spread values so no window ties within the FD step
    x.data += np.arange(x.size, dtype=np.float32).reshape(x.shape) * 0.01
    return _check_inputs(lambda: ad.max_pool2d(x)[0], {"x": x}, (2, 3, 2))


@_op_check("unpool2d")
def _check_unpool(rng):
    src = ad.Tensor(rng.uniform(-1, 1, size=(2, 6, 4)))
    _, idx = ad.max_pool2d(src)
    x = _rand(rng, 2, 3, 2)
    return _check_inputs(lambda: ad.unpool2d(x, idx), {"x": x}, (2, 6, 4))


@_op_check("bilinear_upsample2x")
def _check_bilinear(rng):
    x = _rand(rng, 2, 3, 5)
    return _check_inputs(lambda: ad.bilinear_upsample2x(x), {"x": x}, (2, 6, 10))


@_op_check("avg_downsample")
def _check_avg_down(rng):
    x = _rand(rng, 2, 6, 4)
    return _check_inputs(lambda: ad.avg_downsample(x, 2), {"x": x}, (2, 3, 2))


@_op_check("batch_norm_train")
def _check_bn_train(rng):
    x = _rand(rng, 3, 4, 5)
    gamma = _rand(rng, 3, lo=0.5, hi=1.5)
    beta = _rand(rng, 3)
    stats = ad.BatchNormStats(3)
    return _check_inputs(
        lambda: ad.batch_norm(x, gamma, beta, stats, mode="train"),
        {"x": x, "gamma": gamma, "beta": beta},
        (3, 4, 5),
    )


@_op_check("batch_norm_eval")
def _check_bn_eval(rng):
    x = _rand(rng, 3, 4, 5)
    gamma = _rand(rng, 3, lo=0.5, hi=1.5)
    beta = _rand(rng, 3)
    stats = ad.BatchNormStats(3)
    stats.mean = rng.uniform(-0.3, 0.3, size=3).astype(np.float32)
    stats.var = rng.uniform(0.5, 1.5, size=3).astype(np.float32)
    return _check_inputs(
        lambda: ad.batch_norm(x, gamma, beta, stats, mode="eval"),
        {"x": x, "gamma": gamma, "beta": beta},
        (3, 4, 5),
    )


@_op_check("concat_channels")
def _check_concat(rng):
    a = _rand(rng, 2, 3, 4)
    b = _rand(rng, 3, 3, 4)
    return _check_inputs(lambda: ad.concat_channels(a, b), {"a": a, "b": b}, (5, 3, 4))


@_op_check("spatial_mean")
def _check_spatial_mean(rng):
    x = _rand(rng, 3, 4, 5)
    return _check_inputs(lambda: ad.spatial_mean(x), {"x": x}, (3, 1, 1))


@_op_check("crop")
def _check_crop(rng):
    x = _rand(rng, 2, 6, 8)
    box = Box(2, 1, 7, 5)
    return _check_inputs(lambda: ad.crop(x, box), {"x": x}, (2, 4, 5))


@_op_check("sum_all")
def _check_sum_all(rng):
    x = _rand(rng, 3, 4, 2)
    return _check_inputs(lambda: ad.sum_all(x), {"x": x}, ())


@_op_check("mean_all")
def _check_mean_all(rng):
    x = _rand(rng, 3, 4, 2)
    return _check_inputs(lambda: ad.mean_all(x), {"x": x}, ())


@_op_check("softmax_cross_entropy")
def _check_sce(rng):
    # few valid pixels keep per-logit gradients large relative to the
    # float32 quantization noise of the scalar loss under differencing
    logits = _rand(rng, 3, 3, 3)
    labels = rng.integers(0, 3, size=(3, 3))
    weights = rng.uniform(0.5, 2.0, size=3)
    valid = rng.random((3, 3)) > 0.2
    valid[0, 0] = True
    return _check_inputs(
        lambda: ad.softmax_cross_entropy(logits, labels, weights, valid),
        {"logits": logits},
        (),
    )


def run_op_checks(
    names: list[str] | None = None,
    seed: int = 0,
    tolerance: float = OP_TOLERANCE,
) -> list[CheckResult]:
    """Run per-op finite-difference checks; unknown names raise."""
    selected = list(OP_CHECKS) if names is None else names
    results = []
    for name in selected:
        if name not in OP_CHECKS:
            raise ContractViolation(f"no gradient check registered for {name!r}")
        rng = np.random.default_rng(seed)
        err = OP_CHECKS[name](rng)
        results.append(CheckResult(name, err, tolerance))
    return results


# ---------------------------------------------------------------------------
# end-to-end check through the full network and losses
# ---------------------------------------------------------------------------

def run_end_to_end_check(seed: int = 0, tolerance: float = END_TO_END_TOLERANCE) -> CheckResult:
    """Check d(total loss)/d(parameter) for a tiny model via finite differences.

    Uses 2 encoder stages, 4-channel trunk, 16x16 input, 3 classes, and a
    4-channel embedding map. Batch norm runs in eval mode so that finite
    perturbations do not couple through the normalization statistics, and
    the whole evaluation runs in float64 with a small step: in float32 the
    loss scalar's own rounding would drown the differences, and a larger
    step would straddle rectifier kinks instead.
    """
    from . import losses as losses_mod
    from . import model as model_mod

    with ad.precision(np.float64):
        config = model_mod.ArchitectureConfig(
            num_classes=3,
            stage_channels=(4, 4),
            dilation=1,
            upsampling="unpooling",
            skip_connections=True,
            embedding_dim=4,
        )
        state = model_mod.init_model(config, seed=seed)
        for st in state.stats.values():
            rng_s = np.random.default_rng(seed + 1)
            st.mean = rng_s.uniform(-0.1, 0.1, size=st.channels)
            st.var = rng_s.uniform(0.8, 1.2, size=st.channels)

        rng = np.random.default_rng(seed)
        image = ad.Tensor(rng.uniform(-1, 1, size=(3, 16, 16)))
        emap = rng.uniform(-0.5, 0.5, size=(4, 16, 16))
        labels = rng.integers(0, 3, size=(16, 16))
        valid = np.ones((16, 16), dtype=bool)
        class_weights = losses_mod.ClassWeights.uniform(3)
        boxes = [Box(1, 1, 7, 6), Box(8, 9, 15, 15)]

        def total_loss_value() -> float:
            arts = model_mod.forward(image, emap, config, state,
                                     mode="train", bn_mode="eval")
            report = losses_mod.total_loss(
                arts, labels, valid, class_weights, boxes, losses_mod.LossWeights()
            )
            return float(report.total.data)

        with ad.ComputationGraph() as g:
            arts = model_mod.forward(image, emap, config, state,
                                     mode="train", bn_mode="eval")
            report = losses_mod.total_loss(
                arts, labels, valid, class_weights, boxes, losses_mod.LossWeights()
            )
        g.backward(report.total)

        worst = 0.0
        for name, param in state.params.items():
            analytic = param.grad if param.grad is not None else np.zeros_like(param.data)
            numeric = finite_difference(total_loss_value, param.data, step=1e-5)
            err = relative_error(analytic, numeric)
            worst = max(worst, err)
            param.zero_grad()
    return CheckResult("end_to_end", worst, tolerance)


def negative_control(seed: int = 0) -> bool:
    """Corrupt one backward rule and confirm the harness flags it.

    Returns True when the corrupted relu check fails as it should; the
    original op is always restored.
    """
    original = ad.relu

    def corrupted(x):
        out = ad.Tensor(np.maximum(x.data, 0))

        def build():
            mask = x.data > 0

            def backward(g):
                return (g * mask * 1.05,)  # 5% too large, must be caught
            return backward

        return ad._maybe_record(out, (x,), build)

    ad.relu = corrupted
    try:
        result = run_op_checks(names=["relu"], seed=seed)[0]
    finally:
        ad.relu = original
    return not result.passed
