"""Central finite-difference gradient checks for every autodiff primitive.

The numeric side never touches the tape: it re-runs the forward pass with
perturbed inputs and differences the scalar loss. Each check projects the
primitive's output against a fixed random matrix so that every output
element influences the loss.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Tuple

import numpy as np

from tpmtl import autodiff as ad

FD_STEP = 1e-4
REL_TOL = 1e-4
END_TO_END_TOL = 1e-3


def numeric_gradient(f: Callable[[], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Elementwise central differences of the scalar f() w.r.t. x (mutated in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |g_a - g_fd| / (|g_fd| + 1e-8), elementwise."""
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)))


def numeric_gradient_with_jump(f: Callable[[], float], x: np.ndarray,
                               h: float = FD_STEP):
    """Central differences plus a per-coordinate slope-jump estimate.

    Perturbing a coordinate can push a leaky-ReLU pre-activation across
    zero, where central differences average two slopes and stop being a
    valid oracle; the analytic gradient picks one side. The one-sided
    slopes over [x+h, x+2h] and [x-2h, x-h] straddle no kink near x, so
    their disagreement bounds how far central differences can drift from
    either true one-sided derivative. Returns (central, jump).
    """
    g = np.zeros_like(x)
    jump = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    jf = jump.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig + 2 * h
        fpp = f()
        flat[i] = orig - 2 * h
        fmm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
        jf[i] = abs((fpp - fp) / h - (fm - fmm) / h)
    return g, jump


def compare_with_jump_allowance(analytic: np.ndarray, central: np.ndarray,
                                jump: np.ndarray, tol: float) -> float:
    """Worst relative error over smooth coordinates; kinked ones get a jump bound.

    A coordinate whose slope jump could not move the relative error past
    tol/2 is held to the plain tolerance; the rest must still match within
    their measured jump (a gradient bug would overshoot that bound too).
    """
    denom = np.abs(central) + 1e-8
    mismatch = np.abs(analytic - central)
    smooth = jump <= 0.5 * tol * denom
    kinked_ok = mismatch <= jump + 0.5 * tol * denom
    if not np.all(smooth | kinked_ok):
        return float(np.max(mismatch / denom))
    if not smooth.any():
        return 0.0
    return float(np.max(mismatch[smooth] / denom[smooth]))


def check_op(build: Callable[..., ad.Tensor], inputs: List[np.ndarray],
             wrt: List[int], rng: np.random.Generator) -> float:
    """Max relative FD error of `build(*tensors)` gradients w.r.t. chosen inputs."""
    tensors = [ad.Tensor(a, requires_grad=(i in wrt)) for i, a in enumerate(inputs)]
    probe_holder = {}

    def loss_value() -> float:
        out = build(*tensors)
        if "probe" not in probe_holder:
            probe_holder["probe"] = rng.standard_normal(out.shape)
        return float((out.data * probe_holder["probe"]).sum())

    base = loss_value()
    assert np.isfinite(base)
    probe = ad.Tensor(probe_holder["probe"])

    for t in tensors:
        t.grad = None
    with ad.Tape():
        out = build(*tensors)
        loss = ad.tensor_sum(ad.mul(out, probe))
    ad.backward(loss)

    worst = 0.0
    for i in wrt:
        num = numeric_gradient(lambda: loss_value(), inputs[i])
        ana = tensors[i].grad
        assert ana is not None, f"no gradient reached input {i}"
        worst = max(worst, relative_error(ana, num))
    return worst


def _away_from(x: np.ndarray, kinks: float = 0.0, margin: float = 1e-2) -> np.ndarray:
    """Nudge values off a non-differentiable point so FD stays one-sided."""
    close = np.abs(x - kinks) < margin
    return x + np.where(close, np.sign(x - kinks + 1e-12) * margin, 0.0)


def _interior_uv(rng: np.random.Generator, n: int, r: int) -> np.ndarray:
    """uv samples strictly inside grid cells (bilinear is kinked on node lines)."""
    cells = rng.integers(0, r - 1, size=(n, 2))
    frac = rng.uniform(0.2, 0.8, size=(n, 2))
    return (cells + frac) / (r - 1) * 2.0 - 1.0


def _primitive_checks(rng: np.random.Generator) -> Dict[str, float]:
    checks: Dict[str, float] = {}

    def rnd(*shape):
        return rng.standard_normal(shape)

    checks["add"] = check_op(ad.add, [rnd(3, 4), rnd(3, 4)], [0, 1], rng)
    checks["add_scalar"] = check_op(ad.add, [rnd(3, 4), rnd(1)], [0, 1], rng)
    checks["sub"] = check_op(ad.sub, [rnd(3, 4), rnd(3, 4)], [0, 1], rng)
    checks["mul"] = check_op(ad.mul, [rnd(3, 4), rnd(3, 4)], [0, 1], rng)
    checks["mul_scalar"] = check_op(ad.mul, [rnd(1), rnd(2, 5)], [0, 1], rng)
    checks["scale"] = check_op(lambda x: ad.scale(x, -1.7), [rnd(3, 4)], [0], rng)
    checks["neg"] = check_op(ad.neg, [rnd(3, 4)], [0], rng)
    checks["matmul"] = check_op(ad.matmul, [rnd(3, 4), rnd(4, 2)], [0, 1], rng)
    checks["linear"] = check_op(ad.linear, [rnd(5, 3), rnd(3, 4), rnd(4)], [0, 1, 2], rng)
    checks["conv2d_3x3"] = check_op(
        ad.conv2d_3x3, [rnd(2, 5, 5), rnd(3, 2, 3, 3), rnd(3)], [0, 1, 2], rng)
    checks["avg_pool2x2"] = check_op(ad.avg_pool2x2, [rnd(2, 4, 6)], [0], rng)
    checks["upsample_nearest2x"] = check_op(ad.upsample_nearest2x, [rnd(2, 3, 4)], [0], rng)
    checks["relu"] = check_op(ad.relu, [_away_from(rnd(4, 5))], [0], rng)
    checks["leaky_relu"] = check_op(
        lambda x: ad.leaky_relu(x, 0.2), [_away_from(rnd(4, 5))], [0], rng)
    checks["softplus"] = check_op(ad.softplus, [rnd(4, 5) * 3], [0], rng)
    checks["sigmoid"] = check_op(ad.sigmoid, [rnd(4, 5)], [0], rng)
    checks["exp"] = check_op(ad.exp, [rnd(4, 5)], [0], rng)
    checks["absolute"] = check_op(ad.absolute, [_away_from(rnd(4, 5))], [0], rng)
    checks["sum"] = check_op(ad.tensor_sum, [rnd(3, 4)], [0], rng)
    checks["mean"] = check_op(ad.tensor_mean, [rnd(3, 4)], [0], rng)
    checks["sum_lastdim"] = check_op(ad.sum_lastdim, [rnd(3, 5)], [0], rng)
    checks["cumsum_exclusive_lastdim"] = check_op(
        ad.cumsum_exclusive_lastdim, [rnd(3, 6)], [0], rng)
    checks["reshape"] = check_op(lambda x: ad.reshape(x, (6, 2)), [rnd(3, 4)], [0], rng)
    checks["permute"] = check_op(lambda x: ad.permute(x, (2, 0, 1)), [rnd(2, 3, 4)], [0], rng)
    checks["narrow"] = check_op(lambda x: ad.narrow(x, 1, 1, 2), [rnd(3, 5)], [0], rng)
    checks["concat_lastdim"] = check_op(
        lambda a, b: ad.concat_lastdim([a, b]), [rnd(3, 2), rnd(3, 4)], [0, 1], rng)
    checks["softmax_lastdim"] = check_op(ad.softmax_lastdim, [rnd(4, 5)], [0], rng)
    checks["log_softmax_lastdim"] = check_op(ad.log_softmax_lastdim, [rnd(4, 5)], [0], rng)
    checks["l2_normalize_lastdim"] = check_op(
        ad.l2_normalize_lastdim, [rnd(4, 3) + 0.5], [0], rng)

    stats = ad.BatchNormStats(3)
    checks["batchnorm2d_train"] = check_op(
        lambda x, g, b: ad.batchnorm2d(x, g, b, ad.BatchNormStats(3), "train"),
        [rnd(2, 3, 4, 4), rnd(3) * 0.3 + 1.0, rnd(3)], [0, 1, 2], rng)
    stats.mean = rnd(3) * 0.1
    stats.var = np.abs(rnd(3)) + 0.5
    checks["batchnorm2d_eval"] = check_op(
        lambda x, g, b: ad.batchnorm2d(x, g, b, stats, "eval"),
        [rnd(2, 3, 4, 4), rnd(3) * 0.3 + 1.0, rnd(3)], [0, 1, 2], rng)

    seed = int(rng.integers(0, 2**31))
    checks["dropout"] = check_op(
        lambda x: ad.dropout(x, 0.15, np.random.default_rng(seed), "train"),
        [rnd(6, 6)], [0], rng)

    r = 6
    checks["bilinear_sample_2d"] = check_op(
        ad.bilinear_sample_2d, [rnd(r, r, 3), _interior_uv(rng, 10, r)], [0, 1], rng)
    checks["bilinear_sample_sum"] = check_op(
        lambda p0, u0, p1, u1: ad.bilinear_sample_sum([(p0, u0), (p1, u1)]),
        [rnd(r, r, 3), _interior_uv(rng, 8, r), rnd(r, r, 3), _interior_uv(rng, 8, r)],
        [0, 1, 2, 3], rng)
    checks["linear_leaky_relu"] = check_op(
        lambda x, w, b: ad.linear_leaky_relu(x, w, b, 0.2),
        [rnd(7, 3), rnd(3, 4), rnd(4)], [0, 1, 2], rng)
    checks["ray_accumulate"] = check_op(
        ad.ray_accumulate, [rnd(3, 4), rnd(3, 4, 2)], [0, 1], rng)
    return checks


def run_primitive_suite(seeds: int = 20, base_seed: int = 0) -> Dict[str, float]:
    """Worst FD relative error per primitive over `seeds` random draws."""
    worst: Dict[str, float] = {}
    for s in range(seeds):
        rng = np.random.default_rng(base_seed + s)
        for name, err in _primitive_checks(rng).items():
            worst[name] = max(worst.get(name, 0.0), err)
    return worst


def end_to_end_check(rng: np.random.Generator) -> float:
    """FD check of a rendered multi-task loss w.r.t. tri-plane entries.

    Uses midpoint sampling so the forward pass is deterministic. Returns
    the max relative error over all plane entries.
    """
    from tpmtl.renderer import Camera, RenderConfig, render_tasks
    from tpmtl.taskfields import TaskFieldNet, TaskSpec, default_tasks
    from tpmtl.triplane import TriPlane

    r, cp = 4, 4
    tasks = [TaskSpec("segmentation", 3, "softmax", "cross-entropy"),
             TaskSpec("depth", 1, "identity", "l1")]
    net = TaskFieldNet(cp, tasks, np.random.default_rng(int(rng.integers(2**31))))
    planes = [rng.standard_normal((r, r, cp)) * 0.5 for _ in range(3)]
    cfg = RenderConfig(height=3, width=3, samples=4, sampling="midpoint")
    cam = Camera.identity()
    probes = {t.name: rng.standard_normal((cfg.height, cfg.width, t.value_dim))
              for t in tasks}

    def run(record: bool):
        tp = TriPlane(ad.Tensor(planes[0], requires_grad=record),
                      ad.Tensor(planes[1], requires_grad=record),
                      ad.Tensor(planes[2], requires_grad=record))
        out = render_tasks(tp, net, cam, cfg)
        total = None
        for t in tasks:
            term = ad.tensor_sum(ad.mul(out.tasks[t.name], ad.Tensor(probes[t.name])))
            total = term if total is None else ad.add(total, term)
        return tp, total

    worst = 0.0
    for k in range(3):
        with ad.Tape():
            tp, loss = run(record=True)
        ad.backward(loss)
        ana = [tp.plane_xy, tp.plane_yz, tp.plane_xz][k].grad

        def fd_loss():
            _, l = run(record=False)
            return float(l.data)

        num, jump = numeric_gradient_with_jump(fd_loss, planes[k])
        worst = max(worst, compare_with_jump_allowance(ana, num, jump, END_TO_END_TOL))
    return worst


def run_end_to_end(seeds: int = 20, base_seed: int = 100) -> float:
    worst = 0.0
    for s in range(seeds):
        worst = max(worst, end_to_end_check(np.random.default_rng(base_seed + s)))
    return worst


def run_full_suite(seeds: int = 20) -> Tuple[Dict[str, float], float, bool]:
    """Primitive errors, end-to-end error, and the overall pass flag."""
    prim = run_primitive_suite(seeds=seeds)
    e2e = run_end_to_end(seeds=seeds)
    ok = all(v < REL_TOL for v in prim.values()) and e2e < END_TO_END_TOL
    return prim, e2e, ok
