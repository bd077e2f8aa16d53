"""Brute-force reference implementations and the randomized equivalence suites.

Everything here is written with explicit Python loops over voxels and
classes, and imports nothing from the vectorised modules it checks, except
inside the ``suite_*`` drivers that compare the two.
"""

from __future__ import annotations

import itertools
import math
from collections import deque
from typing import Callable

import numpy as np

CLAMP = 1e-12
SMOOTH = 1e-5
GATE_EPS = 1e-8


# ---------------------------------------------------------------------------
# Loss oracles.  probs: (B, K, W, H, D) ndarray; label, masks: (B, W, H, D).
# ---------------------------------------------------------------------------


def _voxels(shape):
    return itertools.product(*(range(n) for n in shape))


def _regions(mask, direction):
    m = np.broadcast_to(mask, mask.shape)
    one = lambda v: float(m[v])  # noqa: E731
    if direction == "in":
        return one, lambda v: 1.0 - one(v)
    return lambda v: 1.0 - one(v), one


def region_loss_oracle(probs, label, region_fn) -> float | None:
    b, k = probs.shape[:2]
    spatial = (b,) + probs.shape[2:]
    ce_sum = 0.0
    count = 0.0
    inter = [0.0] * k
    psq = [0.0] * k
    gsum = [0.0] * k
    for v in _voxels(spatial):
        r = region_fn(v)
        bi, rest = v[0], v[1:]
        t = int(label[v])
        count += r
        ce_sum += r * -math.log(max(probs[(bi, t) + rest], CLAMP))
        for c in range(k):
            p = probs[(bi, c) + rest]
            g = 1.0 if c == t else 0.0
            inter[c] += p * g * r
            psq[c] += p * p * r
            gsum[c] += g * r
    if count == 0:
        return None
    dice = sum(1.0 - (2 * inter[c] + SMOOTH) / (psq[c] + gsum[c] + SMOOTH) for c in range(k)) / k
    return 0.5 * ce_sum / count + 0.5 * dice


def bcp_seg_loss_oracle(probs, label, mask, alpha, direction) -> float:
    mask = np.broadcast_to(mask, label.shape)
    main, side = _regions(mask, direction)
    first = region_loss_oracle(probs, label, main)
    second = region_loss_oracle(probs, label, side)
    total = 0.0 if first is None else first
    if second is not None:
        total += alpha * second
    return total


def mse_loss_oracle(probs, label, mask, m_diff, alpha, direction) -> float:
    mask = np.broadcast_to(mask, label.shape)
    gate = np.broadcast_to(m_diff, label.shape)
    main, side = _regions(mask, direction)
    k = probs.shape[1]
    num = 0.0
    den = 0.0
    for v in _voxels(label.shape):
        bi, rest = v[0], v[1:]
        se = 0.0
        for c in range(k):
            target = 1.0 if int(label[v]) == c else 0.0
            se += (probs[(bi, c) + rest] - target) ** 2
        w = main(v) + alpha * side(v)
        num += w * se * float(gate[v])
        den += float(gate[v])
    return num / (den + GATE_EPS)


def kl_uniform_oracle(p_voxel) -> float:
    k = len(p_voxel)
    return sum((1.0 / k) * math.log((1.0 / k) / max(p, CLAMP)) for p in p_voxel)


def kl_loss_oracle(probs, mask, m_differr, alpha, direction) -> float:
    spatial = probs.shape[:1] + probs.shape[2:]
    mask = np.broadcast_to(mask, spatial)
    gate = np.broadcast_to(m_differr, spatial)
    main, side = _regions(mask, direction)
    k = probs.shape[1]
    num = 0.0
    den = 0.0
    for v in _voxels(spatial):
        bi, rest = v[0], v[1:]
        kl = kl_uniform_oracle([probs[(bi, c) + rest] for c in range(k)])
        num += (main(v) + alpha * side(v)) * kl * float(gate[v])
        den += float(gate[v])
    return num / (den + GATE_EPS)


def entropy_oracle(p_voxel) -> float:
    return -sum(p * math.log(max(p, CLAMP)) for p in p_voxel)


# ---------------------------------------------------------------------------
# Mask / mixing oracles
# ---------------------------------------------------------------------------


def neq_mask_oracle(a, b):
    out = np.zeros(a.shape, dtype=np.uint8)
    for v in _voxels(a.shape):
        out[v] = 1 if a[v] != b[v] else 0
    return out


def and_mask_oracle(a, b):
    out = np.zeros(a.shape, dtype=np.uint8)
    for v in _voxels(a.shape):
        out[v] = 1 if (a[v] == 1 and b[v] == 1) else 0
    return out


def mix_oracle(src_one, src_zero, mask):
    """Voxel loop: take ``src_one`` where mask==1 else ``src_zero``.

    Sources are (..., W, H, D); the mask is (W, H, D).
    """
    out = np.empty_like(src_one)
    lead = src_one.shape[:-3]
    for prefix in _voxels(lead):
        for v in _voxels(mask.shape):
            idx = tuple(prefix) + tuple(v)
            out[idx] = src_one[idx] if mask[v] == 1 else src_zero[idx]
    return out


def flood_fill_components(region):
    """Components of a boolean volume under 26-connectivity, in raster order of first voxel."""
    shape = region.shape
    seen = np.zeros(shape, dtype=bool)
    offsets = [d for d in itertools.product((-1, 0, 1), repeat=len(shape)) if any(d)]
    comps = []
    for start in _voxels(shape):
        if not region[start] or seen[start]:
            continue
        comp = []
        queue = deque([start])
        seen[start] = True
        while queue:
            cur = queue.popleft()
            comp.append(cur)
            for d in offsets:
                nb = tuple(c + o for c, o in zip(cur, d))
                if all(0 <= x < n for x, n in zip(nb, shape)) and region[nb] and not seen[nb]:
                    seen[nb] = True
                    queue.append(nb)
        comps.append(comp)
    return comps


def lcc_oracle(raw, num_classes):
    out = raw.copy()
    for c in range(1, num_classes):
        comps = flood_fill_components(raw == c)
        if len(comps) <= 1:
            continue
        best = 0
        for i, comp in enumerate(comps):
            if len(comp) > len(comps[best]):
                best = i
        for i, comp in enumerate(comps):
            if i != best:
                for v in comp:
                    out[v] = 0
    return out


# ---------------------------------------------------------------------------
# Metric oracles
# ---------------------------------------------------------------------------


def surface_oracle(region):
    shape = region.shape
    pts = []
    for v in _voxels(shape):
        if not region[v]:
            continue
        for axis in range(len(shape)):
            for step in (-1, 1):
                nb = list(v)
                nb[axis] += step
                if not 0 <= nb[axis] < shape[axis] or not region[tuple(nb)]:
                    pts.append(v)
                    break
            else:
                continue
            break
    return pts


def _nearest_rank(values, q):
    # Smallest observed value v with at least q% of the values <= v.
    n = len(values)
    for v in sorted(values):
        if 100 * sum(1 for x in values if x <= v) >= q * n:
            return v
    return max(values)


def surface_distance_oracle(pred, truth, c=1):
    sp = surface_oracle(pred == c)
    st = surface_oracle(truth == c)
    if not sp or not st:
        return math.nan, math.nan

    def directed(src, dst):
        return [min(math.dist(a, b) for b in dst) for a in src]

    d1 = directed(sp, st)
    d2 = directed(st, sp)
    hd95 = max(_nearest_rank(d1, 95), _nearest_rank(d2, 95))
    asd = sum(d1 + d2) / (len(d1) + len(d2))
    return hd95, asd


def overlap_oracle(pred, truth, c=1):
    tp = fp = fn = 0
    for v in _voxels(pred.shape):
        p = pred[v] == c
        t = truth[v] == c
        tp += p and t
        fp += p and not t
        fn += t and not p
    if tp + fp + fn == 0:
        return 1.0, 1.0
    return 2 * tp / (2 * tp + fp + fn), tp / (tp + fp + fn)


# ---------------------------------------------------------------------------
# Randomized suites shared by the tests and the ``oracle-check`` command.
# Each returns (passed, failed, worst discrepancy).
# ---------------------------------------------------------------------------


def _random_probs(rng, shape_bk):
    logits = rng.normal(0, 2, size=shape_bk)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _tally(results):
    passed = sum(1 for ok, _ in results if ok)
    worst = max((d for _, d in results), default=0.0)
    return passed, len(results) - passed, worst


def suite_losses(n_cases: int = 200, seed: int = 0, tol: float = 1e-9):
    from . import losses, maskops
    from .tensor import Tensor

    rng = np.random.default_rng(seed)
    results = []
    for i in range(n_cases):
        k = (2, 4)[i % 2]
        probs = _random_probs(rng, (1, k, 4, 4, 4))
        label = rng.integers(0, k, size=(1, 4, 4, 4))
        mask = maskops.gen_copy_paste_mask((4, 4, 4), rng.choice([0.25, 0.5, 0.75]), rng)
        gate = rng.integers(0, 2, size=(1, 4, 4, 4)).astype(np.uint8)
        alpha = float(rng.uniform(0, 1))
        direction = ("in", "out")[int(rng.integers(0, 2))]
        t = Tensor(probs)
        got = [
            losses.bcp_seg_loss(t, label, mask, alpha, direction).item(),
            losses.masked_mse_loss(t, label, mask, gate, alpha, direction).item(),
            losses.masked_kl_uniform_loss(t, mask, gate, alpha, direction, k).item(),
        ]
        want = [
            bcp_seg_loss_oracle(probs, label, mask, alpha, direction),
            mse_loss_oracle(probs, label, mask, gate, alpha, direction),
            kl_loss_oracle(probs, mask, gate, alpha, direction),
        ]
        diff = max(abs(g - w) for g, w in zip(got, want))
        results.append((diff <= tol, diff))
    return _tally(results)


def suite_masks(n_cases: int = 100, seed: int = 0):
    from . import maskops

    rng = np.random.default_rng(seed)
    results = []
    for _ in range(n_cases):
        shape = tuple(int(n) for n in rng.integers(2, 7, size=3))
        k = int(rng.integers(2, 5))
        a = rng.integers(0, k, size=shape)
        b = rng.integers(0, k, size=shape)
        d = maskops.diff_mask(a, b)
        e = maskops.err_mask(a, b)
        e_other = maskops.err_mask(b, rng.integers(0, k, size=shape))
        de = maskops.differr_mask(d, e_other)
        ok = (
            np.array_equal(d, neq_mask_oracle(a, b))
            and np.array_equal(d, maskops.diff_mask(b, a))
            and np.array_equal(e, neq_mask_oracle(a, b))
            and np.array_equal(de, and_mask_oracle(d, e_other))
            and np.all(de <= (d & e_other))
        )
        raw = (rng.random(shape) < 0.35).astype(np.int64) * rng.integers(1, k, size=shape)
        lcc = maskops.largest_connected_component(raw, k)
        ok = ok and np.array_equal(lcc, lcc_oracle(raw, k))
        ok = ok and np.array_equal(maskops.largest_connected_component(lcc, k), lcc)
        results.append((bool(ok), 0.0 if ok else 1.0))
    n_zero = 0
    while n_zero < 50:
        shape = tuple(int(n) for n in rng.integers(2, 17, size=3))
        beta = float(rng.uniform(0.05, 0.95))
        ext = maskops.block_extents(shape, beta)
        if any(e < 1 or e > n for e, n in zip(ext, shape)):
            continue  # degenerate block; gen_copy_paste_mask rejects it
        n_zero += 1
        m = maskops.gen_copy_paste_mask(shape, beta, rng)
        ok = int((m == 0).sum()) == int(np.prod(ext))
        results.append((ok, 0.0 if ok else 1.0))
    return _tally(results)


def suite_mixing(n_cases: int = 100, seed: int = 0):
    from . import maskops, mixing

    rng = np.random.default_rng(seed)
    results = []
    for _ in range(n_cases):
        shape = (4, 4, 4)
        xs = [rng.normal(size=(1, 1) + shape) for _ in range(4)]
        ys = [rng.integers(0, 3, size=(1,) + shape) for _ in range(4)]
        mask = maskops.gen_copy_paste_mask(shape, float(rng.uniform(0.2, 0.8)), rng)
        x_in, x_out = mixing.mix_images(xs[0], xs[1], xs[2], xs[3], mask)
        y_in, y_out = mixing.mix_labels(ys[0], ys[1], ys[2], ys[3], mask)
        c_in, _ = mixing.mix_images(xs[0], xs[1], xs[2], xs[3], 1 - mask)
        ok = (
            np.array_equal(x_in, mix_oracle(xs[0], xs[1], mask))
            and np.array_equal(x_out, mix_oracle(xs[2], xs[3], mask))
            and np.array_equal(y_in, mix_oracle(ys[0], ys[1], mask))
            and np.array_equal(y_out, mix_oracle(ys[2], ys[3], mask))
            and np.array_equal(x_in + c_in, xs[0] + xs[1])
        )
        results.append((bool(ok), 0.0 if ok else 1.0))
    return _tally(results)


def suite_metrics(n_cases: int = 50, seed: int = 0, tol: float = 1e-9):
    from . import metrics

    rng = np.random.default_rng(seed)
    results = []
    for _ in range(n_cases):
        pred = (rng.random((8, 8, 8)) < rng.uniform(0.05, 0.5)).astype(np.int64)
        truth = (rng.random((8, 8, 8)) < rng.uniform(0.05, 0.5)).astype(np.int64)
        dice, jac = metrics.overlap_metrics(pred, truth, 1)
        hd, asd = metrics.surface_distances(pred, truth, 1)
        o_dice, o_jac = overlap_oracle(pred, truth, 1)
        o_hd, o_asd = surface_distance_oracle(pred, truth, 1)
        diff = max(abs(dice - o_dice), abs(jac - o_jac), abs(hd - o_hd), abs(asd - o_asd), abs(dice - 2 * jac / (1 + jac)))
        results.append((diff <= tol and jac <= dice, diff))
    return _tally(results)


def central_difference(f, arrays, h=1e-4):
    """Central finite differences of scalar ``f()`` w.r.t. each array (perturbed in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f()
            flat[i] = orig - h
            down = f()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def grad_close(auto, numeric, rtol=1e-3, atol=1e-6) -> tuple[bool, float]:
    """Elementwise |a - n| <= max(rtol * max(|a|, |n|), atol); returns (ok, worst relative excess)."""
    err = np.abs(auto - numeric)
    allowed = np.maximum(rtol * np.maximum(np.abs(auto), np.abs(numeric)), atol)
    return bool(np.all(err <= allowed)), float(np.max(err / allowed)) if err.size else 0.0


def _op_case(op, rng):
    """(list of input arrays, attrs) for a random instance of ``op``."""
    s = (2, 3, 2, 3, 2)
    away = lambda shape: rng.uniform(0.2, 1.5, size=shape) * rng.choice([-1, 1], size=shape)  # noqa: E731
    if op == "conv":
        kz = int(rng.choice([1, 3]))
        return [rng.normal(size=(1, 2, 4, 3, 3)), rng.normal(size=(3, 2, 3, 3, kz))], {}
    if op == "bias":
        return [rng.normal(size=s), rng.normal(size=(3,))], {}
    if op == "relu":
        return [away(s)], {}
    if op == "add":
        return [rng.normal(size=s), rng.normal(size=s)], {}
    if op == "mul_mask":
        return [rng.normal(size=s)], {"mask": rng.integers(0, 2, size=s[:1] + s[2:])[:, None].astype(float)}
    if op == "div":
        return [rng.normal(size=s), away(s)], {}
    if op == "softmax":
        return [rng.normal(size=s)], {"axis": 1}
    if op in ("sum", "mean"):
        axis = [None, 1, (0, 2, 3, 4), (1,)][int(rng.integers(0, 4))]
        return [rng.normal(size=s)], {"axis": axis, "keepdims": bool(rng.integers(0, 2))}
    if op == "log":
        return [rng.uniform(0.1, 2.0, size=s)], {"clamp": 1e-12}
    if op in ("square", "negate"):
        return [rng.normal(size=s)], {}
    if op == "scale":
        return [rng.normal(size=s)], {"factor": float(rng.normal())}
    if op == "shift":
        return [rng.normal(size=s)], {"value": float(rng.normal())}
    if op == "broadcast":
        return [rng.normal(size=(1, 3, 1, 1, 1))], {"shape": s}
    raise KeyError(op)


def suite_op_gradients(cases_per_op: int = 20, seed: int = 0):
    from . import tensor as T

    rng = np.random.default_rng(seed)
    results = []
    for op in T.OP_KINDS:
        for _ in range(cases_per_op):
            arrays, attrs = _op_case(op, rng)
            leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
            out_shape = T.apply(op, leaves, **attrs).shape
            weights = rng.normal(size=out_shape)

            def f():
                with T.no_grad():
                    return float(np.sum(T.apply(op, [T.Tensor(a) for a in arrays], **attrs).data * weights))

            out = T.apply(op, leaves, **attrs)
            T.tsum(T.mul_mask(out, weights)).backward()
            numeric = central_difference(f, arrays)
            checks = [grad_close(leaf.grad, n) for leaf, n in zip(leaves, numeric)]
            results.append((all(ok for ok, _ in checks), max(w for _, w in checks)))
    return _tally(results)


def toy_total_loss(params, x, label, mask, gates, config):
    """Per-student total loss of a 4-parameter net: 1x1x1 conv (1->2 channels) + bias + softmax."""
    from . import losses
    from . import tensor as T

    w, b = params
    probs = {d: T.softmax(T.add_bias(T.conv(T.Tensor(x[d]), w), b)) for d in ("in", "out")}
    terms = {}
    for d in ("in", "out"):
        terms[f"seg_{d}"] = losses.bcp_seg_loss(probs[d], label[d], mask, config["alpha"], d)
        terms[f"mse_{d}"] = losses.masked_mse_loss(probs[d], label[d], mask, gates["diff"][d], config["alpha"], d)
        terms[f"kl_{d}"] = losses.masked_kl_uniform_loss(probs[d], mask, gates["differr"][d], config["alpha"], d, 2)
    return losses.total_loss(
        terms["seg_in"], terms["seg_out"], terms["mse_in"], terms["mse_out"],
        terms["kl_in"], terms["kl_out"], config["gamma"], config["mu"],
    )


def suite_total_loss_gradients(n_cases: int = 100, seed: int = 0):
    from . import maskops
    from . import tensor as T

    rng = np.random.default_rng(seed)
    results = []
    shape = (3, 3, 2)
    for _ in range(n_cases):
        w0 = rng.normal(size=(2, 1, 1, 1, 1))
        b0 = rng.normal(size=(2,))
        x = {d: rng.normal(size=(1, 1) + shape) for d in ("in", "out")}
        label = {d: rng.integers(0, 2, size=(1,) + shape) for d in ("in", "out")}
        mask = maskops.gen_copy_paste_mask(shape, 0.5, rng)
        diff = {d: rng.integers(0, 2, size=(1,) + shape).astype(np.uint8) for d in ("in", "out")}
        differr = {d: diff[d] * rng.integers(0, 2, size=(1,) + shape).astype(np.uint8) for d in ("in", "out")}
        gates = {"diff": diff, "differr": differr}
        config = {"alpha": float(rng.uniform(0, 1)), "gamma": float(rng.uniform(0, 1)), "mu": float(rng.uniform(0, 1))}
        params = [T.Tensor(w0.copy(), requires_grad=True), T.Tensor(b0.copy(), requires_grad=True)]
        toy_total_loss(params, x, label, mask, gates, config).backward()

        def f():
            with T.no_grad():
                return toy_total_loss([T.Tensor(w0), T.Tensor(b0)], x, label, mask, gates, config).item()

        numeric = central_difference(f, [w0, b0])
        checks = [grad_close(p.grad, n) for p, n in zip(params, numeric)]
        results.append((all(ok for ok, _ in checks), max(wc for _, wc in checks)))
    return _tally(results)


SUITES: dict[str, Callable] = {
    "op_gradients": suite_op_gradients,
    "total_loss_gradients": suite_total_loss_gradients,
    "losses": suite_losses,
    "masks": suite_masks,
    "mixing": suite_mixing,
    "metrics": suite_metrics,
}
