"""Finite-difference verification of tape gradients.

The numeric side perturbs leaf values and re-runs the forward function,
so it is independent of every backward rule it checks.  Checks should
run under float64 (see engine.using_dtype); central differences at the
default epsilon are unreliable in float32.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .engine import Tape, Tensor, backward

EPS = 1e-5


def numeric_grad(f: Callable[[], Tensor], leaf: Tensor, coords=None, eps: float = EPS) -> np.ndarray:
    """Central-difference gradient of scalar f() w.r.t. leaf.data.

    `coords` limits the check to the given flat indices (grad entries
    elsewhere are returned as nan); None checks every element.
    """
    flat = leaf.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    g = np.full(flat.size, np.nan, dtype=np.float64)
    for i in idx:
        saved = flat[i]
        flat[i] = saved + eps
        fp = f().item()
        flat[i] = saved - eps
        fm = f().item()
        flat[i] = saved
        g[i] = (fp - fm) / (2.0 * eps)
    return g.reshape(leaf.shape)


def tape_grad(f: Callable[[], Tensor], leaves: Sequence[Tensor]) -> list[np.ndarray]:
    """Reverse-mode gradient of scalar f() for each leaf, from a fresh tape."""
    for leaf in leaves:
        leaf.zero_grad()
    with Tape():
        out = f()
        backward(out)
    grads = []
    for leaf in leaves:
        if leaf.grad is None:
            grads.append(np.zeros_like(leaf.data))
        else:
            grads.append(leaf.grad.copy())
        leaf.zero_grad()
    return grads


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise relative difference with a noise floor.

    Coordinates far smaller than the gradient's overall magnitude are
    compared on an absolute scale, which keeps finite-difference noise
    on true zeros from dominating.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    gmax = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), max(floor, 1e-3 * gmax))
    return float((np.abs(a - b) / scale).max())


def check(f: Callable[[], Tensor], leaves: Sequence[Tensor], coords_per_leaf: int | None = None,
          eps: float = EPS, rng: np.random.Generator | None = None) -> float:
    """Compare tape and numeric gradients; returns the worst relative error.

    `coords_per_leaf` caps how many coordinates of each leaf are
    perturbed; half are the largest analytic entries, the rest sampled
    with `rng`.  None checks every coordinate.

    Central differences of a scalar of magnitude |f| resolve nothing
    below about |f|*ulp/eps, so coordinates where analytic and numeric
    values both sit under that floor count as agreeing zeros rather
    than producing a spurious relative error.
    """
    analytic = tape_grad(f, leaves)
    resolution = 8.0 * max(1.0, abs(f().item())) * np.finfo(np.float64).eps / eps
    worst = 0.0
    for leaf, ga in zip(leaves, analytic):
        ga_flat = ga.reshape(-1)
        if coords_per_leaf is None or leaf.size <= coords_per_leaf:
            coords = None
        else:
            rng = rng or np.random.default_rng(0)
            n_top = max(1, coords_per_leaf // 2)
            top = np.argsort(-np.abs(ga_flat))[:n_top]
            rest = np.setdiff1d(np.arange(leaf.size), top)
            n_rand = min(coords_per_leaf - n_top, rest.size)
            coords = np.concatenate([top, rng.choice(rest, size=n_rand, replace=False)])
        gn_flat = numeric_grad(f, leaf, coords=coords, eps=eps).reshape(-1)
        keep = ~np.isnan(gn_flat)
        keep &= (np.abs(ga_flat) >= resolution) | (np.abs(gn_flat) >= resolution)
        if keep.any():
            worst = max(worst, rel_error(ga_flat[keep], gn_flat[keep]))
    return worst


# ---------------------------------------------------------------------------
# named check suites shared by the CLI and the verification tests

OPS_TOL = 1e-4
BLOCK_TOL = 1e-3
NET_TOL = 1e-3


def _randt(rng, shape, lo=-1.0, hi=1.0):
    from .engine import tensor

    return tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def ops_suite(seed: int = 0):
    """Finite-difference check of every differentiable primitive.

    Returns [(name, max_rel_err, tol)]; inputs stay away from the kinks
    of absval and the degenerate points of rsqrt.
    """
    from . import ops
    from .engine import using_dtype

    results = []
    with using_dtype(np.float64):
        rng = np.random.default_rng(seed)

        def case(name, build, *leaves):
            results.append((name, check(build, leaves), OPS_TOL))

        a = _randt(rng, (2, 3))
        b = _randt(rng, (2, 3))
        case("add", lambda: ops.mean(ops.add(a, b)), a, b)
        case("sub", lambda: ops.mean(ops.mul(ops.sub(a, b), a)), a, b)
        case("mul", lambda: ops.mean(ops.mul(a, b)), a, b)
        case("scale", lambda: ops.mean(ops.scale(a, -1.7)), a)
        case("shift", lambda: ops.mean(ops.mul(ops.shift(a, 0.3), a)), a)
        case("sigmoid", lambda: ops.mean(ops.sigmoid(a)), a)
        case("gelu", lambda: ops.mean(ops.gelu(a)), a)
        case("softplus", lambda: ops.mean(ops.softplus(a)), a)

        pos = _randt(rng, (2, 3), lo=0.5, hi=2.0)
        case("rsqrt", lambda: ops.mean(ops.rsqrt(pos)), pos)
        off = _randt(rng, (2, 3), lo=0.2, hi=1.0)
        case("absval", lambda: ops.mean(ops.absval(off)), off)

        case("reduce_sum", lambda: ops.mean(ops.mul(ops.reduce_sum(a, axis=1, keepdims=True), a)), a)
        case("mean", lambda: ops.mean(ops.mul(a, a)), a)
        case("reshape", lambda: ops.mean(ops.mul(ops.reshape(a, (3, 2)), ops.reshape(b, (3, 2)))), a, b)
        case("transpose", lambda: ops.mean(ops.mul(ops.transpose(a, (1, 0)), ops.transpose(b, (1, 0)))), a, b)

        x = _randt(rng, (1, 2, 4, 4))
        y = _randt(rng, (1, 2, 4, 4))
        case("concat_channels", lambda: ops.mean(ops.mul(ops.concat_channels([x, y]),
                                                         ops.concat_channels([y, x]))), x, y)
        case("slice_channels", lambda: ops.mean(ops.mul(ops.slice_channels(x, 0, 1),
                                                        ops.slice_channels(x, 1, 2))), x)
        case("split_half_channels", lambda: ops.mean(ops.mul(*ops.split_half_channels(x))), x)
        case("space_to_depth", lambda: ops.mean(ops.mul(ops.space_to_depth(x), ops.space_to_depth(y))), x, y)
        z = _randt(rng, (1, 4, 2, 2))
        case("depth_to_space", lambda: ops.mean(ops.mul(ops.depth_to_space(z), x)), z, x)

        m1 = _randt(rng, (2, 3, 4))
        m2 = _randt(rng, (2, 4, 3))
        case("matmul", lambda: ops.mean(ops.matmul(m1, m2)), m1, m2)

        w1 = _randt(rng, (3, 2))
        b1 = _randt(rng, (3,))
        case("conv1x1", lambda: ops.mean(ops.mul(ops.conv1x1(x, w1, b1), ops.conv1x1(x, w1, b1))), x, w1, b1)
        w3 = _randt(rng, (2, 2, 3, 3))
        b3 = _randt(rng, (2,))
        case("conv3x3", lambda: ops.mean(ops.mul(ops.conv3x3(x, w3, b3), y)), x, w3, b3)
        wd = _randt(rng, (2, 3, 3))
        case("dconv3x3", lambda: ops.mean(ops.mul(ops.dconv3x3(x, wd), y)), x, wd)

        case("softmax", lambda: ops.mean(ops.mul(ops.softmax(a, axis=-1), b)), a, b)
        g = _randt(rng, (2,))
        bt = _randt(rng, (2,))
        case("layer_norm", lambda: ops.mean(ops.mul(ops.layer_norm(x, g, bt), y)), x, g, bt)
        case("l2_normalize", lambda: ops.mean(ops.mul(ops.l2_normalize(a, axis=-1), b)), a, b)
    return results


def block_suite(seed: int = 0):
    """Composite checks: attention, gated feed-forward, full residual block."""
    from . import blocks, ops
    from .engine import using_dtype

    results = []
    with using_dtype(np.float64):
        rng = np.random.default_rng(seed)
        params = blocks.init_block(rng, c=4, heads=2, gdfn=True)
        named = dict(blocks.named_block_tensors("blk", params))
        for t in named.values():
            t.data = t.data + 0.05 * rng.standard_normal(t.shape)
        x = _randt(rng, (1, 4, 3, 3))

        attn_leaves = [x] + [t for n, t in named.items() if ".attn." in n]
        results.append(("attention",
                        check(lambda: ops.mean(blocks.attention_forward(x, params.attn)),
                              attn_leaves),
                        BLOCK_TOL))
        ffn_leaves = [x] + [t for n, t in named.items() if ".ffn." in n]
        results.append(("gated_feedforward",
                        check(lambda: ops.mean(blocks.gdfn_core(x, params.ffn)), ffn_leaves),
                        BLOCK_TOL))
        results.append(("transformer_block",
                        check(lambda: ops.mean(blocks.block_forward(x, params)),
                              [x] + list(named.values())),
                        BLOCK_TOL))
    return results


def net_suite(seed: int = 0, coords_per_leaf: int = 2):
    """End-to-end check: tiny network, full deep-supervised loss, every
    parameter tensor sampled at a few coordinates."""
    from . import losses, network, ops
    from .engine import tensor, using_dtype

    with using_dtype(np.float64):
        rng = np.random.default_rng(seed)
        cfg = network.NetworkConfig(base_channels=2)
        params = network.init_params(cfg, seed=seed)
        named = network.named_parameters(params)
        # A fresh init leaves this two-channel model's activations nearly
        # equal across channels, parking the layer-norm variance at its
        # epsilon where central differences go nonlinear. Jitter the weights
        # to a well-conditioned point before checking.
        for t in named.values():
            t.data = t.data + 0.05 * rng.standard_normal(t.shape)
        fx = losses.init_extractor(seed=seed)
        weights = losses.LossWeights()
        img = _randt(rng, (1, 3, 16, 16), lo=0.05, hi=0.95)
        gt = tensor(rng.uniform(0.05, 0.95, size=(1, 3, 16, 16)))
        mask = tensor((rng.random((1, 1, 16, 16)) > 0.6).astype(np.float64))

        def build():
            out = network.forward(params, img, cfg, mode="train")
            loss, _ = losses.total_loss(out, gt, mask, weights, fx)
            return loss

        leaves = [img] + list(named.values())
        # The deep composition carries enough curvature that the default
        # step leaks truncation error past the tolerance; 1e-6 stays inside
        # the linear regime with float64 headroom to spare.
        err = check(build, leaves, coords_per_leaf=coords_per_leaf,
                    eps=1e-6, rng=np.random.default_rng(seed + 1))
    return [("end_to_end_loss", err, NET_TOL)]
