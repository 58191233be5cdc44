"""Central-difference verification of every differentiable operation.

Each case builds random inputs, scalarizes the op output against a
fixed random weighting, and compares analytic gradients with central
differences coordinate by coordinate. The registry in ``default_cases``
covers each primitive once plus composite checks up to the full
five-loss model.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward, zero_grads
from .data import Batch, DictEntry, make_batches
from .model import ModelConfig, UnifiedModel, forward_losses
from .vocab import Vocabulary

__all__ = ["grad_check", "grad_check_params", "default_cases", "run_cases"]

_REL_FLOOR = 1e-4


def _rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / (abs(analytic) + abs(numeric) + _REL_FLOOR)


def _validate_eps(eps: float) -> None:
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"finite-difference step must lie in [1e-6, 1e-3], got {eps}")


def grad_check(
    op,
    shapes: list[tuple[int, ...]],
    eps: float = 1e-5,
    seed: int = 0,
    max_coords: int | None = None,
) -> float:
    """Largest relative gradient error of ``op`` over random inputs.

    ``op`` maps one Tensor per shape to a single Tensor of any shape. A
    fixed random weighting reduces the output to a scalar so that a
    single backward pass covers every output coordinate.
    """
    _validate_eps(eps)
    rng = np.random.default_rng(seed)
    inputs = [Tensor(rng.standard_normal(s), requires_grad=True) for s in shapes]

    out = op(*inputs)
    w = rng.standard_normal(out.shape)

    def scalar() -> float:
        return float((op(*inputs).data * w).sum())

    loss = ad.reduce_sum(ad.mul(out, Tensor(w)))
    zero_grads(inputs)
    backward(loss)

    worst = 0.0
    for x in inputs:
        g = x.grad if x.grad is not None else np.zeros_like(x.data)
        coords = list(np.ndindex(x.data.shape))
        if max_coords is not None and len(coords) > max_coords:
            picks = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in picks]
        for idx in coords:
            keep = x.data[idx]
            x.data[idx] = keep + eps
            hi = scalar()
            x.data[idx] = keep - eps
            lo = scalar()
            x.data[idx] = keep
            worst = max(worst, _rel_err(g[idx], (hi - lo) / (2 * eps)))
    return worst


def grad_check_params(
    loss_fn,
    params: list[Tensor],
    eps: float = 1e-5,
    seed: int = 0,
    max_coords: int = 6,
) -> float:
    """Verify analytic gradients of a scalar ``loss_fn`` w.r.t. ``params``.

    Checks up to ``max_coords`` sampled coordinates per parameter, so it
    stays affordable for whole models.
    """
    _validate_eps(eps)
    rng = np.random.default_rng(seed)
    zero_grads(params)
    backward(loss_fn())
    worst = 0.0
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        n = p.data.size
        flat_idx = np.arange(n)
        if n > max_coords:
            flat_idx = rng.choice(n, size=max_coords, replace=False)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in flat_idx:
            keep = flat[i]
            flat[i] = keep + eps
            hi = float(loss_fn().data)
            flat[i] = keep - eps
            lo = float(loss_fn().data)
            flat[i] = keep
            worst = max(worst, _rel_err(gflat[i], (hi - lo) / (2 * eps)))
    return worst


# ---------------------------------------------------------------------------
# Case registry
# ---------------------------------------------------------------------------


def _attention_case():
    rng = np.random.default_rng(7)
    from .model import MultiHeadSelfAttention

    attn = MultiHeadSelfAttention(8, 2, rng)

    def op(x):
        return attn(x, causal=True)

    return op, [(5, 8)], attn.params()


def _encoder_block_case():
    rng = np.random.default_rng(11)
    from .model import TransformerBlock

    blk = TransformerBlock(8, 2, 16, rng)

    def op(x):
        return blk(x, causal=False, drop=lambda t: t)

    return op, [(4, 8)], blk.params()


def _decoder_block_case():
    rng = np.random.default_rng(13)
    from .model import TransformerBlock

    blk = TransformerBlock(8, 2, 16, rng)

    def op(x):
        return blk(x, causal=True, drop=lambda t: t)

    return op, [(4, 8)], blk.params()


def _tiny_setup() -> tuple[UnifiedModel, Batch]:
    rng = np.random.default_rng(3)
    vocab = Vocabulary("whitespace", [f"w{i}" for i in range(8)])
    entries = [
        DictEntry(f"head{i}", [f"w{(i + j) % 8}" for j in range(3 + i % 2)],
                  rng.standard_normal(6))
        for i in range(3)
    ]
    cfg = ModelConfig(
        d_w=6, d_tok=8, depth=1, heads=2, d_ff=16,
        dropout_transformer=0.0, dropout_linear=0.0, dropout_token=0.0,
    )
    model = UnifiedModel(cfg, len(vocab), seed=5)
    model.eval()
    batch = make_batches(entries, vocab, batch_size=3)[0]
    return model, batch


def full_model_case(active=None, seed: int = 0, max_coords: int = 4) -> float:
    """Gradient error of the complete loss stack on a tiny model."""
    model, batch = _tiny_setup()
    params = model.parameters()

    def loss_fn():
        return forward_losses(model, batch, active=active).total

    return grad_check_params(loss_fn, params, seed=seed, max_coords=max_coords)


def _mixed_op_cases() -> list[tuple[str, float]]:
    checks: list[tuple[str, float]] = []
    checks.append(("matmul", grad_check(ad.matmul, [(3, 4), (4, 2)])))
    checks.append(("add_broadcast", grad_check(ad.add, [(3, 4), (4,)])))
    checks.append(("sub", grad_check(ad.sub, [(3, 4), (3, 4)])))
    checks.append(("mul", grad_check(ad.mul, [(2, 5), (2, 5)])))
    checks.append(("neg", grad_check(ad.neg, [(4, 3)])))
    checks.append(("scale", grad_check(lambda x: ad.scale(x, -1.7), [(3, 3)])))
    checks.append(("transpose", grad_check(ad.transpose, [(3, 5)])))
    # Shift inputs away from the kink at zero.
    checks.append(("relu", grad_check(lambda x: ad.relu(ad.add(x, 0.05)), [(4, 4)], seed=2)))
    checks.append(("softmax", grad_check(lambda x: ad.softmax(x, axis=-1), [(3, 6)])))
    checks.append(
        ("layer_norm", grad_check(ad.layer_norm, [(4, 6), (6,), (6,)]))
    )
    checks.append(("reduce_sum_all", grad_check(lambda x: ad.reduce_sum(x), [(3, 4)])))
    checks.append(("reduce_sum_axis", grad_check(lambda x: ad.reduce_sum(x, axis=0), [(3, 4)])))
    checks.append(("reduce_mean", grad_check(lambda x: ad.reduce_mean(x, axis=1), [(3, 4)])))
    checks.append(("slice_rows", grad_check(lambda x: ad.slice_rows(x, 1, 3), [(4, 5)])))
    checks.append(("slice_cols", grad_check(lambda x: ad.slice_cols(x, 0, 2), [(4, 5)])))
    checks.append(("concat", grad_check(lambda a, b: ad.concat([a, b], axis=1), [(3, 2), (3, 4)])))
    checks.append(
        ("embedding", grad_check(lambda t: ad.embedding(t, [0, 2, 2, 1]), [(4, 5)]))
    )
    checks.append(("mse_loss", grad_check(ad.mse_loss, [(3, 4), (3, 4)])))
    checks.append(
        (
            "cross_entropy",
            grad_check(lambda lg: ad.cross_entropy_loss(lg, [1, 0, 3], pad_id=0), [(3, 5)]),
        )
    )
    checks.append(
        (
            "dropout_eval",
            grad_check(lambda x: ad.dropout(x, 0.0, None), [(3, 4)]),
        )
    )
    return checks


def run_cases(max_coords: int = 4) -> list[tuple[str, float, bool]]:
    """Every registered gradient check: (name, max rel err, within 1e-4)."""
    results: list[tuple[str, float, bool]] = []
    for name, err in _mixed_op_cases():
        results.append((name, err, err < 1e-4))

    for name, builder in (
        ("attention", _attention_case),
        ("encoder_block", _encoder_block_case),
        ("decoder_block", _decoder_block_case),
    ):
        op, shapes, params = builder()

        rng = np.random.default_rng(17)
        x = Tensor(rng.standard_normal(shapes[0]), requires_grad=True)
        w = rng.standard_normal(op(x).shape)

        def loss_fn(op=op, x=x, w=w):
            return ad.reduce_sum(ad.mul(op(x), Tensor(w)))

        err = grad_check_params(loss_fn, [x] + params, max_coords=max_coords)
        results.append((name, err, err < 1e-4))

    err = full_model_case(max_coords=max_coords)
    results.append(("full_model_5task", err, err < 1e-4))
    return results


def default_cases() -> list[str]:
    return [
        "matmul", "add_broadcast", "sub", "mul", "neg", "scale", "transpose",
        "relu", "softmax", "layer_norm", "reduce_sum_all", "reduce_sum_axis",
        "reduce_mean", "slice_rows", "slice_cols", "concat", "embedding",
        "mse_loss", "cross_entropy", "dropout_eval",
        "attention", "encoder_block", "decoder_block", "full_model_5task",
    ]
