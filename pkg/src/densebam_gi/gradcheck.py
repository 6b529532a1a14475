"""Central finite-difference checks for every differentiable op and model block."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

STEP = 1e-5
TOLERANCE = 1e-4
# gradients smaller than this are compared absolutely
ABS_FLOOR = 1e-6


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), ABS_FLOOR)


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    coords_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def check_gradients(fn: Callable[..., Tensor], inputs: list[Tensor], rng: np.random.Generator,
                    n_coords: int = 10, name: str = "", h: float = STEP) -> CheckResult:
    """Compare tape gradients of scalar ``fn(*inputs)`` with central differences.

    ``n_coords`` random coordinates are drawn from each input that requires grad.
    """
    for x in inputs:
        x.grad = None
    loss = fn(*inputs)
    T.backward(loss)
    worst, count = 0.0, 0
    for x in inputs:
        if not x.requires_grad:
            continue
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        for k in picks:
            orig = flat[k]
            flat[k] = orig + h
            with T.no_grad():
                up = fn(*inputs).item()
            flat[k] = orig - h
            with T.no_grad():
                down = fn(*inputs).item()
            flat[k] = orig
            numeric = (up - down) / (2 * h)
            worst = max(worst, relative_error(float(analytic.reshape(-1)[k]), numeric))
            count += 1
    return CheckResult(name, worst, count)


def _weighted(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    # a fixed random projection exercises non-uniform upstream gradients
    w = rng.normal(size=out.shape)
    return lambda y: T.tsum(T.mul(y, w))


def _leaf(rng, *shape, positive=False, scale=1.0):
    d = rng.normal(size=shape) * scale
    if positive:
        d = np.abs(d) + 0.5
    return Tensor(d, requires_grad=True)


def _op_suite(op: Callable[..., Tensor], *shapes, positive=False, **kw):
    def build(rng):
        xs = [_leaf(rng, *s, positive=positive) for s in shapes]
        with T.no_grad():
            proj = _weighted(op(*xs, **kw), rng)
        return (lambda *a: proj(op(*a, **kw))), xs
    return build


def _bn_suite(training: bool):
    def build(rng):
        x = _leaf(rng, 3, 2, 3, 3)
        g = _leaf(rng, 2)
        b = _leaf(rng, 2)
        rm, rv = rng.normal(size=2), np.abs(rng.normal(size=2)) + 0.5

        def f(x, g, b):
            # the running buffers are copies so repeated evaluation is pure
            return T.batch_norm(x, g, b, rm.copy(), rv.copy(), training=training)
        with T.no_grad():
            proj = _weighted(f(x, g, b), rng)
        return (lambda *a: proj(f(*a))), [x, g, b]
    return build


def op_suites() -> dict[str, Callable]:
    return {
        "add": _op_suite(T.add, (3, 4), (4,)),
        "sub": _op_suite(T.sub, (3, 1), (3, 4)),
        "mul": _op_suite(T.mul, (2, 3, 4), (3, 1)),
        "relu": _op_suite(T.relu, (4, 5)),
        "sigmoid": _op_suite(T.sigmoid, (4, 5)),
        "tanh": _op_suite(T.tanh, (4, 5)),
        "exp": _op_suite(T.exp, (3, 3)),
        "log": _op_suite(T.log, (3, 3), positive=True),
        "square": _op_suite(T.square, (3, 3)),
        "softmax": _op_suite(T.softmax, (3, 6)),
        "sum": _op_suite(lambda x: T.tsum(x, axis=1), (3, 4, 2)),
        "mean": _op_suite(lambda x: T.mean(x, axis=(0, 2), keepdims=True), (3, 4, 2)),
        "reshape": _op_suite(lambda x: T.reshape(x, (6, 4)), (2, 3, 4)),
        "transpose": _op_suite(lambda x: T.transpose(x, (2, 0, 1)), (2, 3, 4)),
        "getitem": _op_suite(lambda x: x[1:, ::2], (4, 5)),
        "concat_channels": _op_suite(lambda a, b: T.concat_channels([a, b]), (2, 2, 3, 3), (2, 3, 3, 3)),
        "embedding": _op_suite(lambda t: T.embedding(t, [[0, 2], [2, 1]]), (4, 3)),
        "pick": _op_suite(lambda x: T.pick(x, [1, 0, 3]), (3, 4)),
        "matmul": _op_suite(T.matmul, (3, 4), (4, 2)),
        "matmul_batched": _op_suite(T.matmul, (2, 3, 4), (2, 4, 5)),
        "matmul_vector": _op_suite(T.matmul, (4,), (4, 3)),
        "linear": _op_suite(T.linear, (2, 3, 4), (5, 4), (5,)),
        "conv2d": _op_suite(lambda x, k, b: T.conv2d(x, k, b, padding=1), (2, 3, 5, 5), (4, 3, 3, 3), (4,)),
        "conv2d_strided": _op_suite(lambda x, k: T.conv2d(x, k, stride=2, padding=3), (1, 2, 7, 6), (3, 2, 7, 7)),
        "conv2d_dilated": _op_suite(lambda x, k: T.conv2d(x, k, padding=2, dilation=2), (1, 2, 6, 6), (2, 2, 3, 3)),
        "conv2d_1x1": _op_suite(T.conv2d, (2, 3, 4, 4), (5, 3, 1, 1)),
        "avg_pool2d": _op_suite(lambda x: T.avg_pool2d(x, 2, 2), (2, 2, 5, 4)),
        "max_pool2d": _op_suite(lambda x: T.max_pool2d(x, 3, 2, padding=1), (2, 2, 6, 5)),
        "global_avg_pool": _op_suite(T.global_avg_pool, (2, 3, 3, 4)),
        "batch_norm_train": _bn_suite(True),
        "batch_norm_eval": _bn_suite(False),
    }


def model_suites() -> dict[str, Callable]:
    from .attention import AttentionState, CoverageAttention
    from .decoder import Decoder, DecoderConfig, GiGruCell, OutputProjection
    from .encoder import Bam, DenseBamEncoder, DenseLayer, EncoderConfig, FeatureGrid, Transition

    def module_suite(make_module, call, *input_shapes, weights_only=False):
        def build(rng):
            mod = make_module(rng)
            xs = [_leaf(rng, *s) for s in input_shapes]
            params = [p for p in mod.parameters() if p.decay or not weights_only]
            with T.no_grad():
                proj = _weighted(call(mod, *xs), rng)
            n_in = len(xs)
            return (lambda *a: proj(call(mod, *a[:n_in]))), xs + params
        return build

    def decoder_loss(m, feats):
        # summed log-probabilities of a fixed label sequence under teacher forcing
        labels = np.array([[4, 3, 2], [0, 4, 2]])
        probs = m.teacher_forced(FeatureGrid(feats), labels)
        return T.concat([T.reshape(T.log(T.pick(p, labels[:, t])), (1, -1)) for t, p in enumerate(probs)], 0)

    def tiny_decoder(cell, level2_aux="level1", learnable=False):
        cfg = DecoderConfig(cell=cell, hidden=4, embed=3, width=3, step_size=0.6, learnable_step=learnable,
                            level2_aux=level2_aux, attn_dim=3, cov_channels=2, cov_kernel=3)
        return lambda r: Decoder(cfg, 5, 3, r)

    def tiny_encoder(r):
        cfg = EncoderConfig(stem_channels=4, growth_rate=2, layers_per_block=(1, 1, 1), reduction_ratio=2,
                            spatial_dilation=2)
        return DenseBamEncoder(cfg, r)

    def bam_call(m, x):
        return m(x)

    def attend_call(m, h, grid, beta):
        return m.attend(h, FeatureGrid(grid), AttentionState(beta))[0]

    return {
        "dense_layer": module_suite(lambda r: DenseLayer(4, 2, r), lambda m, x: m(x), (2, 4, 5, 5)),
        "transition": module_suite(lambda r: Transition(6, 3, r), lambda m, x: m(x), (2, 6, 4, 4)),
        # batch 4: with two samples the channel-branch batch norm output is +-1 whatever its input
        "bam": module_suite(lambda r: Bam(4, 2, 2, r), bam_call, (4, 4, 5, 5)),
        "coverage_attention": module_suite(
            lambda r: CoverageAttention(hidden=3, feat=4, attn_dim=5, cov_channels=2, kernel=3, rng=r),
            attend_call, (2, 3), (2, 4, 2, 3), (2, 1, 2, 3)),
        "gi_gru_cell": module_suite(
            lambda r: GiGruCell(3, 4, 2, step_size=0.7, rng=r),
            lambda m, x, h, c: m(x, h, c)[0], (2, 3), (2, 4), (2, 2)),
        "gi_gru_cell_v_in": module_suite(
            lambda r: GiGruCell(3, 4, 2, step_size=0.7, rng=r),
            lambda m, x, h, v: m(x, h, None, v_in=v)[0], (2, 3), (2, 4), (2, 4)),
        "decoder_gi_gru": module_suite(tiny_decoder("gi_gru"), decoder_loss, (2, 3, 2, 2)),
        "decoder_gi_gru_recompute": module_suite(
            tiny_decoder("gi_gru", "recompute", learnable=True), decoder_loss, (2, 3, 2, 2)),
        "decoder_gru": module_suite(tiny_decoder("gru"), decoder_loss, (2, 3, 2, 2)),
        # biases feeding a batch norm have an exactly zero gradient in the full stack;
        # those paths are covered by the block suites above
        "encoder": module_suite(tiny_encoder, lambda m, x: m(x).features, (3, 1, 64, 64), weights_only=True),
        "output_projection": module_suite(
            lambda r: OutputProjection(vocab=5, embed=3, hidden=4, feat=2, width=3, rng=r),
            lambda m, h, c, y: m(h, c, y), (2, 4), (2, 2), (2, 3)),
    }


def run_all(seed: int = 0, n_coords: int = 10, log: Callable[[str], None] | None = None) -> list[CheckResult]:
    results = []
    suites = {**op_suites(), **model_suites()}
    for i, (name, build) in enumerate(suites.items()):
        rng = np.random.default_rng([seed, i])
        fn, inputs = build(rng)
        res = check_gradients(fn, inputs, rng, n_coords=n_coords, name=name)
        results.append(res)
        if log:
            log(f"{'PASS' if res.passed else 'FAIL'} {name:22s} max rel err {res.max_rel_error:.2e} "
                f"({res.coords_checked} coords)")
    return results
