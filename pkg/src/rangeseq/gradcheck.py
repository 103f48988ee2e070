"""Central finite-difference checks for every kernel and the full training loss."""

from __future__ import annotations

from dataclasses import replace
from typing import Callable

import numpy as np
import torch

from rangeseq import tensor_core as tc
from rangeseq.dataio import SyntheticSceneConfig, generate_synthetic_sequence, window_sequences
from rangeseq.model import TOY, ModelConfig, PredictionNet
from rangeseq.objectives import LossWeights
from rangeseq.rangeimg import SensorModel
from rangeseq.semseg import Segmenter, SegmenterConfig
from rangeseq.tensor_core import GradCheck, check_gradients

EPS = 1e-4
TOL = 1e-3
DTYPE = torch.float64


def _rand(g, *shape, scale=1.0):
    return (torch.randn(*shape, generator=g, dtype=DTYPE) * scale).requires_grad_(True)


def _weighted(out, g):
    """Project an output onto fixed random weights so every entry matters."""
    w = torch.randn(out.shape, generator=g, dtype=DTYPE)
    return lambda o: (o * w).sum()


def _kernel_case(name, build: Callable, g) -> GradCheck:
    fn, tensors = build(g)
    out = fn()
    reduce = _weighted(out, g)
    return check_gradients(name, lambda: reduce(fn()), tensors, EPS, TOL)


def _module_case(name, module, x, g) -> GradCheck:
    module = module.to(DTYPE)
    module.train()
    out = module(x)
    reduce = _weighted(out, g)
    tensors = [x] + [p for p in module.parameters()]
    return check_gradients(name, lambda: reduce(module(x)), tensors, EPS, TOL, max_entries=200)


def kernel_checks(seed: int = 0) -> list[GradCheck]:
    g = tc.seeded_generator(seed)
    results = []

    def conv(mode, stride):
        def build(g):
            x, w, b = _rand(g, 2, 2, 3, 4, 6), _rand(g, 3, 2, 3, 3, 3), _rand(g, 3)
            return (lambda: tc.conv3d(x, w, b, stride, 1, mode)), [x, w, b]
        return build

    results.append(_kernel_case("conv3d[zeros]", conv("zeros", 1), g))
    results.append(_kernel_case("conv3d[circular-width,stride(1,2,2)]", conv("circular-width", (1, 2, 2)), g))

    def tconv(g):
        x, w, b = _rand(g, 1, 3, 2, 1, 3), _rand(g, 3, 2, 1, 2, 2), _rand(g, 2)
        return (lambda: tc.transposed_conv3d(x, w, b, (1, 2, 2))), [x, w, b]
    results.append(_kernel_case("transposed_conv3d", tconv, g))

    def conv2(g):
        x, w, b = _rand(g, 2, 3, 4, 5), _rand(g, 2, 3, 3, 3), _rand(g, 2)
        return (lambda: tc.conv2d(x, w, b, 1, "circular-width")), [x, w, b]
    results.append(_kernel_case("conv2d[circular-width]", conv2, g))

    def conv1(g):
        x, w, b = _rand(g, 2, 1, 6), _rand(g, 1, 1, 3), _rand(g, 1)
        return (lambda: tc.conv1d_circular(x, w, b)), [x, w, b]
    results.append(_kernel_case("conv1d_circular", conv1, g))

    def lin(g):
        x, w, b = _rand(g, 4, 1, 5), _rand(g, 3, 5), _rand(g, 3)
        return (lambda: tc.linear(x, w, b)), [x, w, b]
    results.append(_kernel_case("linear", lin, g))

    def lrelu(g):
        base = torch.randn(3, 1, 4, generator=g, dtype=DTYPE)
        # keep inputs away from the kink at zero
        x = (base + torch.sign(base) * 0.1).requires_grad_(True)
        return (lambda: tc.leaky_relu(x, 0.01)), [x]
    results.append(_kernel_case("leaky_relu", lrelu, g))

    for name, f in (("sigmoid", tc.sigmoid), ("softmax", lambda t: tc.softmax(t, 1)),
                    ("global_avg_pool", tc.global_avg_pool)):
        def build(g, f=f):
            x = _rand(g, 2, 3, 1, 4)
            return (lambda: f(x)), [x]
        results.append(_kernel_case(name, build, g))

    def sdpa(g):
        q, k, v = _rand(g, 1, 2, 5, 3), _rand(g, 1, 2, 5, 3), _rand(g, 1, 2, 5, 3)
        return (lambda: tc.scaled_dot_product_attention(q, k, v)), [q, k, v]
    results.append(_kernel_case("scaled_dot_product_attention", sdpa, g))

    def cat(g):
        a, b = _rand(g, 2, 1, 3), _rand(g, 2, 2, 3)
        return (lambda: tc.concat([a, b], 1)), [a, b]
    results.append(_kernel_case("concat", cat, g))

    def addmul(g):
        a, b, c = _rand(g, 2, 3), _rand(g, 2, 3), _rand(g, 2, 3)
        return (lambda: tc.mul(tc.add(a, b), c)), [a, b, c]
    results.append(_kernel_case("add/mul", addmul, g))

    def reshape_permute(g):
        a = _rand(g, 2, 3, 4)
        return (lambda: tc.permute(tc.reshape(a, (4, 3, 2)), (2, 0, 1)) ** 2), [a]
    results.append(_kernel_case("reshape/permute", reshape_permute, g))

    torch.manual_seed(seed)
    results.append(_module_case("batch_norm_3d", tc.SampleNorm(3), _rand(g, 1, 3, 2, 1, 4), g))
    eca = tc.ECA(8)
    torch.nn.init.normal_(eca.conv.bias)
    results.append(_module_case("eca", eca, _rand(g, 1, 8, 2, 2, 3), g))
    results.append(_module_case("multi_head_attention", tc.MultiHeadSelfAttention(4, 2), _rand(g, 1, 6, 4), g))
    results.append(_module_case("transformer_layer", tc.TransformerLayer(4, 2, 8), _rand(g, 2, 5, 4), g))
    return results


def toy_setup(seed: int = 0):
    """Toy predictor, segmenter and sample used by the end-to-end check."""
    sensor = SensorModel.from_degrees(16, 64, 15, 15, 50)
    recs = generate_synthetic_sequence(SyntheticSceneConfig(seed=seed, n_frames=10), sensor)
    sample = window_sequences(recs, 5, 5, sensor=sensor)[0]
    cfg = replace(TOY, seed=seed)
    model = PredictionNet(cfg).to(DTYPE)
    with torch.no_grad():
        # open the mask head so the chamfer term sees (nearly) full clouds
        model.decoder.head.bias[1] = 4.0
    seg = Segmenter(SegmenterConfig(n_classes=4, seed=seed), sensor).to(DTYPE).freeze()
    return model, seg, sample


def end_to_end_check(seed: int = 0, n_params: int = 32) -> GradCheck:
    from rangeseq.trainer import sample_losses

    model, seg, sample = toy_setup(seed)
    model.train()
    weights = LossWeights(alpha_s=1.0, alpha_c=1.0)

    def fn():
        total, _, _ = sample_losses(model, sample, weights, seg, aux_rng=np.random.default_rng(seed),
                                    chamfer_points=None)
        return total

    return check_gradients("end-to-end total loss", fn, list(model.parameters()), EPS, TOL,
                           max_entries=n_params, rng=np.random.default_rng(seed))


def run_suite(seed: int = 0) -> list[GradCheck]:
    return kernel_checks(seed) + [end_to_end_check(seed)]
