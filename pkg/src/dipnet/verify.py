"""Gradient-check suites: primitives, network blocks, and full losses.

Each :class:`Case` bundles what :func:`dipnet.autodiff.grad_check` needs. Inputs are drawn uniform in
[-1, 1]; upstream weights are bounded away from zero so every coordinate has
a gradient large enough for a meaningful relative error.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check

TOLERANCE = 1e-4
EPS = 1e-3
SEEDS = tuple(range(5))


@dataclass
class Case:
    name: str
    builder: Callable
    inputs: list
    numeric_fn: Optional[Callable] = None
    max_coords: Optional[int] = None

    def run(self, seed: int = 0):
        return grad_check(self.builder, self.inputs, eps=EPS, numeric_fn=self.numeric_fn,
                          max_coords=self.max_coords, seed=seed)


def _weights(rng, shape):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.5, 1.5, size=shape)


def _away_from_kink(rng, shape, margin=10 * EPS):
    x = rng.uniform(-1, 1, size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + rng.uniform(0, 0.1, shape)), x)


def _project(out: Tensor, r: np.ndarray) -> Tensor:
    return ad.sum(ad.mul(out, Tensor(r)))


def primitive_cases(seed: int) -> List[Case]:
    rng = np.random.default_rng(seed)
    u = lambda *s: rng.uniform(-1, 1, size=s)
    cases = []

    def unary(name, fn, shape, inputs=None):
        r = _weights(rng, fn(Tensor(np.zeros(shape))).shape)
        cases.append(Case(name, lambda ts: _project(fn(ts[0]), r), [inputs if inputs is not None else u(*shape)]))

    def binary(name, fn, sa, sb):
        r = _weights(rng, fn(Tensor(np.zeros(sa)), Tensor(np.zeros(sb))).shape)
        cases.append(Case(name, lambda ts: _project(fn(ts[0], ts[1]), r), [u(*sa), u(*sb)]))

    binary("add", ad.add, (2, 3, 4), (2, 3, 4))
    binary("add/broadcast", ad.add, (2, 3, 4, 4), (1, 3, 1, 1))
    binary("sub", ad.sub, (3, 4), (3, 4))
    binary("sub/scalar", ad.sub, (3, 4), (1,))
    binary("mul", ad.mul, (2, 3, 3), (2, 3, 3))
    binary("mul/broadcast", ad.mul, (2, 3, 4, 4), (1, 3, 1, 1))
    unary("scale", lambda t: ad.scale(t, -2.5), (3, 4))
    unary("neg", ad.neg, (3, 4))
    unary("relu", ad.relu, (4, 5), _away_from_kink(rng, (4, 5)))
    unary("leaky_relu", lambda t: ad.leaky_relu(t, 0.2), (4, 5), _away_from_kink(rng, (4, 5)))
    unary("sigmoid", ad.sigmoid, (4, 5))
    unary("abs", ad.abs, (4, 5), _away_from_kink(rng, (4, 5)))
    unary("sum/axes", lambda t: ad.sum(t, axes=(0, 2)), (2, 3, 4))
    unary("mean/all", ad.mean, (2, 3, 4))
    unary("mean/axes", lambda t: ad.mean(t, axes=(1, 3)), (2, 3, 4, 2))
    unary("reshape", lambda t: ad.reshape(t, (6, 4)), (2, 3, 4))
    unary("expand", lambda t: ad.expand(t, (2, 3, 4, 5)), (2, 3, 1, 1))
    unary("global_avg_pool", ad.global_avg_pool, (2, 3, 4, 5))
    unary("pad/zero", lambda t: ad.pad(t, 1, "zero"), (1, 2, 3, 4))
    unary("pad/edge", lambda t: ad.pad(t, 2, "edge"), (1, 2, 3, 4))
    binary("matmul", ad.matmul, (3, 4), (4, 2))

    r = _weights(rng, (2, 5, 3, 3))
    cases.append(Case("concat", lambda ts, r=r: _project(ad.concat([ts[0], ts[1]], axis=1), r),
                  [u(2, 2, 3, 3), u(2, 3, 3, 3)]))

    for stride, padding in ((1, 1), (2, 1), (1, 0)):
        x, w, b = u(2, 3, 6, 5), u(4, 3, 3, 3), u(4)
        out_shape = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding).shape
        r = _weights(rng, out_shape)
        cases.append(Case(
            f"conv2d/s{stride}p{padding}",
            (lambda s, p, r: lambda ts: _project(ad.conv2d(ts[0], ts[1], ts[2], s, p), r))(stride, padding, r),
            [x, w, b],
        ))

    stats = ad.RunningStats(rng.uniform(-0.2, 0.2, 2), rng.uniform(0.5, 1.5, 2), 1)
    for mode in ("train", "eval"):
        r = _weights(rng, (4, 2, 3, 3))
        cases.append(Case(
            f"batch_norm/{mode}",
            (lambda m, r: lambda ts: _project(
                ad.batch_norm(ts[0], ts[1], ts[2], stats, m, update_stats=False), r))(mode, r),
            [u(4, 2, 3, 3), rng.uniform(0.5, 1.5, 2), u(2)],
        ))

    # the reversal layer's gradient is -lambda times the true derivative,
    # so difference the correspondingly scaled surrogate
    r = _weights(rng, (2, 3))
    lam = 0.7
    cases.append(Case(
        "grad_reverse",
        lambda ts, r=r: _project(ad.grad_reverse(ts[0], lam), r),
        [u(2, 3)],
        lambda ts, r=r: ad.scale(_project(ts[0], r), -lam),
    ))

    from .losses import l1_loss, multiclass_ce_loss, patch_bce_loss

    labels = rng.integers(0, 5, size=4)
    cases.append(Case("multiclass_ce", lambda ts: multiclass_ce_loss(ts[0], labels), [3 * u(4, 5)]))
    cases.append(Case("patch_bce/D=1", lambda ts: patch_bce_loss(ts[0], 1), [3 * u(2, 1, 3, 3)]))
    cases.append(Case("patch_bce/D=0", lambda ts: patch_bce_loss(ts[0], 0), [3 * u(2, 1, 3, 3)]))
    target = u(2, 3, 4, 4)
    pred = target + _away_from_kink(rng, target.shape)
    cases.append(Case("l1", lambda ts: l1_loss(ts[0], Tensor(target)), [pred]))
    return cases


# -- network blocks and full losses ------------------------------------------

@contextmanager
def _bound(module, names, tensors):
    """Temporarily replace the named parameters of ``module`` by ``tensors``."""
    slots = {name: (owner, attr) for owner, attr, name in module.parameter_slots()}
    saved = []
    for name, t in zip(names, tensors):
        owner, attr = slots[name]
        saved.append((owner, attr, getattr(owner, attr)))
        setattr(owner, attr, t)
    try:
        yield
    finally:
        for owner, attr, value in saved:
            setattr(owner, attr, value)


def _condition(module, factor: float = 10.0):
    """Scale every conv weight that feeds a batch norm by ``factor``.

    Batch norm makes the loss invariant to that scale, while an ``eps`` step
    becomes a ``factor`` times smaller relative perturbation of the normalized
    activations, which shrinks the finite-difference truncation error.
    """
    from .model import DiscBlock, PreActBlock

    for m in module.modules():
        if isinstance(m, PreActBlock):
            m.conv1.weight.data = m.conv1.weight.data * factor
        elif isinstance(m, DiscBlock):
            m.conv.weight.data = m.conv.weight.data * factor
    return module


def _trainable(module):
    return [(n, p.data.copy()) for n, p in module.named_parameters() if p.requires_grad]


def _module_case(name, module, extra_inputs, fn, numeric_fn=None, max_coords=None, include_params=True):
    """Case over ``extra_inputs`` followed by the module's trainable parameters.

    ``fn(module, extra_tensors)`` returns the loss; parameters are bound from
    the remaining grad-check tensors.
    """
    params = _trainable(module) if include_params else []
    names = [n for n, _ in params]
    k = len(extra_inputs)

    def wrap(f):
        def run(ts):
            with _bound(module, names, ts[k:]), module.stats_frozen():
                return f(module, ts[:k])
        return run

    return Case(name, wrap(fn), list(extra_inputs) + [a for _, a in params],
                wrap(numeric_fn) if numeric_fn else None, max_coords)


def _tiny_config(**overrides):
    from .model import ModelConfig

    base = dict(base_channels=4, low_level_blocks=2, local_blocks=1, global_fc_width=4,
                num_noise_classes=3, pixel_disc_channels=(4, 4, 4), feat_disc_channels=4,
                feat_disc_fc_width=4, extractor_channels=(3, 3, 3), extractor_seed=7)
    base.update(overrides)
    return ModelConfig(**base)


def block_cases(seed: int) -> List[Case]:
    """Residual block, fusion, extractor and both discriminators."""
    from .losses import generator_loss, multiclass_ce_loss
    from .model import (FeatureDiscriminator, Fusion, PixelDiscriminator, PreActBlock,
                        build_extractor)

    rng = np.random.default_rng(1000 + seed)
    u = lambda *s: rng.uniform(-1, 1, size=s)
    cfg = _tiny_config()
    cases = []
    with ad.default_dtype(np.float64):
        block = _condition(PreActBlock(3, rng))
        r = _weights(rng, (2, 3, 5, 5))
        cases.append(_module_case("residual_block/train", block, [u(2, 3, 5, 5)],
                                  lambda m, ts, r=r: _project(m(ts[0]), r)))

        block = PreActBlock(3, rng)
        for bn in (block.bn1, block.bn2):
            bn.stats = ad.RunningStats(rng.uniform(-0.2, 0.2, 3), rng.uniform(0.5, 1.5, 3), 1)
        block.eval()
        r = _weights(rng, (2, 3, 5, 5))
        cases.append(_module_case("residual_block/eval", block, [u(2, 3, 5, 5)],
                                  lambda m, ts, r=r: _project(m(ts[0]), r)))

        fusion = Fusion(3, 2, rng)
        fusion.bias.data = rng.uniform(0.5, 1.0, 2)
        r = _weights(rng, (2, 2, 4, 3))
        cases.append(_module_case("fusion", fusion, [u(2, 3, 4, 3), u(2, 3, 1, 1)],
                                  lambda m, ts, r=r: _project(m(ts[0], ts[1]), r)))

        fdisc = FeatureDiscriminator(cfg, seed)
        labels = rng.integers(0, cfg.num_noise_classes, size=2)
        cases.append(_module_case("feature_disc", fdisc, [u(2, 4, 6, 6)],
                                  lambda m, ts: multiclass_ce_loss(m(ts[0], reverse=False), labels)))
        lam = 0.8
        cases.append(_module_case(
            "feature_disc/reversed", fdisc, [u(2, 4, 6, 6)],
            lambda m, ts: multiclass_ce_loss(m(ts[0], lam), labels),
            lambda m, ts: ad.scale(multiclass_ce_loss(m(ts[0], reverse=False), labels), -lam),
            include_params=False,
        ))

        extractor = build_extractor("seeded", cfg.extractor_channels, 11 + seed)
        maps_r = [_weights(rng, s) for s in ((1, 3, 8, 8), (1, 3, 4, 4), (1, 3, 2, 2))]

        def extractor_loss(m, ts):
            return ad.add(ad.add(_project(m(ts[0])[0], maps_r[0]), _project(m(ts[0])[1], maps_r[1])),
                          _project(m(ts[0])[2], maps_r[2]))

        cases.append(_module_case("extractor", extractor, [rng.uniform(0, 1, (1, 3, 8, 8))],
                                  extractor_loss, include_params=False))

        pdisc = _condition(PixelDiscriminator(cfg, build_extractor("seeded", cfg.extractor_channels, 11 + seed), seed))
        cases.append(_module_case("pixel_disc", pdisc, [rng.uniform(0, 1, (2, 3, 32, 32))],
                                  lambda m, ts: generator_loss(m(ts[0])), max_coords=24))
    return cases


def end2end_cases(seed: int, lambda1: float = 0.5, lambda2: float = 0.5, lambda_grl: float = 1.0) -> List[Case]:
    """``L_feat`` and ``L_pix`` through the full networks on a 2-sample batch.

    Prior weights default to 0.5 (not the training value) so the prior
    terms are not swamped by the reconstruction term in the comparison.
    Each loss is split into a generator-side and a discriminator-side case:
    the reversal layer gives the generator the gradient of
    ``L1 - lambda_grl * lambda1 * CE``, which is what gets differenced there.
    """
    from .losses import (combined_feat_loss, combined_pix_loss, discriminator_loss,
                         generator_loss, l1_loss, multiclass_ce_loss)
    from .model import FeatureDiscriminator, PixelDiscriminator, TransformNet, build_extractor

    rng = np.random.default_rng(2000 + seed)
    cfg = _tiny_config()
    clean = rng.uniform(0, 1, (2, 3, 16, 16))
    noisy = clean + rng.normal(0, 0.1, clean.shape)
    labels = np.array([0, 2])
    cases = []
    with ad.default_dtype(np.float64):
        net = _condition(TransformNet(cfg, seed))
        fdisc = FeatureDiscriminator(cfg, seed + 1)
        pdisc = _condition(PixelDiscriminator(cfg, build_extractor("seeded", cfg.extractor_channels, 11 + seed), seed + 2))
    gen_names = [n for n, _ in _trainable(net)]
    gen_arrays = [a for _, a in _trainable(net)]
    k = 1 + len(gen_arrays)

    def gen_forward(ts):
        with _bound(net, gen_names, ts[1:k]), net.stats_frozen():
            return net(ts[0])

    def feat_gen(ts, sign):
        out = gen_forward(ts)
        l1 = l1_loss(out.denoised, Tensor(clean))
        with fdisc.stats_frozen():
            ce = multiclass_ce_loss(fdisc(out.fused_features, lambda_grl), labels)
        if sign > 0:
            return combined_feat_loss(l1, ce, lambda1)
        return ad.sub(l1, ad.scale(ce, lambda_grl * lambda1))

    cases.append(Case("L_feat/generator", lambda ts: feat_gen(ts, 1), [noisy] + gen_arrays,
                      lambda ts: feat_gen(ts, -1), max_coords=10))

    fd_names = [n for n, _ in _trainable(fdisc)]
    fd_arrays = [a for _, a in _trainable(fdisc)]
    with ad.no_grad(), ad.default_dtype(np.float64):
        fixed = net(Tensor(noisy))

    def feat_disc(ts):
        with _bound(fdisc, fd_names, ts):
            ce = multiclass_ce_loss(fdisc(Tensor(fixed.fused_features.data), lambda_grl), labels)
        return combined_feat_loss(l1_loss(Tensor(fixed.denoised.data), Tensor(clean)), ce, lambda1)

    cases.append(Case("L_feat/discriminator", feat_disc, fd_arrays, max_coords=12))

    def pix_gen(ts):
        out = gen_forward(ts)
        with pdisc.frozen(), pdisc.stats_frozen():
            adv = generator_loss(pdisc(out.denoised))
        return combined_pix_loss(l1_loss(out.denoised, Tensor(clean)), adv, lambda2)

    cases.append(Case("L_pix/generator", pix_gen, [noisy] + gen_arrays, max_coords=10))

    pd_names = [n for n, _ in _trainable(pdisc)]
    pd_arrays = [a for _, a in _trainable(pdisc)]

    def pix_disc(ts):
        with _bound(pdisc, pd_names, ts), pdisc.stats_frozen():
            return discriminator_loss(pdisc(Tensor(fixed.denoised.data)), pdisc(Tensor(clean)))

    cases.append(Case("L_pix/discriminator", pix_disc, pd_arrays, max_coords=12))
    return cases


SUITES = {
    "primitives": primitive_cases,
    "blocks": block_cases,
    "end2end": end2end_cases,
}


@dataclass
class SuiteReport:
    name: str
    max_rel_error: float
    checked: int
    skipped: int

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < TOLERANCE


def run_suite(scope: str, seeds=SEEDS) -> List[SuiteReport]:
    """Worst relative error per case name across ``seeds``."""
    if scope not in SUITES:
        raise ValueError(f"unknown gradcheck scope {scope!r}; choose from {sorted(SUITES)}")
    reports = {}
    for seed in seeds:
        for case in SUITES[scope](seed):
            res = case.run(seed)
            rep = reports.setdefault(case.name, SuiteReport(case.name, 0.0, 0, 0))
            rep.max_rel_error = max(rep.max_rel_error, res.max_rel_error)
            rep.checked += res.checked
            rep.skipped += res.skipped_kinks
    return list(reports.values())
