"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` or ``python tests/test_acceptance.py``.
The trend check (criterion 6) trains about thirty networks and takes roughly
25 minutes on one CPU core.
"""

import math
import sys
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from oracles import (
    all_masks,
    brute_assd_points,
    brute_hd_points,
    brute_surface,
    central_difference,
    relative_error,
)
from vesselprior.architectures import (
    CommunicationBlock,
    ConvAutoEncoder,
    FusionBlock,
    MaskDecoder,
    ModelConfig,
    ResidualChain,
    SemiOvercompleteAutoEncoder,
    UNet,
    receptive_fields,
)
from vesselprior.data import generate_synthetic
from vesselprior.errors import ConfigError
from vesselprior.experiments import TrendSettings, trend_check
from vesselprior.losses import freeze, reconstruction_loss, shape_prior_loss, total_loss, weighted_bce
from vesselprior.metrics import assd, dice, hausdorff
from vesselprior.training import TrainConfig, cross_validate, train_autoencoder, train_segmenter


@pytest.fixture
def verdict(capsys):
    def record(number, name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {name} ({detail})"
        with capsys.disabled():
            print("\n" + line, flush=True)
        assert ok, line

    return record


# 1 --------------------------------------------------------------------------------


def test_criterion_1_metric_oracle_exhaustive(verdict):
    start = time.perf_counter()
    masks = all_masks(3, 3)
    arrays = [np.array(m, dtype=np.uint8) for m in masks]
    surfaces = [brute_surface(m) for m in masks]
    worst, pairs = 0.0, 0
    for i in range(1, len(masks)):
        for j in range(1, len(masks)):
            a, b = arrays[i], arrays[j]
            err_assd = abs(assd(a, b) - brute_assd_points(surfaces[i], surfaces[j]))
            err_hd = abs(hausdorff(a, b) - brute_hd_points(surfaces[i], surfaces[j]))
            worst = max(worst, err_assd, err_hd)
            pairs += 1
    elapsed = time.perf_counter() - start
    ok = pairs == 511 * 511 and worst <= 1e-9 and elapsed < 300
    verdict(1, "exhaustive 3x3 oracle agreement", ok, f"{pairs} pairs, max error {worst:.1e}, {elapsed:.0f} s")


# 2 --------------------------------------------------------------------------------


def _shift(mask, dy, dx, margin):
    h, w = mask.shape
    out = np.zeros((h + 2 * margin, w + 2 * margin), np.uint8)
    out[margin + dy : margin + dy + h, margin + dx : margin + dx + w] = mask
    return out


def test_criterion_2_metric_identities(verdict):
    rng = np.random.default_rng(2024)
    failures = []
    worst_linear = worst_shift = 0.0
    for n in range(1000):
        shape = tuple(rng.integers(3, 24, size=2))
        a = (rng.random(shape) < rng.uniform(0.02, 0.6)).astype(np.uint8)
        b = (rng.random(shape) < rng.uniform(0.02, 0.6)).astype(np.uint8)
        a.flat[rng.integers(a.size)] = 1
        b.flat[rng.integers(b.size)] = 1
        # symmetry, bit for bit
        for fn in (dice, assd, hausdorff):
            if fn(a, b) != fn(b, a):
                failures.append((n, fn.__name__, "symmetry"))
        # translation of both masks inside a larger frame
        margin = 4
        dy, dx = rng.integers(-margin, margin + 1, size=2)
        sa, sb = _shift(a, dy, dx, margin), _shift(b, dy, dx, margin)
        for fn in (dice, assd, hausdorff):
            worst_shift = max(worst_shift, abs(fn(sa, sb) - fn(a, b)))
        # spacing linearity
        spacing = tuple(rng.uniform(0.1, 5.0, size=2))
        alpha = rng.uniform(0.1, 10.0)
        scaled = (alpha * spacing[0], alpha * spacing[1])
        for fn in (assd, hausdorff):
            base = fn(a, b, spacing)
            err = abs(fn(a, b, scaled) - alpha * base) / max(alpha * base, 1e-12)
            worst_linear = max(worst_linear, err)
    ok = not failures and worst_shift <= 1e-9 and worst_linear <= 1e-9
    detail = (f"1000 pairs, {len(failures)} symmetry failures, max translation error {worst_shift:.1e}, "
              f"max relative linearity error {worst_linear:.1e}")
    verdict(2, "metric identities", ok, detail)


# 3 --------------------------------------------------------------------------------


def _input_error(fn, x):
    x = x.detach().clone().double()
    xr = x.clone().requires_grad_(True)
    fn(xr).backward()
    return relative_error(xr.grad, central_difference(fn, x))


def _param_error(module, param, fn):
    module.zero_grad()
    fn().backward()
    analytic = param.grad.detach().clone()

    def at(p):
        with torch.no_grad():
            old = param.detach().clone()
            param.copy_(p)
            val = fn()
            param.copy_(old)
        return val

    return relative_error(analytic, central_difference(at, param.detach()))


def _projection(shape, seed):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_criterion_3_gradient_checks(verdict):
    torch.manual_seed(3)
    tiny = ModelConfig(depth=3, base_channels=2, input_size=(8, 8), latent_channels=2)
    errors = {}

    chain = ResidualChain(2, 2).double()
    w = _projection((2, 2, 6, 6), 1)
    x = torch.randn(2, 2, 6, 6, dtype=torch.float64)
    errors["residual chain (input)"] = _input_error(lambda v: (chain(v) * w).sum(), x)
    errors["residual chain (weights)"] = _param_error(chain, chain.units[0].conv2.weight, lambda: (chain(x) * w).sum())

    cb = CommunicationBlock(2, 2, 2).double()
    f_eu, f_eo = torch.randn(1, 2, 4, 4, dtype=torch.float64), torch.randn(1, 2, 8, 8, dtype=torch.float64)
    wu, wo = _projection((1, 2, 4, 4), 2), _projection((1, 2, 8, 8), 3)

    def cb_out(u, o):
        a, b = cb(u, o)
        return (a * wu).sum() + (b * wo).sum()

    errors["communication block (undercomplete input)"] = _input_error(lambda v: cb_out(v, f_eo), f_eu)
    errors["communication block (overcomplete input)"] = _input_error(lambda v: cb_out(f_eu, v), f_eo)
    errors["communication block (weights)"] = _param_error(cb, cb.from_over.units[0].conv1.weight, lambda: cb_out(f_eu, f_eo))

    fb = FusionBlock(2, 2).double()
    bottom, top = torch.randn(2, 2, 2, 2, dtype=torch.float64), torch.randn(2, 2, 8, 8, dtype=torch.float64)
    wz = _projection((2, 2, 2, 2), 4)
    errors["fusion block (bottleneck input)"] = _input_error(lambda v: (fb(v, top) * wz).sum(), bottom)
    errors["fusion block (overcomplete input)"] = _input_error(lambda v: (fb(bottom, v) * wz).sum(), top)
    errors["fusion block (weights)"] = _param_error(fb, fb.mix.weight, lambda: (fb(bottom, top) * wz).sum())

    y = torch.rand(2, 1, 8, 8, dtype=torch.float64)
    cae = ConvAutoEncoder(tiny).double()
    wl = _projection(cae.encode(y).values.shape, 5)
    errors["CAE encoder"] = _input_error(lambda v: (cae.encode(v).values * wl).sum(), y)
    socae = SemiOvercompleteAutoEncoder(tiny).double()
    wl = _projection(socae.encode(y).values.shape, 6)
    errors["S-OCAE encoder"] = _input_error(lambda v: (socae.encode(v).values * wl).sum(), y)
    dec = MaskDecoder([2, 4, 2]).double()
    wy = _projection((2, 1, 8, 8), 7)
    errors["decoder"] = _input_error(lambda z: (dec(z) * wy).sum(), torch.randn(2, 2, 2, 2))
    unet = UNet(ModelConfig(depth=3, base_channels=2, input_size=(8, 8))).double()
    errors["U-Net"] = _input_error(lambda v: (unet(v) * wy).sum(), torch.randn(2, 1, 8, 8))

    target = (torch.rand(2, 1, 8, 8) > 0.6).double()
    p0 = torch.rand(2, 1, 8, 8, dtype=torch.float64) * 0.9 + 0.05
    errors["reconstruction loss"] = _input_error(lambda p: reconstruction_loss(target, p), p0)
    errors["weighted BCE"] = _input_error(lambda p: weighted_bce(target, p, 5.0), p0)
    z = torch.randn(2, 12, dtype=torch.float64)
    errors["shape prior loss"] = _input_error(lambda v: shape_prior_loss(z, v), torch.randn(2, 12))
    frozen = freeze(SemiOvercompleteAutoEncoder(tiny).double())
    errors["total loss"] = _input_error(lambda p: total_loss(target, None, lambda _: p, frozen, 40.0, 5.0).total, p0)

    worst_name = max(errors, key=errors.get)
    ok = all(e < 1e-4 for e in errors.values())
    verdict(3, "finite-difference gradient checks", ok,
            f"{len(errors)} checks, worst {errors[worst_name]:.1e} ({worst_name})")


# 4 --------------------------------------------------------------------------------

STRUCTURE_CONFIGS = [
    ModelConfig(depth=d, base_channels=b, overcomplete_factor=n, residual_units=j, input_size=(s, s), latent_channels=lc)
    for d, b, n, j, s, lc in [
        (3, 2, 2, 1, 16, None),
        (4, 4, 2, 2, 64, 16),
        (4, 4, 3, 2, 64, 16),
        (5, 2, 2, 3, 128, None),
        (4, 8, 2, 2, 256, 32),
    ]
]


def test_criterion_4_structural_invariants(verdict):
    problems = []
    for cfg in STRUCTURE_CONFIGS:
        c, h, w = cfg.latent_shape()
        if not c * h * w < cfg.input_size[0] * cfg.input_size[1]:
            problems.append(f"{cfg}: latent not undercomplete")
        net = SemiOvercompleteAutoEncoder(cfg).eval()
        with torch.no_grad():
            feats = net.encoder_features(torch.rand(1, 1, *cfg.input_size))
        src, eo1, eo2 = (feats[k].shape[2:] for k in ("eu_penultimate", "eo1", "eo2"))
        if not (all(a > b for a, b in zip(eo1, src)) and all(a > b for a, b in zip(eo2, eo1))):
            problems.append(f"{cfg}: overcomplete branch does not grow")
        rf = receptive_fields(cfg)
        if not rf["eo2"] < rf["eu_bottom"]:
            problems.append(f"{cfg}: receptive field {rf}")
    try:
        ConvAutoEncoder(ModelConfig(depth=3, base_channels=4, input_size=(16, 16), latent_channels=64))
        problems.append("an overcomplete CAE latent was accepted")
    except ConfigError:
        pass
    for units in (1, 2, 3, 4):
        chain = ResidualChain(3, units)
        with torch.no_grad():
            for m in chain.modules():
                if isinstance(m, torch.nn.Conv2d):
                    m.weight.zero_()
                    m.bias.zero_()
        r0 = torch.randn(2, 3, 5, 7)
        if not torch.equal(chain(r0), r0):
            problems.append(f"zero residual chain with J={units} is not the identity")
    ok = not problems
    verdict(4, "structural invariants", ok, "; ".join(problems) if problems else f"{len(STRUCTURE_CONFIGS)} configurations")


# 5 --------------------------------------------------------------------------------


def _crops(seed, n):
    out = []
    for s in generate_synthetic(n, 64, seed=seed):
        out.append(replace(s, image=s.image[:, 16:48, 16:48].copy(), mask=s.mask[16:48, 16:48].copy()))
    return [s for s in out if s.mask.any()]


def test_criterion_5_lambda_zero_equivalence(verdict):
    samples = _crops(5, 16)
    seg_model = ModelConfig(depth=3, base_channels=4, input_size=(32, 32))
    ae_model = replace(seg_model, latent_channels=4, head_bias=-3.0)
    prior = train_autoencoder(samples, TrainConfig(stage="ae", prior="socae", epochs=3, batch_size=4), ae_model).model
    steps = math.ceil(50 / math.ceil(len(samples) / 4))

    def grads(cfg, encoder):
        seen = []

        def hook(step, model, lv):
            seen.append(torch.cat([p.grad.flatten() for p in model.parameters()]).clone())

        train_segmenter(samples, cfg, seg_model, encoder, on_step=hook)
        return seen

    base = TrainConfig(stage="seg", prior="none", lam=0.0, epochs=steps, batch_size=4)
    plain = grads(base, None)
    shaped = grads(replace(base, prior="socae"), prior)
    worst = max((g0 - g1).abs().max().item() for g0, g1 in zip(plain, shaped))
    ok = len(plain) == len(shaped) >= 50 and worst < 1e-6
    verdict(5, "lambda = 0 matches the unregularized gradients", ok, f"{len(plain)} steps, max difference {worst:.1e}")


# 6 --------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_6_desk_scale_trend(verdict, capsys):
    def progress(msg):
        with capsys.disabled():
            print("  " + msg, flush=True)

    result = trend_check(TrendSettings(), progress)
    with capsys.disabled():
        print(result.table())
    ok = result.wins >= 3 and result.seconds < 1800
    verdict(6, "desk-scale trend check", ok,
            f"lambda {result.lam:g}, prior HD <= baseline HD in {result.wins}/5 seeds, {result.seconds / 60:.1f} min")


# 7 --------------------------------------------------------------------------------


def test_criterion_7_reproducibility(verdict, tmp_path):
    samples = _crops(7, 12)
    seg_model = ModelConfig(depth=3, base_channels=4, input_size=(32, 32))
    ae_model = replace(seg_model, latent_channels=4, head_bias=-3.0)
    seg = TrainConfig(stage="seg", prior="socae", lam=40.0, epochs=2, batch_size=4, seed=7)
    ae = TrainConfig(stage="ae", prior="socae", epochs=2, batch_size=4, seed=7)

    def run(name):
        cross_validate(samples, seg, seg_model, 2, ae, ae_model, fold_seed=7, run_dir=tmp_path / name)
        root = tmp_path / name
        return {p.name: p.read_bytes() for p in sorted(root.iterdir()) if p.suffix in {".ckpt", ".csv"}}

    a, b = run("a"), run("b")
    same = a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    ok = same and len([k for k in a if k.endswith(".ckpt")]) == 4 and "metrics.csv" in a
    verdict(7, "byte-identical checkpoints and metric CSVs", ok, f"{len(a)} files compared")


# 8 --------------------------------------------------------------------------------


def test_criterion_8_loss_anchors(verdict):
    z = torch.tensor([[0.3, -1.2, 2.0, 0.5]], dtype=torch.float64)
    orth = torch.tensor([[1.2, 0.3, 0.0, 0.0]], dtype=torch.float64)
    anchors = [shape_prior_loss(z, z).item(), shape_prior_loss(z, orth).item(), shape_prior_loss(z, -z).item()]
    anchor_err = max(abs(a - e) for a, e in zip(anchors, (0.0, 1.0, 2.0)))
    rng = torch.Generator().manual_seed(8)
    values = torch.stack([shape_prior_loss(torch.randn(4, 16, generator=rng), torch.randn(4, 16, generator=rng))
                          for _ in range(1000)])
    in_range = bool(((values >= 0) & (values <= 2)).all())
    y, half = torch.tensor([1.0], dtype=torch.float64), torch.tensor([0.5], dtype=torch.float64)
    bce_err = max(abs(weighted_bce(y, half, 1.0).item() - math.log(2)),
                  abs(weighted_bce(y, half, 2.0).item() - 2 * math.log(2)))
    ok = anchor_err < 1e-12 and in_range and bce_err < 1e-9
    verdict(8, "loss anchors", ok, f"anchor error {anchor_err:.1e}, range ok {in_range}, ln 2 error {bce_err:.1e}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s", *sys.argv[1:]]))
