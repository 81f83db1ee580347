"""Acceptance criteria 1-9. Each test prints one verdict line via ``record``.

The desk-scale training criteria (6-8) share one session-scoped pipeline:
stage I for VI, guided IR and unguided IR, then stage II for E1 and E4.
"""

import math
import time

import numpy as np
import pytest

from conftest import record
from mmaunet import checkpoint as ck
from mmaunet import tensor as T
from mmaunet import train as W
from mmaunet.cka import cka_linear, cka_matrix, divergence_layer
from mmaunet.config import RunConfig
from mmaunet.data import SceneSpec, gen_dataset, load_dataset
from mmaunet.imageio import load_image, save_image
from mmaunet.losses import broadcast_ir, loss_det, loss_mse, loss_ssim, total_loss
from mmaunet.metrics import edge_strength_orientation, luma, psnr, psnr_from_mse, q_abf, ssim_metric
from mmaunet.model import FusionConfig, FusionModel, UNetModel, build_ablation
from oracles import grad_cases, hsic_oracle, qabf_oracle, ssim_oracle

# ---------------------------------------------------------------- 1


def _mini_fusion():
    """Depth-2 guided fusion model, everything trainable, in float64."""
    rng = T.Rng(0)
    vi = UNetModel(rng, 3, 3, 2, 2, kind="vi")
    ir = UNetModel(rng, 1, 1, 2, 2, guided=True, se_reduction=2, kind="ir")
    ir.attach_guide(vi)
    model = FusionModel(T.Rng(1), vi, ir, FusionConfig(depth=2, freeze_encoders=False), reduction=2)
    g = np.random.default_rng(0)
    for name, p in model.named_parameters():
        # nonzero biases keep ReLU inputs away from the kink at 0
        p.data = (0.3 * g.normal(size=p.shape) if name.endswith("bias") else p.data).astype(np.float64)
    return model


def _owner(module, dotted):
    *path, attr = dotted.split(".")
    for part in path:
        module = getattr(module, part)
    return module, attr


def _fusion_errors(dtype):
    """Worst relative error per tensor of the composed loss.

    The analytic gradient comes from a ``dtype`` model; the central
    differences always come from the float64 copy, so f32 round-off in the
    loss (about 1e-6 on a value near 10) does not swamp the small gradients
    that reach the guidance gates.
    """
    model = _mini_fusion()
    g = np.random.default_rng(1)
    ir0, vi0 = g.random((1, 1, 4, 4)), g.random((1, 3, 4, 4))
    named = dict(model.named_parameters())
    ref = {n: p.data.astype(np.float64) for n, p in named.items()}

    def set_all(dt):
        for n, p in named.items():
            p.data = ref[n].astype(dt)

    def loss(dt, ir=ir0, vi=vi0):
        a, b = T.Tensor(ir, dtype=dt), T.Tensor(vi, dtype=dt)
        return total_loss(a, b, model(a, b))

    def scalar_of(name):
        mod, attr = _owner(model, name)

        def scalar(w):
            keep = getattr(mod, attr)
            setattr(mod, attr, T.Tensor(w, dtype=np.float64))
            try:
                with T.no_grad():
                    return loss(np.float64).item()
            finally:
                setattr(mod, attr, keep)

        return scalar

    set_all(dtype)
    for p in named.values():
        p.grad = None
    a, b = T.Tensor(ir0, requires_grad=True, dtype=dtype), T.Tensor(vi0, requires_grad=True, dtype=dtype)
    T.backward(total_loss(a, b, model(a, b)))
    analytic = {"ir": a.grad, "vi": b.grad}
    analytic.update({n: p.grad for n, p in named.items() if p.data.size <= 64})

    set_all(np.float64)
    numeric = {
        "ir": T.numerical_grad(lambda x, y: _no_grad_item(loss, x, y), [ir0, vi0], 0, 1e-6),
        "vi": T.numerical_grad(lambda x, y: _no_grad_item(loss, x, y), [ir0, vi0], 1, 1e-6),
    }
    for n in analytic:
        if n not in numeric:
            numeric[n] = T.numerical_grad(scalar_of(n), [ref[n]], 0, 1e-6)
    errs = {}
    for n, num in numeric.items():
        ana = np.zeros_like(num) if analytic[n] is None else analytic[n].astype(np.float64)
        errs[n] = float(np.abs(ana - num).max() / max(np.abs(num).max(), 1e-12))
    return errs


def _no_grad_item(loss, ir, vi):
    with T.no_grad():
        return loss(np.float64, ir, vi).item()


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    g = np.random.default_rng(7)
    op64, op32 = 0.0, 0.0
    for _, fn, shapes in grad_cases():
        assert all(int(np.prod(s)) <= 64 for s in shapes)
        arrays = [g.normal(size=s) for s in shapes]
        op64 = max(op64, T.gradcheck(fn, arrays, dtype=np.float64))
        op32 = max(op32, T.gradcheck(fn, arrays, dtype=np.float32))
    fu64 = max(_fusion_errors(np.float64).values())
    fu32 = max(_fusion_errors(np.float32).values())
    elapsed = time.perf_counter() - t0
    ok = max(op64, fu64) <= 1e-5 and max(op32, fu32) <= 1e-2 and elapsed < 60
    record(1, ok, f"ops f64={op64:.2e} f32={op32:.2e}; fusion f64={fu64:.2e} f32={fu32:.2e}; {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 2


def test_criterion_2_cka():
    t0 = time.perf_counter()
    g = np.random.default_rng(2)
    x = g.normal(size=(16, 12))
    y = g.normal(size=(16, 7))
    q, _ = np.linalg.qr(g.normal(size=(12, 12)))
    self_err = abs(cka_linear(x, x) - 1.0)
    base = cka_linear(x, y)
    inv_err = max(abs(cka_linear(x @ q, y) - base), abs(cka_linear(4.2 * x, y) - base))
    oracle_err = 0.0
    for _ in range(20):
        n = int(g.integers(4, 24))
        a = g.normal(size=(n, int(g.integers(2, 40))))
        b = g.normal(size=(n, int(g.integers(2, 40)))) + 0.5 * a[:, :1]
        oracle_err = max(oracle_err, abs(cka_linear(a, b) - hsic_oracle(a, b)))
    elapsed = time.perf_counter() - t0
    ok = self_err <= 1e-6 and inv_err <= 1e-6 and oracle_err <= 1e-6 and elapsed < 30
    record(2, ok, f"self={self_err:.1e} invariance={inv_err:.1e} oracle={oracle_err:.1e}; {elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------------- 3


def test_criterion_3_loss_identities():
    t0 = time.perf_counter()
    g = np.random.default_rng(3)
    t64 = lambda a: T.Tensor(a, dtype=np.float64)  # noqa: E731
    ir, vi = t64(g.random((2, 1, 8, 8))), t64(g.random((2, 3, 8, 8)))
    same_x = loss_mse(vi, vi).item()
    avg = t64(0.5 * (broadcast_ir(ir, 3).data + vi.data))
    _, mse_at_avg, _, _ = total_loss(ir, vi, avg, parts=True)
    const = lambda v, c: t64(np.full((2, c, 8, 8), v))  # noqa: E731
    det_const = loss_det(const(0.1, 1), const(0.6, 3), const(0.9, 3)).item()
    eq = t64(np.repeat(ir.data, 3, axis=1))
    ssim_eq = loss_ssim(ir, eq, eq).item()
    elapsed = time.perf_counter() - t0
    vals = (same_x, mse_at_avg.item(), det_const, ssim_eq)
    ok = all(v == 0.0 for v in vals) and elapsed < 5
    record(3, ok, "mse(X,X)={} mse@avg={} det(const)={} ssim(F=IR=VI)={}; {:.2f}s".format(*vals, elapsed))
    assert ok


# ---------------------------------------------------------------- 4


def test_criterion_4_metric_identities():
    t0 = time.perf_counter()
    g = np.random.default_rng(4)
    x = g.random((3, 16, 16))
    id_ssim = abs(ssim_metric(x, x) - 1.0)
    id_q = abs(q_abf(x, x, x) - 1.0)
    ref = abs(psnr_from_mse(1.0, 255.0) - 48.1308)
    worst = 0.0
    for _ in range(10):
        a, b, f = g.random((3, 16, 16)), g.random((3, 16, 16)), g.random((3, 16, 16))
        mse = np.mean((a - f) ** 2)
        worst = max(
            worst,
            abs(psnr(a, f) - 10 * math.log10(1.0 / mse)),
            abs(ssim_metric(a, f) - np.mean([ssim_oracle(a[c], f[c]) for c in range(3)])),
            abs(q_abf(a[:1], b, f) - qabf_oracle(a[0], luma(b), luma(f))),
        )
    elapsed = time.perf_counter() - t0
    ok = id_ssim <= 1e-12 and id_q <= 1e-12 and ref <= 1e-3 and worst <= 1e-5 and elapsed < 30
    record(4, ok, f"ssim(x,x)-1={id_ssim:.1e} qabf-1={id_q:.1e} psnr_ref_err={ref:.1e} oracle={worst:.1e}; {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 5

STAGE1_CFG = RunConfig(epochs=30, batch_size=1, image_size=64, crop=64, train_count=8)


def test_criterion_5_stage1_convergence(tmp_path):
    gen_dataset(SceneSpec(size=64), 8, 0, tmp_path / "train")
    pairs = load_dataset(tmp_path / "train")
    t0 = time.perf_counter()
    vi, _ = W.train_stage1(STAGE1_CFG, "vi", pairs)
    t_vi = time.perf_counter() - t0
    ir, _ = W.train_stage1(STAGE1_CFG, "ir", pairs, vi)
    t_ir = time.perf_counter() - t0 - t_vi
    p_vi = float(np.mean(W.reconstruction_psnr(vi, pairs)))
    p_ir = float(np.mean(W.reconstruction_psnr(ir, pairs)))
    ok = p_vi >= 25 and p_ir >= 25 and t_vi < 300 and t_ir < 300
    record(5, ok, f"VI {p_vi:.2f} dB ({t_vi:.0f}s), guided IR {p_ir:.2f} dB ({t_ir:.0f}s); need >= 25 dB")
    assert ok


# ---------------------------------------------------------------- 6-8


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Desk-scale defaults, data laid out as ``gen-data`` writes it."""
    root = tmp_path_factory.mktemp("desk")
    cfg = RunConfig(data_dir=str(root / "data"))
    gen_dataset(SceneSpec(size=cfg.image_size), cfg.train_count, cfg.seed, root / "data" / "train")
    gen_dataset(SceneSpec(size=cfg.image_size), cfg.eval_count, cfg.seed + 1, root / "data" / "eval")
    train, ev = W.load_split(cfg, "train"), W.load_split(cfg, "eval")
    times = {}
    t0 = time.perf_counter()
    vi, _ = W.train_stage1(cfg, "vi", train)
    ir, _ = W.train_stage1(cfg, "ir", train, vi)
    iru, _ = W.train_stage1(cfg, "ir", train, guided=False)
    times["stage1"] = time.perf_counter() - t0
    for name, model in (("vi", vi), ("ir", ir), ("iru", iru)):
        W.save_unet(model, root / f"{name}.ckpt")
    fused = {}
    for variant in ("E1", "E4"):
        t0 = time.perf_counter()
        fcfg = build_ablation(W.fusion_config(cfg), variant)
        model, _, _ = W.train_stage2(cfg, W.load_unet(root / "vi.ckpt"), W.load_unet(root / "ir.ckpt"), train, fcfg)
        report, images = W.evaluate_model(model, ev)
        fused[variant] = (report, images)
        times[variant] = time.perf_counter() - t0
    return {"cfg": cfg, "eval": ev, "fused": fused, "times": times, "root": root}


def complementarity(pair, fused):
    f = luma(fused)
    t, d = pair.target_mask, pair.detail_mask
    target = f[t].mean() / pair.ir[0][t].mean()
    gf, _ = edge_strength_orientation(f)
    gv, _ = edge_strength_orientation(luma(pair.vi))
    detail = (gf[d] ** 2).sum() / (gv[d] ** 2).sum()
    return target, detail


def test_criterion_6_complementarity(desk):
    _, images = desk["fused"]["E1"]
    ratios = np.array([complementarity(p, f) for p, f in zip(desk["eval"], images)])
    elapsed = desk["times"]["E1"]
    ok = bool(np.all(ratios >= 0.6)) and elapsed < 600
    fmt = lambda a: "[" + " ".join(f"{v:.2f}" for v in a) + "]"  # noqa: E731
    record(6, ok, f"target/IR {fmt(ratios[:, 0])}; detail/VI {fmt(ratios[:, 1])}; need all >= 0.6; {elapsed:.0f}s")
    assert ok


def test_criterion_7_ablation_direction(desk):
    e1 = desk["fused"]["E1"][0].means
    e4 = desk["fused"]["E4"][0].means
    elapsed = desk["times"]["E1"] + desk["times"]["E4"]
    ok = e1["ssim"] >= e4["ssim"] and e1["qabf"] >= e4["qabf"] and elapsed < 1800
    record(7, ok, f"E1 ssim={e1['ssim']:.4f} qabf={e1['qabf']:.4f} vs E4 ssim={e4['ssim']:.4f} qabf={e4['qabf']:.4f}; {elapsed:.0f}s")
    assert ok


def test_criterion_8_guidance_divergence(desk):
    cfg, root = desk["cfg"], desk["root"]
    t0 = time.perf_counter()
    ir_in, vi_in = W.cka_inputs(desk["eval"], cfg.cka_samples, cfg.crop, cfg.seed)
    layers = {}
    for name in ("ir", "iru"):
        model = W.load_unet(root / f"{name}.ckpt")
        trace = W.collect_trace(model, ir_in, vi_in, feature_cap=cfg.feature_cap)
        layers[name] = divergence_layer(cka_matrix(trace), cfg.cka_window, cfg.cka_threshold)
    elapsed = time.perf_counter() - t0
    # no divergence within the trace counts as infinitely deep
    depth = {k: math.inf if v is None else v for k, v in layers.items()}
    ok = depth["ir"] <= depth["iru"] and elapsed < 300
    show = {k: "none" if v is None else v + 1 for k, v in layers.items()}
    record(8, ok, f"divergence layer guided={show['ir']} unguided={show['iru']} "
                  f"(window {cfg.cka_window}, threshold {cfg.cka_threshold}); {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------- 9


def test_criterion_9_determinism_and_formats(tmp_path):
    import test_cli

    t0 = time.perf_counter()
    (tmp_path / "tiny.cfg").write_text(test_cli.TINY)
    assert test_cli.run(tmp_path, "gen-data", "--data-dir", str(tmp_path / "data")) == 0
    test_cli.pipeline(tmp_path, tmp_path / "a")
    test_cli.pipeline(tmp_path, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    differ = [str(r) for r in files if (tmp_path / "a" / r).read_bytes() != (tmp_path / "b" / r).read_bytes()]
    other = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())

    g = np.random.default_rng(9)
    c = ck.Checkpoint("vi-unet", {"depth": "5"}, {"w": g.normal(size=(3, 4)).astype(np.float32)})
    back = ck.decode(ck.encode(c))
    ckpt_exact = back.params["w"].tobytes() == c.params["w"].tobytes() and ck.encode(back) == ck.encode(c)
    model = W.load_unet(tmp_path / "a" / "vi.ckpt")
    W.save_unet(model, tmp_path / "vi_again.ckpt")
    ckpt_exact &= (tmp_path / "vi_again.ckpt").read_bytes() == (tmp_path / "a" / "vi.ckpt").read_bytes()
    quant = 0.0
    for shape, ext in (((1, 11, 7), "pgm"), ((3, 6, 9), "ppm")):
        x = g.random(shape)
        quant = max(quant, float(np.abs(load_image(save_image(tmp_path / f"x.{ext}", x)) - x).max()))
    elapsed = time.perf_counter() - t0
    ok = not differ and files == other and ckpt_exact and quant <= 1 / 510 + 1e-7 and elapsed < 120
    record(9, ok, f"{len(files)} CLI outputs, {len(differ)} differ; checkpoint bit-exact={ckpt_exact}; "
                  f"netpbm max err={quant:.5f} (bound {1 / 510:.5f}); {elapsed:.0f}s")
    assert ok
