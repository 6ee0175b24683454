"""Acceptance suite: one printed PASS/FAIL line per criterion.

Criteria 5-9 share one reference run: the four-variant ablation on the
standard 64/16/16 phantom split at 32^3, 30 epochs, batch 4, default loss
weights. Its full-model member doubles as the training smoke run, because
every variant trains from the same seed and data.
"""
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from dosegan import checkpoint, gradsuite, losses, metrics, ops, trainer
from dosegan.dosesim import DRF_LEVELS, PhantomSpec, generate_dataset, generate_phantom, simulate_low_dose, write_dataset
from dosegan.losses import LossWeights
from dosegan.nets import NetConfig
from dosegan.rng import Rng
from dosegan.tensor import Tensor, no_grad
from dosegan.trainer import TrainConfig, fit, predictor, run_ablation, stack_batch
from oracles import direct_conv3d, nrmse_oracle, psnr_oracle, ssim_oracle

pytestmark = pytest.mark.slow

DATA_SEED = 7
TRAIN_SEED = 3
SMOKE_NET = NetConfig(base_channels=8, refiner_channels=8)
SMOKE_TRAIN = TrainConfig(max_epochs=30, batch_size=4, weights=LossWeights(300.0, 10.0, 10.0, 1.0), seed=TRAIN_SEED)
SMOKE_BUDGET_S = 30 * 60

GRAD_TOL = 1e-6
GRAD_BUDGET_S = 120
CONV_TOL = 1e-6
ADJOINT_TOL = 1e-4
METRIC_TOL = 1e-6
L_RE_RATIO = 0.5
ACCURACY_FLOOR = 0.60


def report(capsys, number: int, title: str, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")


# ----------------------------------------------------------------------------
# shared reference run


@pytest.fixture(scope="module")
def smoke_dataset():
    return generate_dataset(PhantomSpec(), DATA_SEED)


@pytest.fixture(scope="module")
def reference_run(smoke_dataset):
    """Ablation over all variants; every train-step breakdown is captured along the way."""
    captured = []
    real_step = trainer.train_step

    def recording_step(state, batch, norm_max):
        bd = real_step(state, batch, norm_max)
        captured.append((state.train_config.variant, bd))
        return bd

    timings = {}
    real_fit = trainer.fit

    def timed_fit(dataset, net_config=None, train_config=None, **kw):
        t0 = time.perf_counter()
        out = real_fit(dataset, net_config, train_config, **kw)
        timings[train_config.variant] = time.perf_counter() - t0
        return out

    with pytest.MonkeyPatch.context() as mp:
        mp.setattr(trainer, "train_step", recording_step)
        mp.setattr(trainer, "fit", timed_fit)
        results = run_ablation(smoke_dataset, SMOKE_NET, SMOKE_TRAIN)
    return {r.variant: r for r in results}, captured, timings


# ----------------------------------------------------------------------------
# 1-4: engine, oracle and simulator suites


def test_criterion_1_gradient_suite(capsys):
    t0 = time.perf_counter()
    results = gradsuite.run_suite()
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_error)
    covered = {r.name for r in results}
    needed = {"conv3d", "conv3d_transpose", "batch_norm3d_train", "batch_norm3d_eval", "leaky_relu", "relu",
              "linear", "softmax_cross_entropy", "loss_reconstruction", "loss_classification", "loss_perceptual",
              "loss_discriminator", "loss_generator_adversarial"}
    ok = (needed <= covered and all(r.max_error < GRAD_TOL and r.seeds >= 5 for r in results)
          and elapsed <= GRAD_BUDGET_S)
    report(capsys, 1, "64-bit gradient checks", ok,
           f"{len(results)} checks x {results[0].seeds} seeds, worst {worst.name} {worst.max_error:.2e} "
           f"(< {GRAD_TOL:g}), {elapsed:.0f}s (<= {GRAD_BUDGET_S}s)")
    assert ok


def test_criterion_2_convolution_oracles(capsys):
    worst_direct = 0.0
    for seed in range(50):
        rng = np.random.default_rng(5000 + seed)
        k = int(rng.choice([1, 3, 5]))
        stride, pad = int(rng.integers(1, 4)), int(rng.integers(0, k // 2 + 2))
        spatial = [int(rng.integers(max(1, k - 2 * pad), 7)) for _ in range(3)]
        n, cin, cout = (int(v) for v in rng.integers(1, 4, 3))
        x = rng.standard_normal((n, cin, *spatial))
        w = rng.standard_normal((cout, cin, k, k, k))
        b = rng.standard_normal(cout)
        got = ops.conv3d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64),
                         stride, pad).data
        worst_direct = max(worst_direct, float(np.max(np.abs(got - direct_conv3d(x, w, b, stride, pad)))))
    worst_adj = 0.0
    for seed in range(20):
        rng = np.random.default_rng(6000 + seed)
        k = int(rng.choice([1, 3]))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, k // 2 + 1))
        cin, cout = (int(v) for v in rng.integers(1, 4, 2))
        e = int(rng.integers(k, 8))
        x = rng.standard_normal((2, cin, e, e, e)).astype(np.float32)
        w = rng.standard_normal((cout, cin, k, k, k)).astype(np.float32)
        y = ops.conv3d(Tensor(x), Tensor(w), None, stride, pad).data
        u = rng.standard_normal(y.shape).astype(np.float32)
        xt = ops.conv3d_transpose(Tensor(u), Tensor(w), None, stride, pad, (e + 2 * pad - k) % stride).data
        lhs, rhs = float(np.vdot(y, u)), float(np.vdot(x, xt))
        worst_adj = max(worst_adj, abs(lhs - rhs) / max(1.0, abs(lhs)))
    ok = worst_direct < CONV_TOL and worst_adj < ADJOINT_TOL
    report(capsys, 2, "convolution oracles", ok,
           f"direct loop max err {worst_direct:.2e} over 50 geometries (< {CONV_TOL:g}); "
           f"transpose adjoint rel err {worst_adj:.2e} over 20 (< {ADJOINT_TOL:g})")
    assert ok


def test_criterion_3_metric_suite(capsys):
    rng = np.random.default_rng(31)
    x = rng.random((16, 16, 16))
    checks = {}
    checks["ssim(x,x)=1"] = abs(metrics.ssim3d(x, x) - 1.0)
    checks["nrmse(x,x)=0"] = abs(metrics.nrmse(x, x))
    gt = np.zeros((10, 10, 10))
    gt[0, 0, 0] = 1.0
    pred = gt + np.sqrt(0.01)  # MSE exactly 0.01 around MAX = 1
    checks["psnr=20dB"] = abs(metrics.psnr(pred, gt) - 20.0)
    a, b, L = 2.0, 3.0, 4.0
    c1 = (0.01 * L) ** 2
    closed = (2 * a * b + c1) / (a * a + b * b + c1)
    checks["ssim constant closed form"] = abs(metrics.ssim3d(np.full((9, 9, 9), a), np.full((9, 9, 9), b),
                                                             data_range=L) - closed)
    gt = rng.random((16, 16, 16)) * 3
    pred = gt + rng.normal(0, 0.1, gt.shape)
    checks["psnr oracle"] = abs(metrics.psnr(pred, gt) - psnr_oracle(pred, gt))
    checks["nrmse oracle"] = abs(metrics.nrmse(pred, gt) - nrmse_oracle(pred, gt))
    checks["ssim oracle"] = abs(metrics.ssim3d(pred, gt) - ssim_oracle(pred, gt))
    worst = max(checks, key=checks.get)
    ok = all(v < METRIC_TOL for v in checks.values())
    report(capsys, 3, "metric unit suite", ok, f"{len(checks)} checks, worst {worst} {checks[worst]:.2e} "
                                               f"(< {METRIC_TOL:g})")
    assert ok


def test_criterion_4_dose_simulation(capsys):
    worst_z = 0.0
    for d in DRF_LEVELS:
        draws = np.array([simulate_low_dose(np.ones(1), d, Rng(s).split("unbiased"))[0] for s in range(10_000)])
        sigma = math.sqrt(d / 1000.0 / len(draws))
        worst_z = max(worst_z, abs(draws.mean() - 1.0) / sigma)
    ph = generate_phantom(PhantomSpec(), Rng(99)).volume
    mse = [float(np.mean([np.mean((simulate_low_dose(ph, d, Rng(s).split(d)) - ph) ** 2) for s in range(50)]))
           for d in DRF_LEVELS]
    increasing = all(a < b for a, b in zip(mse, mse[1:]))
    ok = worst_z < 3 and increasing
    report(capsys, 4, "dose simulation", ok,
           f"worst mean offset {worst_z:.2f} sigma (< 3) over 10,000 draws per DRF; "
           f"MSE by DRF {', '.join(f'{m:.4f}' for m in mse)} strictly increasing={increasing}")
    assert ok


# ----------------------------------------------------------------------------
# 5-9: reference run


def _accuracy(state, pairs, norm_max):
    correct = 0
    with no_grad():
        for i in range(0, len(pairs), 8):
            x, _, labels = stack_batch(pairs[i:i + 8], norm_max)
            _, logits = state.nets.mlnet(x, training=False)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
    return correct / len(pairs)


def test_criterion_5_training_smoke(reference_run, smoke_dataset, capsys):
    results, captured, timings = reference_run
    full = results["full"]
    if full.state is None:
        report(capsys, 5, "training smoke", False, f"aborted: {full.error}")
        pytest.fail(full.error)
    logs = full.logs
    ratio = logs[-1].train.l_re / logs[0].train.l_re
    nm = smoke_dataset.manifest.norm_max
    acc = _accuracy(full.state, smoke_dataset.pairs("test"), nm)
    finite = all(math.isfinite(v) for _, bd in captured for v in bd.to_dict().values())
    seconds = timings["full"]
    ok = ratio <= L_RE_RATIO and acc >= ACCURACY_FLOOR and finite and seconds <= SMOKE_BUDGET_S
    report(capsys, 5, "training smoke", ok,
           f"(a) l_re epoch {len(logs)}/epoch 1 = {ratio:.3f} (<= {L_RE_RATIO}); "
           f"(b) held-out DRF accuracy {acc:.1%} on {len(smoke_dataset.pairs('test'))} test pairs "
           f"(>= {ACCURACY_FLOOR:.0%}); (c) finite={finite}; {seconds / 60:.1f} min (<= 30)")
    assert ok


def test_criterion_6_recovery_direction(reference_run, smoke_dataset, capsys):
    results, _, _ = reference_run
    full = results["full"]
    assert full.state is not None, full.error
    nm = smoke_dataset.manifest.norm_max
    rep = metrics.evaluate(smoke_dataset, {"refined": predictor(full.state, nm)}, split="test", drfs=(100,))
    low, ref = rep.row(metrics.LOW_DOSE, 100), rep.row("refined", 100)
    ok = ref.psnr > low.psnr and ref.nrmse < low.nrmse
    report(capsys, 6, "recovery at DRF 100", ok,
           f"PSNR {low.psnr:.3f} -> {ref.psnr:.3f} dB, NRMSE {low.nrmse:.3f}% -> {ref.nrmse:.3f}% "
           f"over {ref.count} test volumes")
    assert ok


def _pure_l1_params(dataset, epochs):
    """Independent L1-only U-Net trainer: coarse branch, 300 * mean|y - y_hat|, Adam, same shuffling."""
    from dosegan.optim import AdamState, adam_step

    state = trainer.TrainState.fresh(SMOKE_NET, trainer.variant_config(SMOKE_TRAIN, "baseline"))
    ml = state.nets.mlnet
    params = {f"mlnet/{n}": ml.p(n) for n in ml.reconstruction_names()}
    adam = AdamState(0.9, 0.999, 1e-8)
    nm = dataset.manifest.norm_max
    for epoch in range(1, epochs + 1):
        pairs = trainer.select_pairs(dataset, "train", "rotate", epoch - 1)
        order = state.rng.split(epoch).permutation(len(pairs))
        pairs = [pairs[i] for i in order]
        for i in range(0, len(pairs), 4):
            x, y, _ = stack_batch(pairs[i:i + 4], nm)
            coarse, _ = ml(x, training=True)
            loss = ops.scale(ops.mean_abs(ops.sub(y, coarse)), 300.0)
            ml.zero_grad()
            loss.backward()
            adam_step(params, adam, SMOKE_TRAIN.lr_initial)
    return ml.state_arrays()


def test_criterion_7_ablation_harness(reference_run, smoke_dataset, capsys):
    results, _, _ = reference_run
    rows = {}
    for v in trainer.VARIANTS:
        r = results[v]
        rows[trainer.VARIANT_LABELS[v]] = None if r.state is None else metrics.evaluate(
            smoke_dataset, {v: predictor(r.state, smoke_dataset.manifest.norm_max)}, drfs=(100,)).row(v, 100)
    table = metrics.ablation_table(rows)
    all_ok = all(r is not None for r in rows.values())
    body = table.strip().splitlines()
    layout = len(body) == 5 and body[0].split()[-3:] == ["PSNR", "SSIM", "NRMSE(%)"]
    # lambda zeroing: two epochs of the full pipeline with lambda2..4 = 0 against the plain L1 trainer
    zeroed_cfg = TrainConfig(max_epochs=2, weights=LossWeights(300.0, 0.0, 0.0, 0.0), variant="baseline",
                             seed=TRAIN_SEED)
    zeroed, _ = fit(smoke_dataset, SMOKE_NET, zeroed_cfg)
    want = _pure_l1_params(smoke_dataset, 2)
    got = zeroed.nets.mlnet.state_arrays()
    bitwise = all(np.array_equal(got[k], want[k]) for k in want)
    ok = all_ok and layout and bitwise
    with capsys.disabled():
        print("\n" + table, end="")
    report(capsys, 7, "ablation harness", ok,
           f"variants completed {sum(r is not None for r in rows.values())}/4, 4x3 table layout={layout}, "
           f"lambda-zeroing bitwise={bitwise}")
    assert ok


def test_criterion_8_determinism_and_persistence(reference_run, smoke_dataset, tmp_path, capsys):
    results, _, _ = reference_run
    full = results["full"]
    assert full.state is not None, full.error
    # dataset bytes
    a, b = tmp_path / "a", tmp_path / "b"
    write_dataset(smoke_dataset, a)
    write_dataset(generate_dataset(PhantomSpec(), DATA_SEED), b)
    data_same = all((a / p.name).read_bytes() == (b / p.name).read_bytes() for p in a.iterdir())
    # epoch logs and checkpoints of a repeated (shortened) run
    short = replace(SMOKE_TRAIN, max_epochs=2)
    runs = [fit(smoke_dataset, SMOKE_NET, short) for _ in range(2)]
    logs_same = [e.to_json() for e in runs[0][1]] == [e.to_json() for e in runs[1][1]]
    ckpt_same = checkpoint.to_bytes(runs[0][0]) == checkpoint.to_bytes(runs[1][0])
    # save -> load -> forward on the reference checkpoint
    path = checkpoint.save_checkpoint(full.state, tmp_path / "ref.ckpt")
    loaded = checkpoint.load_checkpoint(path)
    resave = checkpoint.to_bytes(loaded) == path.read_bytes()
    x = stack_batch(smoke_dataset.pairs("test")[:4], smoke_dataset.manifest.norm_max)[0].data
    fwd_same = all(p.tobytes() == q.tobytes() for p, q in zip(trainer.predict(full.state, x),
                                                             trainer.predict(loaded, x)))
    # reports
    nm = smoke_dataset.manifest.norm_max
    reps = [metrics.evaluate(smoke_dataset, {"m": predictor(s, nm)}).to_json() for s in (full.state, loaded)]
    report_same = reps[0] == reps[1]
    ok = data_same and logs_same and ckpt_same and resave and fwd_same and report_same
    report(capsys, 8, "determinism and persistence", ok,
           f"dataset={data_same} epoch-logs={logs_same} checkpoints={ckpt_same} save/load/save={resave} "
           f"forward={fwd_same} reports={report_same}")
    assert ok


def test_criterion_9_loss_identity(reference_run, capsys):
    results, captured, _ = reference_run
    w = SMOKE_TRAIN.weights
    breakdowns = [bd for _, bd in captured]
    breakdowns += [e.train for r in results.values() for e in r.logs]
    worst = 0.0
    exact = True
    for bd in breakdowns:
        expect = w.reconstruction * bd.l_re + w.classification * bd.l_class + w.refinement * bd.l_refine \
            + w.adversarial * bd.l_dis_g
        exact &= bd.l_total == losses.weighted_total(w, bd.l_re, bd.l_class, bd.l_refine, bd.l_dis_g)
        worst = max(worst, abs(bd.l_total - expect) / max(1.0, abs(expect)))
    ok = exact and worst < 1e-12 and len(breakdowns) > 0
    report(capsys, 9, "loss identity", ok,
           f"{len(breakdowns)} breakdowns, l_total == 300 l_re + 10 l_class + 10 l_refine + l_dis_g "
           f"(max rel dev {worst:.1e})")
    assert ok

