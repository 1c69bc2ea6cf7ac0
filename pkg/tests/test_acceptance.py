"""Acceptance suite: one test per criterion, run at the stated tolerances.

The terminal summary prints one pass/fail line per criterion (see
``conftest.py``).  Criterion 7 trains six desk-size models and takes about
20 minutes on one CPU core.
"""

import json
import math
import time

import numpy as np
import pytest

from mvseg.cli import main, plot_sweep, read_sweep_csv
from mvseg.core import Tensor, conv2d, default_dtype, grad_check, maxpool2, sigmoid, upconv2
from mvseg.data import PhantomSpec, generate_cohort, make_triplets, split_patients
from mvseg.losses import contrastive_loss, contrastive_terms, dice_loss, info_nce, total_loss
from mvseg.metrics import abd, dsc, hd95, region_split, rvd
from mvseg.model import ModelConfig, TUNet, load_checkpoint, save_checkpoint
from mvseg.stats import bootstrap, mann_whitney_u, welch_t
from mvseg.trainer import TrainConfig, _stack, evaluate, fit, mean_wg_dsc
from oracles import exact_mwu_p, oracle_metrics, random_mask_pair

SEEDS = (0, 1, 2)
VIEWS3 = ("axial", "sagittal", "coronal")
TINY_TRAIN = {"schema_version": 1, "model": {"base_channels": 2}, "train": {"epochs": 1, "batch_size": 2, "random_positions": 0}}


def detail(record_property, text):
    record_property("detail", text)
    print(text)


def run(*argv):
    return main([str(a) for a in argv])


def tree(d, skip=("manifest.json",)):
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file() and p.name not in skip}


@pytest.fixture(scope="module")
def small_cohort():
    return generate_cohort(PhantomSpec(seed=21), 6)


@pytest.fixture(scope="module")
def cli_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept")
    assert run("gen", "--out", root / "ds", "--n-patients", 8, "--seed", 4) == 0
    (root / "train.json").write_text(json.dumps(TINY_TRAIN))
    return root


@pytest.mark.criterion(1)
def test_gradient_integrity(record_property):
    start = time.perf_counter()
    worst = {}

    def check(name, forward, params, **kw):
        err = grad_check(forward, params, **kw)
        worst[name] = max(worst.get(name, 0.0), err)
        assert err < 1e-2, f"{name}: relative error {err:.3g}"

    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(2, 2, 6, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        r = Tensor(rng.normal(size=(2, 3, 6, 6)))
        check("conv2d", lambda: (conv2d(x, w, b) * r).sum(), [x, w, b])

        xp = Tensor(rng.normal(size=(2, 2, 6, 6)), requires_grad=True)
        rp = Tensor(rng.normal(size=(2, 2, 3, 3)))
        check("maxpool2", lambda: (maxpool2(xp) * rp).sum(), [xp])

        xu = Tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True)
        wu = Tensor(rng.normal(size=(3, 2, 2, 2)), requires_grad=True)
        bu = Tensor(rng.normal(size=2), requires_grad=True)
        ru = Tensor(rng.normal(size=(2, 2, 6, 6)))
        check("upconv2", lambda: (upconv2(xu, wu, bu) * ru).sum(), [xu, wu, bu])

        logits = Tensor(rng.normal(size=(2, 1, 5, 5)), requires_grad=True)
        mask = (rng.random((2, 1, 5, 5)) > 0.5).astype(np.float64)
        check("dice_loss", lambda: dice_loss(sigmoid(logits), mask), [logits])

        za = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        zb = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        check("info_nce", lambda: info_nce(za, zb, 0.07), [za, zb])

        emb = {k: Tensor(rng.normal(size=(4, 6)), requires_grad=True) for k in VIEWS3}
        check("contrastive_loss", lambda: contrastive_loss(emb, 0.07), list(emb.values()))

        m = TUNet(ModelConfig(base_channels=2), seed=seed)
        views = {k: rng.random((2, 64, 64)) for k in VIEWS3}
        target = (rng.random((2, 1, 64, 64)) > 0.5).astype(np.float64)

        def net():
            prob, e = m.forward(views, training=True, rng=np.random.default_rng(seed))
            return total_loss(dice_loss(prob, target), contrastive_loss(e, 0.5), 0.25)

        names = ("enc.b1.c1.w", "enc.b2.c1.scale", "enc.b5.c3.b", "bott.c2.w", "bott.c3.shift", "dec.up0.w", "dec.b1.c2.w", "dec.out.w", "dec.out.b")
        check("tunet", net, [m.params[n] for n in names], max_entries=4, seed=seed)

    elapsed = time.perf_counter() - start
    detail(record_property, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.0f} s")
    assert elapsed < 300


@pytest.mark.criterion(2)
def test_closed_form_losses(record_property):
    with default_dtype(np.float64):
        rng = np.random.default_rng(0)
        one = rng.normal(size=(1, 5))
        assert info_nce(one, rng.normal(size=(1, 5)), 0.07).item() == 0.0
        for n in (2, 4, 8):
            e = np.tile(rng.normal(size=(1, 5)), (n, 1))
            assert abs(info_nce(e, e, 0.07).item() - math.log(n)) <= 1e-6
        ortho = info_nce(np.eye(2), np.eye(2), 1.0).item()
        assert abs(ortho - (-math.log(math.e / (math.e + 1)))) <= 1e-6
        worst = 0.0
        for seed in range(5):
            r = np.random.default_rng(seed)
            emb = {k: r.normal(size=(6, 8)) for k in VIEWS3}
            terms = contrastive_terms(emb, 0.07)
            assert len(terms) == 4
            gap = abs(contrastive_loss(emb, 0.07).item() - sum(t.item() for t in terms.values()))
            worst = max(worst, gap)
        assert worst <= 1e-7
    detail(record_property, f"orthogonal N=2 {ortho:.9f}; four-term gap {worst:.1e}")


@pytest.mark.criterion(3)
def test_loss_weighting_semantics(record_property, small_cohort):
    m = TUNet(ModelConfig(base_channels=2), seed=3)
    views, mask = _stack([make_triplets(p, [0.5])[0] for p in small_cohort[:4]], VIEWS3)

    def grads(fn):
        m.zero_grad()
        prob, emb = m.forward(views)
        fn(prob, emb).backward()
        return {k: p.grad.copy() for k, p in m.params.items() if p.grad is not None}

    g_dice = grads(lambda p, e: dice_loss(p, mask))
    g_cont = grads(lambda p, e: contrastive_loss(e, 0.07))
    g_a1 = grads(lambda p, e: total_loss(dice_loss(p, mask), contrastive_loss(e, 0.07), 1.0))
    g_a0 = grads(lambda p, e: total_loss(dice_loss(p, mask), contrastive_loss(e, 0.07), 0.0))
    gap1 = gap0 = 0.0
    for k, g in g_a1.items():
        gap1 = max(gap1, float(np.max(np.abs(g - 1.0 * g_dice[k]))))
    for k, g in g_a0.items():
        ref = g_cont.get(k, np.zeros_like(g))
        gap0 = max(gap0, float(np.max(np.abs(g - 1.0 * ref))))
    # the contrastive term must actually reach the shared encoder
    assert any(np.any(g_cont[k] != 0) for k in g_cont if k.startswith("enc."))
    detail(record_property, f"alpha=1 gap {gap1:.1e}; alpha=0 gap {gap0:.1e}")
    assert gap1 <= 1e-7 and gap0 <= 1e-7


@pytest.mark.criterion(4)
@pytest.mark.filterwarnings("ignore::RuntimeWarning", "ignore::UserWarning")
def test_weight_sharing_and_view_flexibility(record_property, small_cohort, tmp_path):
    cfg = TrainConfig(epochs=1, batch_size=2, random_positions=0)
    model, _ = fit(ModelConfig(base_channels=2), cfg, small_cohort[:5])
    assert model.encoder_parameter_sets() == ["enc"]
    assert not any(r in n for n in model.params for r in ("sag", "cor", "axial"))
    x = np.random.default_rng(1).random((3, 64, 64)).astype(np.float32)
    ref = model.encode(x, "axial")
    for role in ("sagittal", "coronal"):
        out = model.encode(x, role)
        for a, b in zip(ref[0] + [ref[1], ref[2]], out[0] + [out[1], out[2]]):
            assert np.array_equal(a.data, b.data)
    save_checkpoint(tmp_path / "m.tun", model)
    loaded = load_checkpoint(tmp_path / "m.tun")
    scores = {}
    for flag in ("1", "2a", "2s", "3"):
        scores[flag] = mean_wg_dsc(evaluate(loaded, small_cohort[5:], flag))
        assert np.isfinite(scores[flag])
    detail(record_property, "WG DSC " + ", ".join(f"{k}: {v:.1f}" for k, v in scores.items()))


@pytest.mark.criterion(5)
def test_metric_oracles(record_property):
    sp = (0.5, 0.5, 3.0)
    rng = np.random.default_rng(2024)
    for _ in range(200):
        a, b = random_mask_pair(rng)
        assert (dsc(a, b), hd95(a, b, sp), abd(a, b, sp)) == oracle_metrics(a, b, sp)
    for _ in range(20):
        a, _ = random_mask_pair(rng)
        assert (dsc(a, a), hd95(a, a, sp), abd(a, a, sp), rvd(a, a)) == (100.0, 0.0, 0.0, 0.0)
    for n in range(3, 41):
        s = region_split(n)
        k = n // 3
        assert s.apex == (0, k) and s.base == (n - k, n) and s.mid == (k, n - k)
    detail(record_property, "200 random pairs exact; identity (100, 0, 0, 0); thirds for n in [3, 40]")


@pytest.mark.criterion(6)
def test_statistics(record_property):
    rng = np.random.default_rng(6)
    for _ in range(10):
        a = rng.normal(size=rng.integers(2, 30))
        assert welch_t(a, a.copy()).p_value == 1.0
    worst = 0.0
    for _ in range(50):
        n1, n2 = rng.integers(20, 31, size=2)
        a, b = rng.normal(0, 1, n1), rng.normal(rng.uniform(0, 0.8), 1, n2)
        worst = max(worst, abs(mann_whitney_u(a, b).p_value - exact_mwu_p(a, b)))
    assert worst < 0.01
    v = rng.normal(80, 5, size=10)
    r1, r2 = bootstrap(v, 100, seed=0), bootstrap(v, 100, seed=0)
    assert r1.replicate_means.tobytes() == r2.replicate_means.tobytes()
    assert (r1.mean, r1.sd) == (r2.mean, r2.sd) and len(r1.replicate_means) == 100
    detail(record_property, f"max MWU p gap to exact {worst:.4f}")


@pytest.mark.criterion(7)
@pytest.mark.filterwarnings("ignore::RuntimeWarning", "ignore::UserWarning")
def test_multiview_not_below_axial(record_property):
    start = time.perf_counter()
    cohort = generate_cohort(PhantomSpec(seed=0), 50)
    train_ids, test_ids = split_patients([p.patient_id for p in cohort], 0.8, seed=0)
    by_id = {p.patient_id: p for p in cohort}
    train, test = [by_id[i] for i in train_ids], [by_id[i] for i in test_ids]
    assert (len(train), len(test)) == (40, 10)
    mc = ModelConfig(base_channels=8, input_hw=64)
    multi, multi_as_1, axial = [], [], []
    for seed in SEEDS:
        seeds = dict(data_seed=seed, init_seed=seed, aug_seed=seed)
        tc = TrainConfig(epochs=15, batch_size=8, alpha=0.25, temperature=0.07, views=3, **seeds)
        m3, _ = fit(mc, tc, train)
        multi.append(mean_wg_dsc(evaluate(m3, test, "3")))
        multi_as_1.append(mean_wg_dsc(evaluate(m3, test, "1")))
        m1, _ = fit(mc, TrainConfig(epochs=15, batch_size=8, alpha=1.0, views=1, **seeds), train)
        axial.append(mean_wg_dsc(evaluate(m1, test, "1")))
        print(f"seed {seed}: 3-view {multi[-1]:.2f}, 3-view as 1 {multi_as_1[-1]:.2f}, axial-only {axial[-1]:.2f}", flush=True)
    elapsed = time.perf_counter() - start
    m3_mean, m1_mean, drop = np.mean(multi), np.mean(axial), np.mean(multi) - np.mean(multi_as_1)
    detail(
        record_property,
        f"3-view {m3_mean:.2f}, axial-only {m1_mean:.2f}, 3-view evaluated with views=1 {np.mean(multi_as_1):.2f} "
        f"(per seed {[round(x, 2) for x in multi]} / {[round(x, 2) for x in axial]}); {elapsed / 60:.1f} min",
    )
    assert m3_mean >= 80.0
    assert m3_mean >= m1_mean - 2.0
    assert drop < 15.0 and np.mean(multi_as_1) > 50.0
    for full, single in zip(multi, multi_as_1):
        assert full - single < 15.0 and single > 50.0
    assert elapsed <= 90 * 60


@pytest.mark.criterion(8)
@pytest.mark.filterwarnings("ignore::RuntimeWarning", "ignore::UserWarning")
def test_sensitivity_harness(record_property, cli_dataset, tmp_path):
    root = cli_dataset
    grid = tmp_path / "grid.json"
    base = {k: v for k, v in TINY_TRAIN.items() if k != "schema_version"}
    grid.write_text(json.dumps({"schema_version": 1, "alpha": [0.25, 1.0], "temperature": [0.07], "views": [1, 3], "seeds": [0, 1], "base": base}))
    assert run("sweep", "--dataset", root / "ds", "--out", tmp_path / "sw", "--grid", grid) == 0
    rows = read_sweep_csv(tmp_path / "sw" / "sweep.csv")
    assert len(rows) == 4 * 2
    assert {(r["alpha"], r["views"], r["seed"]) for r in rows} == {(a, v, s) for a in (0.25, 1.0) for v in (1, 3) for s in (0, 1)}
    for r in rows:
        if (r["alpha"], r["views"]) == (0.25, 1):
            assert r["status"] == "skipped" and math.isnan(r["wg_dsc"])
        else:
            assert r["status"] == "ok" and 0.0 <= r["wg_dsc"] <= 100.0 and r["selected_epoch"] is not None
    regen = tmp_path / "regen"
    regen.mkdir()
    for p in plot_sweep(tmp_path / "sw" / "sweep.csv", regen):
        assert p.read_bytes() == (tmp_path / "sw" / p.name).read_bytes()
    for seed in (0, 1):
        out = tmp_path / f"base{seed}"
        assert run("train", "--dataset", root / "ds", "--out", out, "--config", root / "train.json", "--alpha", 1.0, "--views", 1, "--seed", seed) == 0
        cell = tmp_path / "sw" / "cells" / f"a1_t0.07_v1_s{seed}"
        for name in ("model.tun", "model.tun.json", "train_log.csv", "train_log.json"):
            assert (out / name).read_bytes() == (cell / name).read_bytes(), name
        assert run("eval", "--checkpoint", out / "model.tun", "--dataset", root / "ds", "--out", out / "ev", "--views", "1", "--no-plots") == 0
        assert (out / "ev" / "metrics_1.csv").read_bytes() == (cell / "metrics.csv").read_bytes()
    detail(record_property, f"{len(rows)} rows; baseline cells byte-identical for seeds 0 and 1")


@pytest.mark.criterion(9)
@pytest.mark.filterwarnings("ignore::RuntimeWarning", "ignore::UserWarning")
def test_replay_determinism(record_property, cli_dataset, tmp_path):
    root = cli_dataset
    grid = tmp_path / "grid.json"
    base = {k: v for k, v in TINY_TRAIN.items() if k != "schema_version"}
    grid.write_text(json.dumps({"schema_version": 1, "alpha": [0.5, 1.0], "temperature": [0.1], "views": [1, 3], "seeds": [2], "base": base}))
    runs = {
        "gen": ("gen", "--out", tmp_path / "gen", "--n-patients", 3, "--seed", 9),
        "train": ("train", "--dataset", root / "ds", "--out", tmp_path / "train", "--config", root / "train.json", "--seed", 3),
    }
    for args in runs.values():
        assert run(*args) == 0
    assert run("eval", "--checkpoint", tmp_path / "train" / "model.tun", "--dataset", root / "ds", "--out", tmp_path / "eval", "--views", "1", "2s", "3", "--subset", "all") == 0
    assert run("sweep", "--dataset", root / "ds", "--out", tmp_path / "sweep", "--grid", grid) == 0
    assert run("stats", tmp_path / "eval" / "metrics_1.csv", tmp_path / "eval" / "metrics_3.csv", "--out", tmp_path / "stats") == 0
    counts = {}
    for name in ("gen", "train", "eval", "sweep", "stats"):
        original = tmp_path / name
        assert run("replay", original / "manifest.json", "--out", tmp_path / f"re_{name}") == 0
        a, b = tree(original), tree(tmp_path / f"re_{name}")
        assert a.keys() == b.keys(), name
        for key in a:
            assert a[key] == b[key], f"{name}/{key} differs"
        counts[name] = len(a)
        m0 = json.loads((original / "manifest.json").read_text())
        m1 = json.loads((tmp_path / f"re_{name}" / "manifest.json").read_text())
        for key in ("command", "config", "seeds", "inputs", "outputs"):
            assert m0[key] == m1[key]
    detail(record_property, ", ".join(f"{k} {v} files" for k, v in counts.items()) + " byte-identical")
