"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

The verdict lines are printed as they are decided and again in the terminal
summary (see conftest.py).
"""
import itertools
import json
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from bagstorm import attacks, cli, config, evaluation, model, pipeline
from bagstorm import autodiff as ad
from bagstorm.attacks import AttackConfig

from conftest import GATE, tiny_bundle, tiny_slide

pytestmark = pytest.mark.slow

METHODS = ("fgsm", "bim", "mim", "cw")
STRONG = dict(epsilon=16 / 255, alpha=4 / 255)  # toy-scale budget, step = epsilon / 4


def gate(n, name, ok, detail):
    GATE[n] = (name, bool(ok), detail)
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {name} ({detail})")
    assert ok, detail


def random_bundle(rng):
    h, w = (int(v) for v in rng.integers(1, 4, size=2))
    dims = model.ModelDims(
        patch_shape=(h, w, int(rng.integers(1, 3))),
        enc_hidden=int(rng.integers(2, 7)),
        feature_dim=int(rng.integers(2, 6)),
        attn_hidden=int(rng.integers(1, 5)),
        rep_dim=int(rng.integers(1, 5)),
        head_hidden=2,
    )
    return model.init_bundle(dims, {"A": 2}, int(rng.integers(2**31))).freeze(), dims


# --- 1 ----------------------------------------------------------------------------------

def test_c1_gradient_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        bundle, dims = random_bundle(rng)
        n = int(rng.integers(2, 7))
        pixels = rng.uniform(0, 1, size=(n, *dims.patch_shape))
        obj = attacks.FeatureObjective(bundle, pixels)
        sel = sorted(int(i) for i in rng.choice(n, size=int(rng.integers(1, min(n, 3) + 1)), replace=False))
        cand = {i: np.clip(pixels[i] + rng.uniform(-0.1, 0.1, size=pixels.shape[1:]), 0, 1) for i in sel}
        _, _, grads = obj.evaluate(cand)
        for i in sel:
            def f(x, i=i):
                return obj.evaluate({**cand, i: x}, need_grad=False)[0]

            fd = ad.finite_diff_grad(f, cand[i], h=1e-5)
            err = np.abs(fd - grads[i]) / np.maximum(np.maximum(np.abs(fd), np.abs(grads[i])), 1e-8)
            worst = max(worst, float(err.max()))
    took = time.perf_counter() - t0
    gate(1, "gradient oracle", worst < 1e-4 and took < 30, f"max rel err {worst:.2e}, {took:.1f} s")


# --- 2 ----------------------------------------------------------------------------------

def test_c2_budget_fuzz():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    bundles = [tiny_bundle(s) for s in range(10)]
    violations = 0
    for trial in range(1000):
        eps = int(rng.choice([4, 8, 16, 32, 64])) / 255
        cfg = AttackConfig(
            method=str(rng.choice(METHODS)),
            strategy=str(rng.choice(["parallel", "sequential"])),
            K=int(rng.integers(1, 9)),
            epsilon=eps,
            alpha=float(eps * rng.uniform(0.1, 1.0)),
            T=int(rng.integers(1, 6)),
            mu=float(rng.uniform(0, 1)),
            c=float(rng.uniform(0.1, 10)),
            init_scale=float(rng.uniform(0, 1)),
            seed=trial,
        )
        pixels = tiny_slide(trial, n=8, low=0.0, high=1.0)
        out = attacks.run_attack(bundles[trial % 10], pixels, cfg)
        rest = [i for i in range(8) if i not in out.selection]
        ok = (
            out.adv_pixels[rest].tobytes() == pixels[rest].tobytes()
            and np.abs(out.adv_pixels - pixels).max() <= cfg.epsilon + 1e-12
            and out.adv_pixels.min() >= 0.0
            and out.adv_pixels.max() <= 1.0
        )
        violations += not ok
    took = time.perf_counter() - t0
    gate(2, "budget fuzz", violations == 0 and took < 120, f"{violations} violations in 1000 runs, {took:.1f} s")


# --- 3 ----------------------------------------------------------------------------------

def _same(a, b):
    return a.adv_pixels.tobytes() == b.adv_pixels.tobytes() and a.selection == b.selection


def test_c3_identities(default_system):
    failures = []
    for seed in range(20):
        b, pixels = tiny_bundle(seed % 5), tiny_slide(seed, n=8)
        for K in (1, 3):
            base = AttackConfig(K=K, seed=seed, **STRONG)
            if not _same(attacks.run_attack(b, pixels, replace(base, method="mim", mu=0.0)),
                         attacks.run_attack(b, pixels, replace(base, method="bim"))):
                failures.append(f"mim(mu=0) vs bim, seed {seed}, K {K}")
            if not _same(attacks.run_attack(b, pixels, replace(base, method="fgsm")),
                         attacks.run_attack(b, pixels, replace(base, method="bim", T=1, alpha=base.epsilon))):
                failures.append(f"fgsm vs bim(T=1), seed {seed}, K {K}")
        for method in METHODS:
            cfg = AttackConfig(method=method, K=1, seed=seed, **STRONG)
            if not _same(attacks.run_attack(b, pixels, replace(cfg, strategy="parallel")),
                         attacks.run_attack(b, pixels, replace(cfg, strategy="sequential"))):
                failures.append(f"parallel vs sequential K=1, {method}, seed {seed}")
    sys_ = default_system
    res = evaluation.run_experiment(sys_.bundle, sys_.test.slides, AttackConfig(epsilon=0.0, init_scale=0.0),
                                    repeats=1, master_seed=0, train_ids=sys_.train_ids)
    for t, s in res.summaries.items():
        if s.accuracy_drop != 0.0 or s.attack_success_rate != 0.0:
            failures.append(f"null attack task {t}: AD {s.accuracy_drop}, ASR {s.attack_success_rate}")
    gate(3, "identity suite", not failures, "; ".join(failures[:3]) or "all bitwise identities hold, null attack AD=ASR=0")


# --- 4 ----------------------------------------------------------------------------------

def test_c4_zero_gradient(default_system):
    cases = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        bundle, dims = random_bundle(rng)
        cases.append((bundle, rng.uniform(0, 1, size=(6, *dims.patch_shape))))
    cases += [(default_system.bundle, s.pixels) for s in default_system.test.slides]
    bad_grad = bad_delta = 0
    for k, (bundle, pixels) in enumerate(cases):
        zeros = {i: np.zeros(pixels.shape[1:]) for i in range(min(4, len(pixels)))}
        loss, grads = attacks.feature_loss(bundle, pixels, zeros)
        bad_grad += loss != 0.0 or any(np.any(g) for g in grads.values())
        if k < 30:
            for method in METHODS:
                out = attacks.run_attack(bundle, pixels, AttackConfig(method=method, K=min(4, len(pixels)), init_scale=0.0, seed=k, **STRONG))
                bad_delta += any(np.any(d) for d in out.perturbation.values())
    gate(4, "zero-gradient degeneracy", bad_grad == 0 and bad_delta == 0,
         f"{len(cases)} model/slide cases: {bad_grad} nonzero gradients, {bad_delta} attacks moved")


# --- 5 ----------------------------------------------------------------------------------

def linear_mean_model(rng, n, shape, d=3, dp=2):
    size = int(np.prod(shape))
    enc = model.EncoderParams(rng.normal(size=(size, 4)), rng.normal(size=4), rng.normal(size=(4, d)),
                              rng.normal(size=d), "identity")
    # w = 0 makes every attention score equal: mean pooling
    agg = model.AggregatorParams(rng.normal(size=(d, 2)), rng.normal(size=(d, 2)), np.zeros((2, 1)),
                                 rng.normal(size=(d, dp)))
    M = (enc.W1 @ enc.W2 @ agg.P).T / n
    return model.ModelBundle(enc, agg, {}, shape).freeze(), M


def test_c5_corner_oracle():
    t0 = time.perf_counter()
    shape, n = (2, 2, 2), 4  # 8 attacked pixels -> 256 corners
    worst = -np.inf
    runs = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        bundle, M = linear_mean_model(rng, n, shape)
        pixels = rng.uniform(0, 1, size=(n, *shape))
        for eps in (16 / 255, 64 / 255):
            idx = int(rng.integers(n))
            x = pixels[idx].reshape(-1)
            lo, hi = np.maximum(x - eps, 0.0), np.minimum(x + eps, 1.0)
            best = 0.0
            for bits in itertools.product((0, 1), repeat=x.size):
                delta = np.where(np.array(bits) == 1, hi, lo) - x
                shift = M @ delta
                best = max(best, float(shift @ shift) / M.shape[0])
            for method in METHODS:
                for strategy in ("parallel", "sequential"):
                    cfg = AttackConfig(method=method, strategy=strategy, epsilon=eps, alpha=eps / 4, K=1, seed=seed)
                    out = attacks.run_attack(bundle, pixels, cfg, selection=[idx])
                    worst = max(worst, out.final_mse - best)
                    runs += 1
    took = time.perf_counter() - t0
    gate(5, "linear corner oracle", worst <= 1e-9 and took < 10,
         f"{runs} attacks, max excess over best corner {worst:.2e}, {took:.1f} s")


# --- 6 ----------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def k_sweep(default_system):
    sys_ = default_system
    t0 = time.perf_counter()
    rows = {}
    for method in ("bim", "mim"):
        rows[method] = evaluation.sweep(sys_.bundle, sys_.test.slides, AttackConfig(method=method, **STRONG), "K",
                                        [1, 2, 4, 8], ["parallel"], ("A", "B"), repeats=4, master_seed=0,
                                        train_ids=sys_.train_ids)
    return rows, time.perf_counter() - t0


def test_c6_budget_trend(k_sweep):
    rows, took = k_sweep
    clean = {t: rows["bim"][0].summaries[t].clean_accuracy for t in ("A", "B")}
    ok = clean["A"] >= 0.90 and clean["B"] >= 0.85 and took < 300
    parts = [f"clean A {clean['A']:.3f} B {clean['B']:.3f}"]
    for method, sweep_rows in rows.items():
        for t in ("A", "B"):
            ks = [r.value for r in sweep_rows]
            adv = [r.summaries[t].adv_accuracy for r in sweep_rows]
            rho = stats.spearmanr(ks, adv).statistic
            ad1, ad8 = sweep_rows[0].summaries[t].accuracy_drop, sweep_rows[-1].summaries[t].accuracy_drop
            # rho is a rank statistic; round away float noise before comparing with -0.8
            ok = ok and round(float(rho), 12) <= -0.8 and ad8 > ad1
            parts.append(f"{method}/{t} rho {rho:.2f} AD1 {ad1:.1f} AD8 {ad8:.1f}")
    parts.append(f"{took:.0f} s")
    gate(6, "adv accuracy falls with K", ok, ", ".join(parts))


# --- 7 ----------------------------------------------------------------------------------

def test_c7_normal_slides_more_vulnerable(default_system):
    wins = []
    detail = []
    for seed in range(4):
        sys_ = default_system if seed == 0 else pipeline.build_system(config.from_dict({"master_seed": seed}))
        res = evaluation.vuln_sweep(sys_.bundle, sys_.test.slides, AttackConfig(K=1, **STRONG),
                                    patches_per_slide=16, master_seed=seed)
        wins.append(res.normal_slide_rate > res.tumor_slide_rate)
        detail.append(f"seed {seed}: normal {res.normal_slide_rate:.3f} tumor {res.tumor_slide_rate:.3f}")
    gate(7, "normal > tumor single-patch success", sum(wins) >= 3, "; ".join(detail))


# --- 8 ----------------------------------------------------------------------------------

def test_c8_noise_defence(default_system):
    sys_ = default_system
    cfg = AttackConfig(method="bim", K=8, **STRONG)
    summary, _ = evaluation.defense_experiment(sys_.bundle, sys_.test.slides, cfg, 1 / 255, ("A", "B"),
                                               repeats=4, master_seed=0, train_ids=sys_.train_ids)
    ok = True
    parts = []
    for t, s in summary.items():
        ad_pts = (s.no_attack - s.attack) * 100
        restored = (s.no_attack - s.attack_defence) * 100
        cost = (s.no_attack - s.clean_defence) * 100
        ok = ok and ad_pts >= 5 and restored <= 2 and cost <= 2
        parts.append(f"{t}: clean {s.no_attack:.3f} attack {s.attack:.3f} attack+def {s.attack_defence:.3f} "
                     f"clean+def {s.clean_defence:.3f}")
    gate(8, "noise defence restores accuracy", ok, "; ".join(parts))


# --- 9, 10 ------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def cli_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    codes = [
        cli.main(["attack", "--seed", "0", "--output-dir", str(out)]),
        cli.main(["attack", "--seed", "0", "--output-dir", str(out), "--workers", "2"]),
    ]
    return out, codes


def test_c9_determinism(cli_runs):
    out, codes = cli_runs
    a, b = out / "attack-001", out / "attack-002"
    names = sorted(p.name for p in a.iterdir()) if a.exists() else []
    same = codes == [0, 0] and names == sorted(p.name for p in b.iterdir())
    differing = [n for n in names if (a / n).read_bytes() != (b / n).read_bytes()]
    gate(9, "byte-identical runs across --workers", same and not differing and "report.csv" in names,
         f"exit codes {codes}, {len(names)} files compared, differing: {differing or 'none'}")


def test_c10_ad_formula(cli_runs, k_sweep, tmp_path):
    out, _ = cli_runs
    rows = []
    for method_rows in k_sweep[0].values():
        for r in method_rows:
            rows += evaluation.report_rows(f"k{r.value}-{r.config.method}", r.summaries, r.config, 4, 0)
    evaluation.write_report(rows, tmp_path / "sweep.csv")
    table = evaluation.read_report(tmp_path / "sweep.csv") + evaluation.read_report(out / "attack-001" / "report.csv")
    worst = max(abs(r["ad_points"] - (r["clean_acc"] - r["adv_acc"]) * 100) for r in table)
    json_rows = json.loads((out / "attack-001" / "report.json").read_text())
    csv_rows = evaluation.read_report(out / "attack-001" / "report.csv")
    agree = [r["ad_points"] for r in json_rows] == [r["ad_points"] for r in csv_rows]
    gate(10, "AD = clean - attacked (points)", worst <= 1e-9 and agree,
         f"{len(table)} report rows, max |AD - recount| {worst:.1e}")
