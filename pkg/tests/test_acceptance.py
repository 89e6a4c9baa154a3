"""Acceptance criteria, each at its stated tolerance and time budget.

Every test prints one ``[ACCEPT n] PASS|FAIL`` line (visible even under
pytest's output capture) and then asserts. The experiment configurations
below are pinned; the seed set 0, 1, 2 was never used while choosing them.
"""

import itertools
import time

import numpy as np
import pytest
from helpers import fd_grad, hsic_oracle, max_rel_error

from fedhenn import baselines, cka, cli, data, federation, nn
from fedhenn.config import ExperimentConfig
from fedhenn.data import ClientShard, LabeledDataset
from fedhenn.nn import Architecture, ModelParams

SEEDS = (0, 1, 2)

# 8 clients, 2 classes each, 40 rounds, one client sampled per round
ORDERING = dict(
    n_clients=8, classes_per_client=2, n_classes=4, dim=20, n_per_class=500, class_sep=3.0, test_frac=0.5,
    hidden=(32, 16), arch_family=((16,), (32, 16), (64, 32)), rounds=40, local_epochs=20, client_fraction=0.1,
    eta0=5.0, eta_schedule="linear_ramp", rad_size=128, rad_pool_size=256, lr=0.01, momentum=0.9,
)

REDUCTION = dict(
    n_clients=4, classes_per_client=2, n_per_class=40, hidden=(8,), arch_family=((4,), (8,), (6, 3)),
    rounds=10, local_epochs=3, client_fraction=0.5, rad_size=16, rad_pool_size=32, lr=0.05, momentum=0.9,
)

# every client trains every round; tanh because a narrow relu bottleneck can die and halt the run
SCHEDULE = {**REDUCTION, "client_fraction": 1.0, "activation": "tanh", "eta0": 1.0}

ALIGN_LIMIT = dict(
    n_clients=4, classes_per_client=2, n_per_class=100, dim=5, hidden=(8,), activation="identity",
    rounds=50, local_epochs=20, client_fraction=1.0, eta0=100.0, eta_schedule="constant",
    rad_size=64, rad_pool_size=128, lr=0.01, momentum=0.9,
)


def report(capsys, n, ok, detail, elapsed, budget):
    within = elapsed < budget
    status = "PASS" if ok and within else "FAIL"
    with capsys.disabled():
        print(f"\n[ACCEPT {n}] {status} {detail} ({elapsed:.1f}s, budget {budget:.0f}s)")
    assert ok, detail
    assert within, f"criterion {n} took {elapsed:.1f}s, budget {budget}s"


def _orthogonal(d, rng):
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


def test_1_cka_math(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {"self": 0.0, "orth": 0.0, "scale": 0.0, "hsic": 0.0, "path": 0.0}
    for _ in range(120):
        L = int(rng.integers(4, 12))
        A, B = rng.normal(size=(L, int(rng.integers(1, 6)))), rng.normal(size=(L, int(rng.integers(1, 6))))
        for spec in (cka.LINEAR, cka.KernelSpec("rbf")):
            K = cka.activation_kernel(A, spec)
            worst["self"] = max(worst["self"], abs(cka.cka(K, K) - 1.0))
        Kb = cka.activation_kernel(B)
        base = cka.cka(cka.activation_kernel(A), Kb)
        Q = _orthogonal(A.shape[1], rng)
        worst["orth"] = max(worst["orth"], abs(cka.cka(cka.activation_kernel(A @ Q), Kb) - base))
        for c in (1e-3, 1.0, 1e3):
            worst["scale"] = max(worst["scale"], abs(cka.cka(cka.activation_kernel(c * A), Kb) - base))
        worst["path"] = max(worst["path"], abs(cka.linear_cka(A, B) - base))
    for _ in range(30):
        Ki, Kj = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
        Ki, Kj = Ki + Ki.T, Kj + Kj.T
        worst["hsic"] = max(worst["hsic"], abs(cka.hsic(Ki, Kj) - hsic_oracle(Ki, Kj)))
    tol = {"self": 1e-12, "orth": 1e-8, "scale": 1e-8, "hsic": 1e-12, "path": 1e-10}
    ok = all(worst[k] <= tol[k] for k in tol)
    detail = "CKA math: " + ", ".join(f"{k} err {worst[k]:.1e} <= {tol[k]:.0e}" for k in tol)
    report(capsys, 1, ok, detail, time.perf_counter() - t0, 10)


def test_2_gradient_checks(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    kernels = [cka.LINEAR, cka.KernelSpec("rbf", "median_fraction", 0.5), cka.KernelSpec("rbf", "fixed", 1.0)]
    worst, count = 0.0, 0
    for k in range(24):
        d_in = int(rng.integers(2, 6))
        hidden = tuple(int(h) for h in rng.integers(2, 6, size=int(rng.integers(1, 3))))
        arch = Architecture((d_in, *hidden, int(rng.integers(2, 6))), ("relu", "tanh", "identity")[k % 3])
        init = nn.init_params(arch, 100 + k)
        p = ModelParams(arch, [(w, rng.normal(scale=0.1, size=b.shape)) for w, b in init.layers])
        L = int(rng.integers(3, 9))
        X, y = rng.normal(size=(6, d_in)), rng.integers(0, arch.layer_dims[-1], size=6)
        rad = rng.normal(size=(L, d_in))
        for spec in kernels:
            target = cka.activation_kernel(rng.normal(size=(L, 3)), spec)
            eta = float(rng.uniform(0.1, 3.0))
            _, g = nn.loss_and_grad(p, X, y, rad, target, eta, spec)
            num = fd_grad(lambda q: nn.loss_and_grad(q, X, y, rad, target, eta, spec)[0], p, h=1e-5)
            worst = max(worst, max_rel_error(g, num))
            count += 1
    ok = worst < 1e-4
    detail = f"gradient check: {count} net/kernel cases, max relative error {worst:.2e} < 1e-4"
    report(capsys, 2, ok, detail, time.perf_counter() - t0, 60)


def test_3_reduction_bit_exact(capsys, tmp_path):
    t0 = time.perf_counter()
    pairs = [("fedhenn_homo", "fedavg"), ("fedhenn_hetero", "local_only")]
    results = []
    for seed in SEEDS:
        for fedhenn_mode, baseline_mode in pairs:
            files = []
            for mode, eta0 in ((fedhenn_mode, 0.0), (baseline_mode, 0.001)):
                cfg = ExperimentConfig(mode=mode, seed=seed, eta0=eta0, **REDUCTION)
                out = tmp_path / f"{mode}-{seed}"
                cli.write_run(cfg, out)
                files.append((out / "metrics.csv").read_bytes())
            results.append(files[0] == files[1])
    ok = all(results)
    detail = f"reduction: {sum(results)}/{len(results)} (seed, pair) metrics.csv byte-identical"
    report(capsys, 3, ok, detail, time.perf_counter() - t0, 60)


def test_4_alignment_limit(capsys):
    t0 = time.perf_counter()
    mins = []
    for seed in SEEDS:
        res = federation.run_homogeneous(ExperimentConfig(mode="fedhenn_homo", seed=seed, **ALIGN_LIMIT))
        mins.append(min(res.alignment[-1].values()))
    ok = min(mins) > 0.99
    detail = "alignment limit: min client CKA to global at final round " + ", ".join(f"{m:.6f}" for m in mins) + " > 0.99"
    report(capsys, 4, ok, detail, time.perf_counter() - t0, 120)


@pytest.fixture(scope="module")
def ordering_results():
    t0 = time.perf_counter()
    out = {}
    for seed in SEEDS:
        homo = ExperimentConfig(mode="fedhenn_homo", seed=seed, **ORDERING)
        pop = federation.prepare_population(homo)
        row = {
            "fedhenn_homo": federation.run_homogeneous(homo, pop).final_macro(),
            "fedavg": baselines.run_fedavg(homo.replace(mode="fedavg"), pop).final_macro(),
            "fedhenn_homo_rbf": federation.run_homogeneous(homo.replace(kernel="rbf"), pop).final_macro(),
        }
        hetero = homo.replace(mode="fedhenn_hetero")
        pop = federation.prepare_population(hetero)
        row["fedhenn_hetero"] = federation.run_heterogeneous(hetero, pop).final_macro()
        row["local_only"] = baselines.run_local_only(hetero.replace(mode="local_only"), pop).final_macro()
        out[seed] = row
    return out, time.perf_counter() - t0


def test_5_ordering(capsys, ordering_results):
    res, elapsed = ordering_results
    gaps = [res[s]["fedhenn_homo"] - res[s]["fedavg"] for s in SEEDS]
    het = [res[s]["fedhenn_hetero"] - res[s]["local_only"] for s in SEEDS]
    ok = np.mean(gaps) >= 0.03 and all(h >= 0 for h in het)
    detail = (
        f"ordering: mean(homo - fedavg) = {np.mean(gaps):+.4f} (need >= 0.03) "
        f"[per seed {', '.join(f'{g:+.4f}' for g in gaps)}]; "
        f"hetero - local_only per seed {', '.join(f'{h:+.4f}' for h in het)} (need all >= 0)"
    )
    report(capsys, 5, ok, detail, elapsed, 600)


def test_6_linear_vs_rbf(capsys, ordering_results):
    res, elapsed = ordering_results
    diffs = [res[s]["fedhenn_homo"] - res[s]["fedhenn_homo_rbf"] for s in SEEDS]
    gap = float(np.mean(np.abs(diffs)))
    ok = gap <= 0.05
    detail = f"linear vs rbf: mean |linear - rbf| = {gap:.4f} (need <= 0.05) [per seed {', '.join(f'{d:+.4f}' for d in diffs)}]"
    report(capsys, 6, ok, detail, elapsed, 600)


def test_7_reduced_data(capsys):
    t0 = time.perf_counter()
    fractions = (0.25, 0.5, 0.75)
    degr = {m: {f: [] for f in fractions} for m in ("fedhenn_homo", "fedavg")}
    for seed in SEEDS:
        for mode, run in (("fedhenn_homo", federation.run_homogeneous), ("fedavg", baselines.run_fedavg)):
            cfg = ExperimentConfig(mode=mode, seed=seed, **ORDERING)
            full = run(cfg).final_macro()
            for f in fractions:
                degr[mode][f].append(full - run(cfg.replace(shrink_fraction=f, shrink_ratio=0.5)).final_macro())
    mean = {m: {f: float(np.mean(v)) for f, v in d.items()} for m, d in degr.items()}
    ok = all(mean["fedhenn_homo"][f] <= mean["fedavg"][f] for f in fractions)
    detail = "reduced data, seed-mean degradation homo vs fedavg (need homo <= fedavg at every f): " + "; ".join(
        f"f={f}: {mean['fedhenn_homo'][f]:+.4f} vs {mean['fedavg'][f]:+.4f}" for f in fractions
    )
    report(capsys, 7, ok, detail, time.perf_counter() - t0, 900)


def _labels_ds(counts):
    y = np.repeat(np.arange(len(counts)), counts)
    return LabeledDataset(np.arange(y.size, dtype=float).reshape(-1, 1), y, len(counts))


def test_8_data_properties(capsys):
    t0 = time.perf_counter()
    checked, failures = 0, []
    for n_classes, n_clients, seed in itertools.product(range(2, 6), range(1, 13), range(2)):
        ds = _labels_ds([2 * n_clients + 1] * n_classes)
        for cpc in range(1, n_classes + 1):
            parts = data.partition_noniid(ds, n_clients, cpc, seed)
            flat = np.concatenate(parts)
            if flat.size != np.unique(flat).size:
                failures.append(("disjoint", n_classes, n_clients, cpc, seed))
            if any(len(set(ds.labels[p])) != cpc for p in parts):
                failures.append(("cardinality", n_classes, n_clients, cpc, seed))
            again = data.partition_noniid(ds, n_clients, cpc, seed)
            if not all(np.array_equal(a, b) for a, b in zip(parts, again)):
                failures.append(("determinism", n_classes, n_clients, cpc, seed))
            checked += 1
    arch = Architecture((1, 2, 2))
    for n_clients, seed, frac in itertools.product(range(1, 13), range(2), (0.1, 0.25, 0.5, 0.75, 1.0)):
        ds = _labels_ds([10 * n_clients, 3 * n_clients])
        shards = [ClientShard(i, ds.subset(np.arange(10 * i, 10 * i + 10)), ds.subset([10 * n_clients + i]), arch)
                  for i in range(n_clients)]
        out = data.shrink_clients(shards, frac, 0.5, seed)
        again = data.shrink_clients(shards, frac, 0.5, seed)
        for a, b, c in zip(shards, out, again):
            if not (np.array_equal(a.test.features, b.test.features) and np.array_equal(a.test.labels, b.test.labels)):
                failures.append(("test isolation", n_clients, frac, seed))
            if not np.array_equal(b.train.features, c.train.features):
                failures.append(("shrink determinism", n_clients, frac, seed))
        checked += 1
    ok = not failures
    detail = f"data properties: {checked} exhaustive small instances, {len(failures)} violations"
    report(capsys, 8, ok, detail, time.perf_counter() - t0, 10)


def test_9_schedule_independence(capsys, tmp_path):
    t0 = time.perf_counter()
    same = []
    for seed in SEEDS:
        for mode in ("fedhenn_homo", "fedhenn_hetero", "fedavg", "local_only"):
            cfg = ExperimentConfig(mode=mode, seed=seed, **SCHEDULE)
            blobs = []
            for workers in (1, 4):
                out = tmp_path / f"{mode}-{seed}-{workers}"
                cli.write_run(cfg.replace(workers=workers), out)
                blobs.append((out / "metrics.csv").read_bytes())
            same.append(blobs[0] == blobs[1])
    ok = all(same)
    detail = f"schedule independence: {sum(same)}/{len(same)} sequential vs 4-thread metrics.csv byte-identical"
    report(capsys, 9, ok, detail, time.perf_counter() - t0, 60)
