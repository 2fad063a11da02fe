"""One test per acceptance criterion; each prints a PASS/FAIL line.

Criteria 7 and 8 train 16x16 synthetic MiniResNets for 30+ epochs and take
most of the suite's runtime (roughly 15 minutes on one core).
"""

import csv
import itertools
import math
import time

import numpy as np
import pytest

from normswitch import analytics as A
from normswitch import checks
from normswitch import normalizers as N
from normswitch import switchable as S
from normswitch.cli import main
from normswitch.config import ExperimentConfig
from normswitch.data import ingest_dataset
from normswitch.network import resnet50_spec
from normswitch.snapshot import Snapshot
from normswitch.training import harden_finetune, save_run, train
from oracles import kl_terms, random_spec, rf_by_marking, switchable_loops

REPORT = {}


def report(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    REPORT[n] = line
    print(line)
    return ok


TINY = dict(
    resolution=8,
    train_samples=32,
    test_samples=16,
    widths=(4, 8, 8),
    blocks_per_stage=1,
    n_shards=2,
    per_shard=4,
    lr_base_batch=0,
    lr0=0.05,
    classes=4,
)

# desk-scale trend setup: 4 emulated devices, linear LR scaling from 0.1 at 256
TREND = dict(
    resolution=16,
    train_samples=512,
    test_samples=256,
    widths=(8, 16, 32),
    n_shards=4,
    epochs=30,
    milestones=(20, 25),
    eval_every=30,
)
SEEDS = (0, 1, 2)


def tiny(**kw):
    return ExperimentConfig(**{**TINY, **kw})


def trend(**kw):
    return ExperimentConfig(**{**TREND, **kw})


def bn_ratio(traj):
    """Final BN ratio averaged over layers and over mu/sigma."""
    fin = traj.final()
    return float(np.mean([(r.lambda_mu[2] + r.lambda_sigma[2]) / 2 for r in fin.values()]))


@pytest.fixture(scope="module")
def trend_data():
    return ingest_dataset(trend().dataset_source())


@pytest.fixture(scope="module")
def trend_runs(trend_data):
    cache = {}

    def get(seed, per_shard):
        if (seed, per_shard) not in cache:
            cache[seed, per_shard] = train(trend(per_shard=per_shard, seed=seed), dataset=trend_data)
        return cache[seed, per_shard]

    return get


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    results = checks.run_checks("all")
    elapsed = time.perf_counter() - start
    worst = max(results, key=lambda r: r.max_rel_error)
    ok = all(r.passed for r in results) and elapsed < 120 and main(["gradcheck"]) == 0
    report(1, ok, f"{len(results)} ops, worst rel err {worst.max_rel_error:.2e} ({worst.op}), {elapsed:.1f}s")
    assert ok


def test_criterion_2_equivalence_oracles():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 6, 3, 3)) * 3 + 2
    aff = N.AffineParams(rng.uniform(0.5, 2, 6), rng.standard_normal(6))
    errs = {}

    def diff(a, b):
        return float(np.max(np.abs(a - b)))

    errs["GN(1)=LN"] = diff(N.norm_forward(N.GN(1), x, aff)[0], N.norm_forward(N.LN, x, aff)[0])
    errs["GN(C)=IN"] = diff(N.norm_forward(N.GN(6), x, aff)[0], N.norm_forward(N.IN, x, aff)[0])
    errs["BN(n=1)=IN"] = diff(
        N.norm_forward(N.BN, x, aff, shard=N.ShardConfig(4, 1))[0], N.norm_forward(N.IN, x, aff)[0]
    )
    worst_onehot = 0.0
    for member in S.MEMBERS:
        layer = S.SNLayer(S.apply_hard(S.RatioState(), S.HardRatio(member, member)), aff)
        y, _ = S.sn_forward(x, layer)
        worst_onehot = max(worst_onehot, diff(y, N.norm_forward(S.KINDS[member], x, aff)[0]))
    errs["SN one-hot"] = worst_onehot

    bn = train(tiny(norm="bn", epochs=3))
    sn = train(tiny(norm="sn", omega=("BN",), epochs=3))
    step_err = max(abs(a - b) for a, b in zip(bn.step_losses, sn.step_losses))
    ok = max(errs.values()) <= 1e-12 and step_err <= 1e-10 and len(bn.step_losses) == len(sn.step_losses)
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    report(2, ok, f"{detail}, SN{{BN}} vs BN per-step loss {step_err:.1e} over {len(bn.step_losses)} steps")
    assert ok


def test_criterion_3_brute_force_oracle():
    rng = np.random.default_rng(3)
    subsets = [s for k in (1, 2, 3) for s in itertools.combinations(S.MEMBERS, k)]
    worst = 0.0
    cases = 0
    for aggregation in S.AGGREGATIONS:
        for _ in range(100):
            shards = int(rng.choice([1, 2]))
            n = shards * int(rng.integers(1, 3))
            c, h, w = (int(v) for v in rng.integers(1, 4, 3))
            omega = subsets[rng.integers(len(subsets))]
            x = rng.standard_normal((n, c, h, w)) * rng.uniform(0.1, 3) + rng.uniform(-2, 2)
            state = S.RatioState(omega, False, rng.standard_normal(len(omega)) * 2, rng.standard_normal(len(omega)) * 2)
            layer = S.SNLayer(state, N.AffineParams(rng.uniform(0.5, 2, c), rng.standard_normal(c)), sigma_aggregation=aggregation)
            y, _ = S.sn_forward(x, layer, N.ShardConfig(shards, n // shards))
            ref = switchable_loops(x, omega, state.lambda_mu, state.lambda_sigma, layer.affine.gamma, layer.affine.beta, layer.eps, aggregation, shards)
            worst = max(worst, float(np.max(np.abs(y - ref))))
            cases += 1
    ok = worst <= 1e-12
    report(3, ok, f"{cases} random cases over both aggregations, worst abs err {worst:.1e}")
    assert ok


def test_criterion_4_simplex_invariants():
    soft = train(tiny(epochs=3))
    tied = train(tiny(epochs=3, tied=True))
    worst = 0.0
    in_range = True
    for rec in soft.trajectory.records + tied.trajectory.records:
        for lam in (rec.lambda_mu, rec.lambda_sigma):
            in_range &= bool(np.all(lam >= 0) and np.all(lam <= 1))
            worst = max(worst, abs(math.fsum(lam) - 1.0))
    tied_exact = all(np.array_equal(r.lambda_mu, r.lambda_sigma) for r in tied.trajectory.records)
    ok = in_range and worst <= 1e-9 and tied_exact
    n = len(soft.trajectory.records) + len(tied.trajectory.records)
    report(4, ok, f"{n} logged rows, max |sum-1| {worst:.1e}, tied rows identical: {tied_exact}")
    assert ok


def test_criterion_5_divergence_analytics():
    rng = np.random.default_rng(5)
    worst = 0.0
    symmetric = True
    identity = True
    for _ in range(1000):
        p, q = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(3))
        worst = max(worst, abs(A.kl_divergence(p, q) - kl_terms(p, q)))
        worst = max(worst, abs(A.sym_divergence(p, q) - (kl_terms(p, q) + kl_terms(q, p))))
        symmetric &= A.sym_divergence(p, q) == A.sym_divergence(q, p)
        identity &= A.sym_divergence(p, p) == 0.0
    worked = A.sym_divergence((0.5, 0.25, 0.25), (0.25, 0.5, 0.25))
    worked_err = abs(worked - 0.5 * math.log(2))
    ok = worst <= 1e-12 and symmetric and identity and worked_err <= 1e-15
    report(5, ok, f"1000 pairs, worst err {worst:.1e}, symmetric {symmetric}, D(p,p)=0 {identity}, worked value err {worked_err:.1e}")
    assert ok


def test_criterion_6_receptive_fields():
    rng = np.random.default_rng(0)
    matches = 0
    for _ in range(20):
        spec = random_spec(rng)
        rfs = A.receptive_fields(spec)
        marked = rf_by_marking(spec, 512)
        matches += {k: rfs[k][0] for k in marked} == marked
    metas = A.layer_metas(resnet50_spec())
    first, last = metas[0].rf, metas[-1].rf
    ok = matches == 20 and (first, last) == (7, 427)
    report(6, ok, f"{matches}/20 random specs match delta marking, ResNet50 norm RF {first}..{last} over {len(metas)} layers")
    assert ok


@pytest.mark.slow
def test_criterion_7_small_batch_lowers_bn_ratio(trend_runs, tmp_path):
    start = time.perf_counter()
    pairs = {s: (bn_ratio(trend_runs(s, 32).trajectory), bn_ratio(trend_runs(s, 2).trajectory)) for s in SEEDS}
    elapsed = time.perf_counter() - start
    A.export_trajectory(trend_runs(0, 32).trajectory, tmp_path / "b32.csv")
    A.export_trajectory(trend_runs(0, 2).trajectory, tmp_path / "b2.csv")
    code = main(["compare", str(tmp_path / "b32.csv"), str(tmp_path / "b2.csv"), "--output-dir", str(tmp_path / "cmp")])
    with open(tmp_path / "cmp" / "compare_mu.csv") as fh:
        cross = max(float(r["divergence"]) for r in csv.DictReader(fh))
    ok = all(b2 < b32 for b32, b2 in pairs.values()) and code == 0 and cross > 0
    detail = ", ".join(f"seed {s}: (4,32) {b32:.4f} vs (4,2) {b2:.4f}" for s, (b32, b2) in pairs.items())
    report(7, ok, f"mean final BN ratio {detail}; compare exit {code}, max cross divergence {cross:.3g}; {elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_8_hard_ratio_workflow(trend_runs, trend_data, tmp_path):
    extra = 10
    rows = []
    for seed in SEEDS:
        soft = trend_runs(seed, 32)
        cont_cfg = trend(per_shard=32, seed=seed, epochs=TREND["epochs"] + extra)
        cont = train(cont_cfg, resume=Snapshot.from_bytes(soft.snapshot.to_bytes()), dataset=trend_data)
        hard = harden_finetune(Snapshot.from_bytes(soft.snapshot.to_bytes()), cont_cfg, dataset=trend_data)
        path = tmp_path / f"soft{seed}.bin"
        soft.snapshot.save(path)
        scratch = train(cont_cfg.with_overrides(hard_init_from=str(path)), dataset=trend_data)
        rows.append((seed, cont.metrics[-1]["test_acc"], hard.metrics[-1]["test_acc"], scratch.metrics[-1]["test_acc"]))
    gaps = [abs(s - h) * 100 for _, s, h, _ in rows]
    mean_soft = np.mean([r[1] for r in rows])
    mean_scratch = np.mean([r[3] for r in rows])
    ok = max(gaps) <= 2.0 and mean_scratch <= mean_soft
    detail = "; ".join(f"seed {s}: soft {a:.4f} finetune {b:.4f} scratch {c:.4f}" for s, a, b, c in rows)
    report(8, ok, f"{detail}; max |finetune-soft| {max(gaps):.2f} pp, mean scratch {mean_scratch:.4f} vs soft {mean_soft:.4f}")
    assert ok


@pytest.mark.slow
def test_criterion_9_subset_ablation(trend_runs, trend_data, tmp_path):
    table = ["| omega | test_acc | final mean ratios (mu) | valid simplex |", "|---|---|---|---|"]
    full = trend_runs(0, 32)
    results = [("IN,LN,BN", full)]
    for omega in itertools.combinations(S.MEMBERS, 2):
        results.append((",".join(omega), train(trend(per_shard=32, seed=0, omega=omega), dataset=trend_data)))
    ok = True
    for label, run in results:
        members = label.split(",")
        fin = run.trajectory.final()
        valid = len(run.trajectory.epochs()) == TREND["epochs"]
        for rec in run.trajectory.records:
            for lam in (rec.lambda_mu, rec.lambda_sigma):
                unused = [lam[i] for i, m in enumerate(S.MEMBERS) if m not in members]
                valid &= all(v == 0.0 for v in unused) and abs(math.fsum(lam) - 1) <= 1e-9 and bool(np.all(lam >= 0))
        mean_mu = np.mean([r.lambda_mu for r in fin.values()], axis=0)
        ratios = " ".join(f"{m}={v:.3f}" for m, v in zip(S.MEMBERS, mean_mu) if m in members)
        table.append(f"| {label} | {run.metrics[-1]['test_acc']:.4f} | {ratios} | {valid} |")
        if label != "IN,LN,BN":
            ok &= valid
    (tmp_path / "ablation.md").write_text("\n".join(table) + "\n")
    print("\n".join(table))
    report(9, ok, "two-member subsets trained with valid logs; table: " + " / ".join(table[2:]))
    assert ok


def test_criterion_10_determinism_and_persistence(tmp_path):
    cfg = tiny(epochs=3)
    a, b = train(cfg), train(cfg)
    save_run(a, cfg, tmp_path / "a")
    save_run(b, cfg, tmp_path / "b")
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in ("metrics.csv", "trajectory.csv"))
    part = train(tiny(epochs=1))
    part.snapshot.save(tmp_path / "part.bin")
    resumed = train(cfg, resume=Snapshot.load(tmp_path / "part.bin"))
    bitwise = part.step_losses + resumed.step_losses == a.step_losses
    bitwise &= resumed.snapshot.to_bytes() == a.snapshot.to_bytes()
    ok = same and bitwise
    report(10, ok, f"byte-identical CSVs {same}, resume matches uninterrupted run bitwise {bitwise}")
    assert ok
