"""Acceptance criteria 1-12.

Criteria 1-7 are fast oracle checks. Criteria 8-12 share four desk-scale
training runs (reference, repeat, motion, motion ablation) that are built
once per session; expect roughly 25 minutes per run on one core.
"""
import itertools
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from echorecon.cdc import commitment_loss, ema_update, quantize
from echorecon.evaluate import (
    extract_features, frechet_feature_distance, frechet_from_moments, metrics, probe_fit, reconstruct, run_eval,
)
from echorecon.nets import Discriminators, PatchGrid, Translator, pooled
from echorecon.syndata import DatasetConfig, generate_dataset, load_dataset
from echorecon.train import (TrainConfig, Trainer, adv_losses, load_model, read_losses, recon_loss,
                             train)
from echorecon.transport import MemoryBank, dis_loss, ot_loss, sinkhorn, sort_match

ROOT = Path(__file__).resolve().parents[1]
REFERENCE = TrainConfig.load(ROOT / "configs" / "reference.json")
BUDGET_S = 30 * 60
N_SHUFFLES = 20


def measured(record_property, text: str) -> None:
    record_property("measured", text)
    print(text)


# ---------------------------------------------------------------------------
# 1-7: oracle criteria


@pytest.mark.criterion(1)
def test_quantizer_matches_exhaustive_search(record_property):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(1000):
        k, d = int(rng.integers(2, 33)), int(rng.integers(1, 9))
        n, h, w = (int(v) for v in rng.integers(1, 5, size=3))
        z = torch.from_numpy(rng.standard_normal((k, d)).astype(np.float32))
        p = torch.from_numpy(rng.standard_normal((n, d)).astype(np.float32))
        f = torch.from_numpy(rng.standard_normal((n, h, w, d)).astype(np.float32))
        res = quantize(f, z, p)
        x = res.shifted.reshape(-1, d).double().numpy()
        zz = z.double().numpy()
        dist = ((x[:, None, :] - zz[None, :, :]) ** 2).sum(-1)
        oracle = dist.argmin(axis=1)  # first index on ties
        mismatches += int((res.indices.reshape(-1).numpy() != oracle).sum())
    elapsed = time.perf_counter() - t0
    measured(record_property, f"1000 instances, {mismatches} mismatches, {elapsed:.2f}s")
    assert mismatches == 0
    assert elapsed < 10.0


@pytest.mark.criterion(2)
def test_ema_matches_closed_form(record_property):
    rng = np.random.default_rng(102)
    worst = 0.0
    for _ in range(200):
        k, d = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        omega = float(rng.uniform(1e-3, 1.0))
        z0 = torch.from_numpy(rng.standard_normal((k, d)))
        vec = torch.from_numpy(rng.standard_normal((3, d)))
        idx = torch.from_numpy(rng.integers(0, k, size=3))
        z = z0.clone()
        ema_update(z, torch.ones(k, dtype=torch.float64), idx, vec, omega)
        expect = z0.clone()
        for j in range(k):
            hit = (idx == j).numpy()
            if hit.any():
                expect[j] = (1 - omega) * z0[j] + omega * vec[hit].mean(0)
        worst = max(worst, float((z - expect).abs().max()))
        # two steps toward a fixed target compose into one step of weight 1 - (1 - w)^2
        z2 = z0[:1].clone()
        for _ in range(2):
            ema_update(z2, torch.ones(1, dtype=torch.float64), torch.tensor([0]), vec[:1], omega)
        two = (1 - omega) ** 2 * z0[:1] + (1 - (1 - omega) ** 2) * vec[:1]
        worst = max(worst, float((z2 - two).abs().max()))
    measured(record_property, f"max deviation {worst:.2e}")
    assert worst <= 1e-12


def _perm_oracle(a: np.ndarray, b: np.ndarray) -> float:
    j = a.shape[0]
    perms = np.array(list(itertools.permutations(range(j))))
    total = 0.0
    for i in range(a.shape[1]):
        costs = ((a[None, :, i] - b[perms, i]) ** 2).sum(axis=1)
        total += float(costs.min())
    return total


@pytest.mark.criterion(3)
def test_sort_match_equals_permutation_minimum(record_property):
    rng = np.random.default_rng(103)
    t0 = time.perf_counter()
    exact_misses, worst_rel = 0, 0.0
    for n in range(500):
        j, d = int(rng.integers(1, 7)), int(rng.integers(1, 4))
        if n % 2 == 0:
            # dyadic grid values: every sum is exact in float64, so equality is bitwise
            a = rng.integers(-256, 257, size=(j, d)) / 64.0
            b = rng.integers(-256, 257, size=(j, d)) / 64.0
            exact_misses += sort_match(a, b)[1] != _perm_oracle(a, b)
        else:
            a, b = rng.standard_normal((j, d)), rng.standard_normal((j, d))
            cost, ref = sort_match(a, b)[1], _perm_oracle(a, b)
            worst_rel = max(worst_rel, abs(cost - ref) / max(ref, 1e-300))
    elapsed = time.perf_counter() - t0
    measured(record_property, f"500 instances, {exact_misses} exact misses, continuous rel {worst_rel:.1e}, {elapsed:.2f}s")
    assert exact_misses == 0
    assert worst_rel <= 1e-12
    assert elapsed < 30.0


@pytest.mark.criterion(4)
def test_sinkhorn_marginals_closeness_and_monotonicity(record_property):
    rng = np.random.default_rng(104)
    schedule = (0.5, 0.1, 0.02, 1e-3)
    worst_marg, worst_gap, worst_rise, converged = 0.0, 0.0, 0.0, 0
    for _ in range(100):
        a, b = rng.standard_normal(8), rng.standard_normal(8)
        c = (a[:, None] - b[None, :]) ** 2
        exact = sort_match(a, b)[1]
        costs = []
        for eps in schedule:
            tp = sinkhorn(c, eps=eps, max_iters=20000, tol=1e-6)
            if tp.converged:
                converged += 1
                # recomputed from the plan itself rather than taken from the solver's report
                marg = max(np.abs(tp.plan.sum(1) - 1 / 8).max(), np.abs(tp.plan.sum(0) - 1 / 8).max())
                worst_marg = max(worst_marg, float(marg))
            costs.append(8 * float((tp.plan * c).sum()))  # uniform 1/J marginals: back to the summed pair cost
        worst_gap = max(worst_gap, abs(costs[-1] - exact) / exact)
        worst_rise = max(worst_rise, max(later - earlier for earlier, later in zip(costs, costs[1:])))
    measured(record_property, f"{converged}/400 converged, marginal err {worst_marg:.1e}, "
                              f"eps=1e-3 gap {100 * worst_gap:.2f}%, max rise {worst_rise:.1e}")
    assert converged > 0
    assert worst_marg <= 1e-6
    assert worst_gap <= 0.05
    assert worst_rise <= 0.0


def _fd_check(fn, x: torch.Tensor, analytic: torch.Tensor, picks: int, rng) -> float:
    """Worst relative error of central differences at ``picks`` random coordinates."""
    h = 1e-3
    flat = x.reshape(-1)
    worst = 0.0
    for i in rng.choice(flat.numel(), size=min(picks, flat.numel()), replace=False):
        e = torch.zeros_like(flat)
        e[i] = h
        with torch.no_grad():
            num = float((fn((flat + e).reshape(x.shape)) - fn((flat - e).reshape(x.shape))) / (2 * h))
        ana = float(analytic.reshape(-1)[i])
        worst = max(worst, abs(num - ana) / max(abs(num), 1e-10))
    return worst


@pytest.mark.criterion(5)
def test_gradient_suite(record_property):
    torch.manual_seed(105)
    rng = np.random.default_rng(105)
    t = Translator(1, dim=4, n_entries=8, max_frames=2).double()
    clip = torch.rand(1, 2, 8, 8, 1, dtype=torch.float64)
    with torch.no_grad():
        feats = t.encoder(clip)
        rows = feats.reshape(-1, 4)
        t.codebook.entries.copy_(rows[torch.arange(8) % len(rows)] + 0.1 * torch.randn(8, 4, dtype=torch.float64))
        t.codebook.initialized.fill_(1.0)
        out, q = t(clip)
    errs = {}

    # reconstruction, w.r.t. the translated clip (kept away from the L1 kink)
    target = clip.clone()
    x_rec = (out + 0.05 * torch.sign(out - target)).detach().requires_grad_(True)
    recon_loss(target, x_rec).backward()
    errs["recon_loss"] = _fd_check(lambda v: recon_loss(target, v), x_rec.detach(), x_rec.grad, 40, rng)

    # commitment: only the second term reaches the encoder side
    shifted = q.shifted.detach().requires_grad_(True)
    codes = q.codes.detach()
    commitment_loss(shifted, codes, 0.25).backward()
    # the stop-gradient is invisible to finite differences, so difference the second term alone
    second = lambda v: 0.25 * commitment_loss(v, codes, 0.25, return_terms=True)[2]
    errs["commitment_loss"] = _fd_check(second, shifted.detach(), shifted.grad, 32, rng)

    # dis_loss against a fixed centroid
    pa = pooled(q.quantized).detach().requires_grad_(True)
    centroid = torch.randn(4, dtype=torch.float64)
    dis_loss(pa, centroid).backward()
    errs["dis_loss"] = _fd_check(lambda v: dis_loss(v, centroid), pa.detach(), pa.grad, 4, rng)

    # ot_loss through the current-feature substitution
    bank_a, bank_b = MemoryBank(6, 4).double(), MemoryBank(6, 4).double()
    for _ in range(6):
        bank_a.push(torch.randn(4, dtype=torch.float64))
        bank_b.push(torch.randn(4, dtype=torch.float64) + 1.0)
    cur = pa.detach()[0].clone().requires_grad_(True)
    other = torch.randn(4, dtype=torch.float64)
    ot_loss(bank_a, bank_b, cur, other).backward()
    errs["ot_loss"] = _fd_check(lambda v: ot_loss(bank_a, bank_b, v, other), cur.detach(), cur.grad, 4, rng)

    # generator adversarial loss w.r.t. the translated clip
    discs = Discriminators().double()
    grid = PatchGrid.for_frame(8, 8, 4)
    fake = out.detach().requires_grad_(True)
    adv_losses(fake, clip, grid, discs, part="generator")[0].backward()
    errs["adversarial"] = _fd_check(lambda v: adv_losses(v, clip, grid, discs, part="generator")[0],
                                    fake.detach(), fake.grad, 40, rng)
    measured(record_property, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()))
    assert max(errs.values()) <= 1e-4


@pytest.mark.criterion(6)
def test_adversarial_term_count(record_property):
    discs = Discriminators().double()
    with torch.no_grad():
        for p in discs.parameters():
            p.zero_()
    grid = PatchGrid.for_frame(112, 112, 16)
    assert (grid.grid_h, grid.grid_w) == (7, 7)
    clip = torch.rand(1, 16, 112, 112, 1, dtype=torch.float64)
    with torch.no_grad():
        _, disc = adv_losses(clip, torch.rand_like(clip), grid, discs, part="discriminator")
    expect = (1 + 16 + 49) * 2 * -math.log(0.5)
    measured(record_property, f"{float(disc):.12f} vs {expect:.12f}")
    assert abs(float(disc) - expect) <= 1e-12 * expect


@pytest.mark.criterion(7)
def test_frechet_cases(record_property):
    rng = np.random.default_rng(107)
    x = rng.standard_normal((50, 6))
    y = 2.0 * rng.standard_normal((40, 6)) + 0.3
    same = frechet_feature_distance(x, x.copy())
    uni = frechet_from_moments([0.0], [[1.0]], [1.0], [[4.0]])
    asym = abs(frechet_feature_distance(x, y) - frechet_feature_distance(y, x))
    measured(record_property, f"identical {same:.1e}, univariate {uni:.12f}, asymmetry {asym:.1e}")
    assert same <= 1e-9
    assert abs(uni - 2.0) <= 1e-9
    assert asym <= 1e-9


# ---------------------------------------------------------------------------
# 8-12: desk-scale runs


def _dataset(tmp_path_factory, anomaly: str) -> Path:
    root = tmp_path_factory.mktemp(f"data_{anomaly}")
    cfg = DatasetConfig(n_normal=125, n_abnormal=125, anomaly=anomaly, n_frames=16, size=64)
    generate_dataset(cfg, 0, root)
    return root


def _run(tmp_path_factory, name: str, cfg: TrainConfig, data: Path) -> dict:
    out = tmp_path_factory.mktemp(name)
    t0 = time.perf_counter()
    ckpt = train(cfg, data, out, deterministic=True, log=lambda s: print(f"[{name}] {s}", flush=True))
    return {"ckpt": ckpt, "dir": out, "seconds": time.perf_counter() - t0, "data": data}


@pytest.fixture(scope="module")
def structural_data(tmp_path_factory):
    return _dataset(tmp_path_factory, "structural")


@pytest.fixture(scope="module")
def motion_data(tmp_path_factory):
    return _dataset(tmp_path_factory, "motion")


@pytest.fixture(scope="module")
def reference_run(tmp_path_factory, structural_data):
    return _run(tmp_path_factory, "reference", REFERENCE, structural_data)


@pytest.fixture(scope="module")
def reference_repeat(tmp_path_factory, structural_data):
    return _run(tmp_path_factory, "reference_repeat", REFERENCE, structural_data)


@pytest.fixture(scope="module")
def motion_run(tmp_path_factory, motion_data):
    return _run(tmp_path_factory, "motion", REFERENCE, motion_data)


@pytest.fixture(scope="module")
def motion_ablation(tmp_path_factory, motion_data):
    cfg = TrainConfig.from_json({**REFERENCE.to_json(), "use_cdc": False, "w_ot": 0.0})
    return _run(tmp_path_factory, "motion_ablation", cfg, motion_data)


def _features(run: dict) -> dict:
    if "features" not in run:
        m = load_dataset(run["data"])
        recs = {s: m.split(s) for s in ("train", "test")}
        clips = {s: [m.load(r)[0] for r in recs[s]] for s in recs}
        run["features"] = {s: extract_features(run["ckpt"], clips[s]) for s in recs}
        run["records"] = recs
    return run


def _cls_targets(records) -> np.ndarray:
    return np.array([0.0 if r.cls == "normal" else 1.0 for r in records])


def _probe(run: dict, task: str = "cls", shuffle_seed: int | None = None):
    run = _features(run)
    recs, feats = run["records"], run["features"]
    if task == "cls":
        y_tr, y_te, kind = _cls_targets(recs["train"]), _cls_targets(recs["test"]), "classification"
    else:
        y_tr = np.array([r.ef_analog for r in recs["train"]])
        y_te = np.array([r.ef_analog for r in recs["test"]])
        kind = "regression"
    if shuffle_seed is not None:
        y_tr = np.random.default_rng(shuffle_seed).permutation(y_tr)
    probe = probe_fit(feats["train"], y_tr, kind)
    return metrics(probe.predict(feats["test"]), y_te, kind)


@pytest.mark.slow
@pytest.mark.criterion(8)
def test_determinism_of_full_runs(record_property, reference_run, reference_repeat):
    a = read_losses(reference_run["dir"] / "losses.csv")
    b = read_losses(reference_repeat["dir"] / "losses.csv")
    assert list(a) == list(b) and len(a["epoch"]) == REFERENCE.epochs
    worst = 0.0
    for k in a:
        both_nan = np.isnan(a[k]) & np.isnan(b[k])
        diff = np.where(both_nan, 0.0, np.abs(a[k] - b[k]))
        worst = max(worst, float(np.nan_to_num(diff, nan=np.inf).max()))
    same_bytes = reference_run["ckpt"].read_bytes() == reference_repeat["ckpt"].read_bytes()
    measured(record_property, f"max losses.csv diff {worst:.1e}, checkpoints identical: {same_bytes}")
    assert worst <= 1e-12
    assert same_bytes


@pytest.mark.slow
@pytest.mark.criterion(9)
def test_structural_end_to_end(record_property, reference_run, tmp_path):
    rep = run_eval(reference_run["ckpt"], reference_run["data"], "cls", tmp_path, log=print)
    minutes = reference_run["seconds"] / 60
    measured(record_property, f"structural ACC {rep.acc:.3f} AUC {rep.auc:.3f} in {minutes:.1f} min "
                              f"({torch.get_num_threads()} thread)")
    assert reference_run["seconds"] <= BUDGET_S
    assert rep.acc >= 0.90
    assert rep.auc >= 0.95


@pytest.mark.slow
@pytest.mark.criterion(9)
def test_motion_end_to_end(record_property, motion_run):
    rep = _probe(motion_run)
    measured(record_property, f"motion ACC {rep.acc:.3f} in {motion_run['seconds'] / 60:.1f} min")
    assert motion_run["seconds"] <= BUDGET_S
    assert rep.acc >= 0.80


@pytest.mark.slow
@pytest.mark.criterion(9)
def test_shuffled_label_control(record_property, reference_run):
    # a single 25-clip test split makes one permutation's AUC very noisy; average over many
    aucs = [_probe(reference_run, shuffle_seed=s).auc for s in range(N_SHUFFLES)]
    mean = float(np.mean(aucs))
    measured(record_property, f"shuffled AUC mean {mean:.3f} over {N_SHUFFLES} permutations "
                              f"(range {min(aucs):.2f}-{max(aucs):.2f})")
    assert abs(mean - 0.5) <= 0.15


@pytest.mark.slow
@pytest.mark.criterion(10)
def test_ef_regression(record_property, motion_run):
    rep = _probe(motion_run, task="reg")
    measured(record_property, f"EF-analog MAE {rep.mae:.4f} on {rep.n_samples} test clips")
    assert rep.mae <= 0.08


@pytest.mark.slow
@pytest.mark.criterion(11)
def test_separation_dynamics(record_property, reference_run):
    log = read_losses(reference_run["dir"] / "losses.csv")
    ot = log["ot"]
    dis = log["dis_A"] + log["dis_B"]
    ratio = ot[-1] / ot[0]
    first, last = float(dis[:5].mean()), float(dis[-5:].mean())
    measured(record_property, f"OT epoch1 {ot[0]:.2f} -> final {ot[-1]:.2f} (x{ratio:.1f}); "
                              f"dis first5 {first:.4f} last5 {last:.4f}")
    assert ot[-1] >= 3 * ot[0]
    assert last < first


@pytest.mark.slow
@pytest.mark.criterion(12)
def test_ablation_direction(record_property, motion_run, motion_ablation):
    full, ablated = _probe(motion_run), _probe(motion_ablation)
    table = ["| model | AUC | ACC |", "|---|---|---|",
             f"| full | {full.auc:.3f} | {full.acc:.3f} |",
             f"| no codebook, w_ot=0 | {ablated.auc:.3f} | {ablated.acc:.3f} |"]
    print("\n".join(table))
    (motion_ablation["dir"] / "ablation.md").write_text("\n".join(table) + "\n")
    measured(record_property, f"full AUC {full.auc:.3f} vs ablated {ablated.auc:.3f}")
    assert ablated.auc < full.auc


# ---------------------------------------------------------------------------
# further reference-run properties


@pytest.mark.slow
def test_recon_moving_average_non_increasing(reference_run):
    log = read_losses(reference_run["dir"] / "losses.csv")
    recon = (log["recon_X"] + log["recon_Y"])[:20]
    ma = np.convolve(recon, np.ones(5) / 5, mode="valid")
    print("5-epoch moving average:", np.round(ma, 4).tolist())
    assert np.all(np.diff(ma) <= 0)


@pytest.mark.slow
def test_trained_reconstructions_closer_than_untrained(reference_run):
    m = load_dataset(reference_run["data"])
    test = m.split("test")
    normal = [m.load(r)[0] for r in test if r.cls == "normal"]
    abnormal = [m.load(r)[0] for r in test if r.cls != "normal"]
    untrained = Trainer(REFERENCE).model
    # lazily initialized codebooks need one pass of data before quantizing
    with torch.no_grad():
        for tr in (untrained.phi_A, untrained.phi_B):
            frames = torch.from_numpy(np.stack(normal[:2]).astype(np.float32))
            tr.codebook.ema_update(tr.quantize(tr.encoder(frames)), np.random.default_rng(0))

    # both generators are scored in the trained encoder's feature space
    judge = load_model(reference_run["ckpt"])[:2]
    real = extract_features(judge, normal)

    def ffd(model_or_ckpt):
        fake = [reconstruct(model_or_ckpt, clip, "b2a") for clip in abnormal]
        return frechet_feature_distance(real, extract_features(judge, fake))

    trained = ffd(reference_run["ckpt"])
    random_ = ffd((untrained, REFERENCE))
    print(f"FFD trained {trained:.4f} vs untrained {random_:.4f}")
    assert random_ > trained
