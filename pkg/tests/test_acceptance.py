"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Criteria 6-8 train a desk-scale model (about 15 minutes on one CPU core).
"""
import os
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE
from desk import FINETUNE_MODES, Desk
from oracles import loop_cross_attention, loop_relevance
from relmerge.attention import AttnProjections, cross_attention, decoupled_cross_attention, normalize_relevance, \
    relevance_map
from relmerge.curation import quality_from_embeddings, score_manifest, select_top_k
from relmerge.diffusion.checkpoint import read_checkpoint, save_checkpoint
from relmerge.diffusion.model import DenoiserConfig, init_params
from relmerge.diffusion.sampling import Denoiser, ddim_sample, ddim_timesteps
from relmerge.diffusion.schedule import add_noise, make_schedule
from relmerge.diffusion.train import DenoiserLoss, TrainBatch, condition_dropout
from relmerge.evalkit.bench import GenSettings, generate, make_bench, sample_seed
from relmerge.evalkit.harness import RelevanceExperimentConfig, compare_strategies
from relmerge.evalkit.report import bench_metrics
from relmerge.merge import TextWeightLayer, trained_weighted_merge, uniform_merge, weighted_merge
from relmerge.numkit import Rng, grad_check
from relmerge.scenekit.dataset import Manifest, build_dataset
from relmerge.scenekit.embed import StubEmbedder
from relmerge.scenekit.scenes import tokenize

EVAL = GenSettings(steps=50, guidance=7.5, t_start=150)


def verdict(capsys, n, ok, detail):
    ACCEPTANCE.append((n, bool(ok), detail))
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"criterion {n}: {detail}"


@pytest.fixture(scope="module")
def desk():
    root = os.environ.get("RELMERGE_DESK_DIR")
    if root:
        Path(root).mkdir(parents=True, exist_ok=True)
        yield Desk(Path(root))
        return
    with tempfile.TemporaryDirectory(prefix="desk-") as tmp:
        yield Desk(Path(tmp))


# ---------------------------------------------------------------------------- 1

def test_criterion_1_reduction_identities(capsys):
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    bad = []
    for trial in range(300):
        n, d, m = rng.integers(1, 17), rng.integers(1, 9), rng.integers(1, 5)
        zt = rng.normal(size=(n, d))
        zi = [rng.normal(size=(n, d)) for _ in range(m)]
        flat = [np.full(n, rng.uniform(0.01, 2.0)) for _ in range(m)]
        maps = [rng.uniform(0.01, 1, n) for _ in range(m)]
        if weighted_merge(zt, zi, flat).tobytes() != uniform_merge(zt, zi).tobytes():
            bad.append(("uniform maps", trial))
        f0 = TextWeightLayer.zeros(int(d))
        if trained_weighted_merge(zt, zi, maps, f0).tobytes() != weighted_merge(zt, zi, maps).tobytes():
            bad.append(("zero f", trial))
        z = rng.normal(size=(n, 5))
        p = AttnProjections(*(rng.normal(size=s) for s in [(5, 4), (3, 4), (3, 4), (6, 4), (6, 4)]))
        ct, ci = rng.normal(size=(2, 3)), rng.normal(size=(3, 6))
        single = uniform_merge(cross_attention(z, ct, p.w_k_text, p.w_v_text, p.w_q),
                               [cross_attention(z, ci, p.w_k_img, p.w_v_img, p.w_q)])
        if single.tobytes() != decoupled_cross_attention(z, ct, ci, p).tobytes():
            bad.append(("M=1", trial))
    dt = time.perf_counter() - t0
    verdict(capsys, 1, not bad and dt < 1.0, f"300 trials x 3 identities bitwise, mismatches={bad[:3]}, {dt:.3f}s")


# ---------------------------------------------------------------------------- 2

def test_criterion_2_attention_matches_loop_oracle(capsys):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        n, s = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        d_lat, d_c, d = (int(v) for v in rng.integers(1, 7, 3))
        z, c = rng.normal(size=(n, d_lat)), rng.normal(size=(s, d_c))
        p = AttnProjections(rng.normal(size=(d_lat, d)), rng.normal(size=(d_c, d)), rng.normal(size=(d_c, d)),
                            rng.normal(size=(2, d)), rng.normal(size=(2, d)))
        got = cross_attention(z, c, p.w_k_text, p.w_v_text, p.w_q)
        worst = max(worst, np.abs(got - loop_cross_attention(z, c, p.w_k_text, p.w_v_text, p.w_q)).max())
        worst = max(worst, np.abs(relevance_map(z, c, p) - loop_relevance(z, c, p.w_k_text, p.w_q)).max())
    dt = time.perf_counter() - t0
    verdict(capsys, 2, worst <= 1e-9 and dt < 10, f"1000 trials, max |diff| {worst:.2e} (tol 1e-9), {dt:.2f}s")


# ---------------------------------------------------------------------------- 3

def test_criterion_3_relevance_distribution(capsys):
    rng = np.random.default_rng(2)
    sum_err = mean_err = perm_err = 0.0
    for _ in range(100):
        n, s = int(rng.integers(2, 65)), int(rng.integers(1, 5))
        z, c = rng.normal(size=(n, 6)) * 3, rng.normal(size=(s, 4))
        p = AttnProjections(rng.normal(size=(6, 5)), rng.normal(size=(4, 5)), rng.normal(size=(4, 5)),
                            rng.normal(size=(3, 5)), rng.normal(size=(3, 5)))
        a = relevance_map(z, c, p)
        sum_err = max(sum_err, abs(a.sum() - 1))
        mean_err = max(mean_err, abs(normalize_relevance(a).mean() - 1))
        perm = rng.permutation(n)
        perm_err = max(perm_err, np.abs(relevance_map(z[perm], c, p) - a[perm]).max())
    ok = sum_err <= 1e-9 and mean_err <= 1e-9 and perm_err <= 1e-12
    verdict(capsys, 3, ok, f"100 cases: |sum-1| {sum_err:.1e}, |mean-1| {mean_err:.1e}, "
                           f"permutation error {perm_err:.1e}")


# ---------------------------------------------------------------------------- 4

def test_criterion_4_gradient_checks(capsys):
    t0 = time.perf_counter()
    cfg = DenoiserConfig(h=2, w=2, d_model=8, d_text=8, d_img=8, n_layers=2, merge_mode="trained", T=50)
    params = init_params(cfg, 1, np.float64)
    r = Rng(3)
    for k in params:
        if k.endswith(("f_w", "f_b")):
            params[k] = 0.5 * r.normal(params[k].shape)
    prompts = [tokenize("a red circle and a blue star"), tokenize("a green square")]
    objs = [[tokenize("red circle"), tokenize("blue star")], [tokenize("green square")]]
    refs = [[r.normal(cfg.d_clip), r.normal(cfg.d_clip)], [r.normal(cfg.d_clip)]]
    batch = TrainBatch(r.normal((2, 4, 3)), np.array([7, 30]), r.normal((2, 4, 3)), prompts, objs, refs)
    loss = DenoiserLoss(params, cfg, batch, make_schedule(cfg.T))
    errs = {f"l{l}.{k}": grad_check(loss, {f"l{l}.{k}": params[f"l{l}.{k}"]})
            for l in range(2) for k in ("k_img", "v_img", "f_w", "f_b")}
    worst = max(errs, key=errs.get)
    dt = time.perf_counter() - t0
    verdict(capsys, 4, errs[worst] <= 1e-4 and dt < 60,
            f"W_img^K, W_img^V, w_f, b_f in 2 layers: max rel err {errs[worst]:.1e} ({worst}), {dt:.1f}s")


# ---------------------------------------------------------------------------- 5

def test_criterion_5_schedule_and_sampler(capsys):
    sched = make_schedule(1000)
    vp = np.abs(sched.alpha ** 2 + sched.sigma ** 2 - 1).max()
    x0 = np.random.default_rng(3).uniform(-1, 1, (4, 64, 3))
    ident = add_noise(x0, np.random.default_rng(4).normal(size=x0.shape), 0, sched).tobytes() == x0.tobytes()

    class Oracle:
        def null_conditions(self, cond):
            return cond

        def predict(self, x, t, cond, *, step, conditional):
            return (x - sched.alpha[t] * x0) / sched.sigma[t]

    rec = np.abs(ddim_sample(Oracle(), sched, None, 50, 7.5, [1, 2, 3, 4], shape=(64, 3)) - x0).max()
    cfg = DenoiserConfig(d_model=16, d_text=16, d_img=16, n_layers=1)
    params = init_params(cfg, 0)
    items = make_bench(2, 0)
    runs = [generate(params, cfg, sched, items, [5, 6], GenSettings(steps=5, t_start=200)).latents
            for _ in range(2)]
    det = runs[0].tobytes() == runs[1].tobytes()
    ok = vp <= 1e-9 and ident and rec <= 1e-3 and det
    verdict(capsys, 5, ok, f"max|a^2+s^2-1| {vp:.1e}, add_noise(t=0) identity {ident}, "
                           f"oracle DDIM max err {rec:.1e}, bit-deterministic {det}")


# ---------------------------------------------------------------------------- 6

@pytest.mark.slow
def test_criterion_6_object_relevance_direction(desk, capsys):
    t0 = time.time()
    params, cfg, _ = desk.base()
    train_time = time.time() - t0
    items = make_bench(100, 7)
    conf = RelevanceExperimentConfig(items, noise_scale=1.0, seed=0, gen=EVAL)
    t1 = time.time()
    cmp = compare_strategies(params, cfg, desk.sched, conf)
    total = train_time + time.time() - t1
    ok = cmp.weighted.score > cmp.uniform.score and cmp.ci_low > 0 and total < 1800
    verdict(capsys, 6, ok, f"S_object_relevance uniform {cmp.uniform.score:.4f}, weighted {cmp.weighted.score:.4f}; "
                           f"diff {cmp.diff_mean:.4f} 95% CI [{cmp.ci_low:.4f}, {cmp.ci_high:.4f}] over "
                           f"{cmp.n_pairs} prompts; train+harness {total / 60:.1f} min")


# ---------------------------------------------------------------------------- 7

@pytest.mark.slow
def test_criterion_7_merge_mode_ordering(desk, capsys):
    emb = StubEmbedder()
    items = make_bench(200, 1)
    per_seed = {}
    for mode in FINETUNE_MODES:
        params, cfg = desk.finetuned(mode)
        vals = []
        for k in range(5):
            gen = generate(params, cfg, desk.sched, items, [sample_seed(0, it.index, k) for it in items], EVAL)
            vals.append(bench_metrics(gen, items, cfg, emb)["image_match"].mean())
        per_seed[mode] = np.array(vals)
    m = {k: v.mean() for k, v in per_seed.items()}
    ok = m["uniform"] < m["weighted"] <= m["trained"]
    seeds_ok = {f"{a}<{b}": int(np.sum(per_seed[a] < per_seed[b]))
                for a, b in (("uniform", "weighted"), ("weighted", "trained"))}
    verdict(capsys, 7, ok, "image_match mean over 5 seeds: " + ", ".join(f"{k} {v:.4f}" for k, v in m.items())
            + f"; per-seed wins {seeds_ok}")


# ---------------------------------------------------------------------------- 8

@pytest.mark.slow
def test_criterion_8_overlap_drops_after_training(desk, capsys):
    items = make_bench(50, 2)
    seeds = [sample_seed(0, it.index, 0) for it in items]

    def overlap(params, cfg):
        from relmerge.evalkit.report import mean_pair_overlap
        gen = generate(params, cfg, desk.sched, items, seeds, EVAL, record=True)
        return float(np.mean([mean_pair_overlap(m, 2) for m in gen.relevance]))

    trained = overlap(*desk.base()[:2])
    untrained = overlap(*desk.untrained())
    verdict(capsys, 8, trained < untrained,
            f"mean attention_overlap on 50 two-object prompts: untrained {untrained:.4f}, "
            f"after weighted-merge training {trained:.4f}")


@pytest.mark.slow
def test_desk_training_loss_decreases(desk, capsys):
    _, _, losses = desk.base()
    blocks = losses[:len(losses) // 1000 * 1000].reshape(-1, 1000).mean(axis=1)
    ma = np.convolve(losses, np.ones(200) / 200, "valid")
    with capsys.disabled():
        print(f"\n1000-step block means {np.round(blocks, 4).tolist()}; 200-step moving average "
              f"{ma[0]:.4f} -> {ma[-1]:.4f}")
    assert np.all(np.diff(blocks) < 0) and ma[-1] < ma[0]


# ---------------------------------------------------------------------------- 9

def test_criterion_9_curation(tmp_path, capsys):
    m = score_manifest(build_dataset(1000, 3, tmp_path / "planted", duplicate_fraction=0.5))
    distinct = {r["id"] for r in m.records if r["planted"] != "duplicate"}
    kept = {r["id"] for r in select_top_k(m, 500, "total").records}
    recall = len(kept & distinct) / len(distinct)
    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    a = quality_from_embeddings([e1, e2], [e1, e2])
    b = quality_from_embeddings([e1, e1], [e1, e1])
    hand = (a.single_object, a.object_pair, a.total) == (1.0, 0.0, 1.0) and \
           (b.single_object, b.object_pair, b.total) == (1.0, -1.0, 0.0)
    verdict(capsys, 9, recall >= 0.95 and hand,
            f"distinct-half recall at k=500: {recall:.3f} (need 0.95); hand examples 1+0={a.total}, "
            f"1+(-1)={b.total}")


# ---------------------------------------------------------------------------- 10

def test_criterion_10_condition_dropout(capsys):
    n = 100_000
    b = TrainBatch(np.zeros((n, 1, 1)), np.ones(n, int), np.zeros((n, 1, 1)), [[2]] * n, [[]] * n, [[]] * n)
    out = condition_dropout(b, Rng(10), 0.05, 0.05, 0.05)
    freq = {"text": np.mean(out.drop_text & ~out.drop_image), "image": np.mean(out.drop_image & ~out.drop_text),
            "both": np.mean(out.drop_text & out.drop_image)}
    ok = all(abs(v - 0.05) <= 0.005 for v in freq.values())
    verdict(capsys, 10, ok, "10^5 draws: " + ", ".join(f"{k} {v:.4f}" for k, v in freq.items()) + " (0.05 +/- 0.005)")


# ---------------------------------------------------------------------------- 11

def _digest(path: Path) -> str:
    import hashlib
    h = hashlib.sha256()
    for p in sorted(path.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(path).as_posix().encode() + b"\0" + p.read_bytes())
    return h.hexdigest()


def test_criterion_11_plumbing(tmp_path, capsys):
    from relmerge.cli import main
    cfg = DenoiserConfig()
    params = init_params(cfg, 4)
    save_checkpoint(params, tmp_path / "m.mipw", {"model": cfg.to_dict()})
    back, meta = read_checkpoint(tmp_path / "m.mipw")
    ckpt_ok = list(back) == list(params) and all(back[k].tobytes() == params[k].tobytes() for k in params) \
        and meta == {"model": cfg.to_dict()}

    m = build_dataset(20, 5, tmp_path / "d")
    m.save(tmp_path / "copy")
    m2 = Manifest.load(tmp_path / "copy")
    strip = lambda r: {k: v for k, v in r.items() if k != "image_path"}
    manifest_ok = [strip(r) for r in m.records] == [strip(r) for r in m2.records] and \
        m.embeddings.tobytes() == m2.embeddings.tobytes() and \
        all(np.array_equal(m.image(i), m2.image(i)) for i in range(len(m)))

    fast = ["--set", "sample_steps=4", "--set", "d_model=16", "--set", "d_text=16", "--set", "d_img=16",
            "--set", "n_layers=1"]
    w = tmp_path / "w"
    commands = {
        "gen-data": ["gen-data", "--n", "10", "--seed", "7", "--out", "{o}"],
        "score": ["score", "--manifest", str(w / "gen-data-a"), "--embedder", "stub", "--out", "{o}"],
        "select": ["select", "--manifest", str(w / "score-a"), "--k", "5", "--by", "pair", "--out", "{o}"],
        "train": ["train", "--data", str(w / "select-a"), "--steps", "3", "--seed", "2", "--set", "batch_size=2",
                  "--ckpt-out", "{o}/m.mipw"] + fast,
        "sample": ["sample", "--ckpt", str(w / "train-a" / "m.mipw"), "--prompt", "a red circle and a blue star",
                   "--seed", "3", "--n-samples", "2", "--steps", "4", "--out", "{o}"],
        "verify-relevance": ["verify-relevance", "--ckpt", str(w / "train-a" / "m.mipw"), "--n-prompts", "3",
                             "--allow-few", "--seed", "4", "--out", "{o}"] + fast,
        "eval": ["eval", "--ckpt", str(w / "train-a" / "m.mipw"), "--bench-size", "2", "--n-samples", "2",
                 "--seed", "5", "--out", "{o}"] + fast,
        "report": ["report", "--in", str(w / "eval-a" / "eval.csv"), "--out", "{o}"],
    }
    results = {}
    for name, args in commands.items():
        codes, digests = [], []
        for run in "ab":
            out = w / f"{name}-{run}"
            codes.append(main([a.format(o=out) for a in args]))
            digests.append(_digest(out))
        results[name] = codes == [0, 0] and digests[0] == digests[1]
    cli_ok = all(results.values())
    verdict(capsys, 11, ckpt_ok and manifest_ok and cli_ok,
            f"checkpoint bit-exact {ckpt_ok}, manifest lossless {manifest_ok}, "
            f"CLI deterministic {[k for k, v in results.items() if v]} failing {[k for k, v in results.items() if not v]}")
