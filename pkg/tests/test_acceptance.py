"""Acceptance suite.

Every test carries ``criterion(key, title)``; the conftest folds them into one
PASS/FAIL line per criterion after the run. The desk benchmark (seed 42,
250 synthetic pairs split 200/50, 30 epochs, all seven variants plus an
untrained checkpoint) is trained once per module and shared.
"""
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import pytest
import torch

from jointattn.apps.coseg import cosegment_from_heatmaps, slico
from jointattn.apps.summarize import annotated_seconds, random_selection, summarize, summary_metrics
from jointattn.cli import main as cli_main
from jointattn.datakit import SynthConfig, generate_synthetic
from jointattn.evaluation import discrimination_from_distances, evaluate_variant, sample_eval_triplets
from jointattn.losses import (LOG2, LossConfig, SingularityError, attention_loss, batch_loss, importance_weight,
                              pair_distance, total_loss, triplet_loss, triplet_loss_stable, triplet_loss_verbatim)
from jointattn.model import (AttentionConfig, ChannelAttention, JointAttentionNet, apply_attention, embed,
                             extract_features, roa_heatmap)
from jointattn.trainer import VARIANTS, TrainConfig, fd_check, gradient_check, moving_average, train

criterion = pytest.mark.criterion

FD_TOL = 1e-4
DRAWS = 20
# central differences in float64: h = 1e-4 keeps round-off (~1e-12 |f| / h)
# well under the tolerance for gradients that vanish by symmetry, while the
# truncation error (~h^2) stays negligible for these smooth functions
FD_STEP = 1e-4
FD_COORDS = 60


# -- shared desk benchmark ------------------------------------------------------------

@dataclass
class Bench:
    synth: object
    train_m: object
    test_m: object
    rows: dict = field(default_factory=dict)
    nets: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)


@pytest.fixture(scope="module")
def bench():
    t = time.perf_counter()
    synth = generate_synthetic(SynthConfig(), 42, 250)
    train_m, test_m = synth.split(200)
    b = Bench(synth, train_m, test_m)
    b.seconds["generate"] = time.perf_counter() - t
    cfg = TrainConfig(seed=42, epochs=30)
    triplets = sample_eval_triplets(test_m, 1000, cfg.seed, cfg.sampler_config())
    runs = [("untrained", replace(cfg, epochs=0))] + [(v, replace(cfg, variant=v)) for v in VARIANTS]
    for name, vcfg in runs:
        t = time.perf_counter()
        net, rep = train(vcfg, train_m, synth.frames)
        variant = "full" if name == "untrained" else name
        b.rows[name] = evaluate_variant(net, synth.frames, test_m, triplets, variant, synth.truth)
        b.nets[name], b.reports[name] = net, rep
        b.seconds[name] = time.perf_counter() - t
    return b


# -- 1. gradient correctness -----------------------------------------------------------

def _leaf(rng, *shape, scale=1.0):
    return torch.tensor(rng.normal(0, scale, size=shape), dtype=torch.float64, requires_grad=True)


def _attention64(rng, c):
    att = ChannelAttention(c, AttentionConfig()).double()
    with torch.no_grad():
        for p in att.parameters():
            p.copy_(torch.from_numpy(rng.normal(0, 0.5, size=tuple(p.shape))))
    return att


def _head64(rng, c):
    head = torch.nn.Linear(3 * c, 1).double()
    with torch.no_grad():
        for p in head.parameters():
            p.copy_(torch.from_numpy(rng.normal(0, 0.3, size=tuple(p.shape))))
    return head


def _separated(rng, n, gap=0.05):
    """d_pos, d_neg with |d_pos - d_neg| >= gap, away from the verbatim singularity."""
    dp = rng.uniform(0.1, 2.0, n)
    dn = rng.uniform(0.1, 2.0, n)
    close = np.abs(dp - dn) < gap
    dn[close] = dp[close] + gap * np.where(rng.random(close.sum()) < 0.5, -1, 1) * 2
    return (torch.tensor(dp, dtype=torch.float64, requires_grad=True),
            torch.tensor(dn, dtype=torch.float64, requires_grad=True))


def _worst_over_draws(make):
    worst = 0.0
    for draw in range(DRAWS):
        rng = np.random.default_rng([17, draw])
        fn, params = make(rng)
        worst = max(worst, fd_check(fn, params, step=FD_STEP, n_coords=FD_COORDS, rng=rng))
    return worst


@pytest.fixture(scope="module")
def grad_timer():
    return {"seconds": 0.0}


def _timed(grad_timer, make):
    t = time.perf_counter()
    worst = _worst_over_draws(make)
    grad_timer["seconds"] += time.perf_counter() - t
    return worst


@criterion("1", "gradient correctness (analytic vs central differences, float64)")
def test_grad_attention_loss(grad_timer, record_property):
    def make(rng):
        mx, my = _leaf(rng, 4, 16), _leaf(rng, 4, 16)
        return (lambda: attention_loss(mx, my).sum()), [mx, my]

    worst = _timed(grad_timer, make)
    record_property("L_AL", f"{worst:.1e}")
    assert worst < FD_TOL


@criterion("1", "gradient correctness (analytic vs central differences, float64)")
def test_grad_triplet_verbatim(grad_timer, record_property):
    def make(rng):
        dp, dn = _separated(rng, 6)
        return (lambda: triplet_loss_verbatim(dp, dn).sum()), [dp, dn]

    worst = _timed(grad_timer, make)
    record_property("TL_verbatim", f"{worst:.1e}")
    assert worst < FD_TOL


@criterion("1", "gradient correctness (analytic vs central differences, float64)")
def test_grad_triplet_stable(grad_timer, record_property):
    def make(rng):
        dp, dn = _leaf(rng, 6), _leaf(rng, 6)
        return (lambda: triplet_loss_stable(dp, dn).sum()), [dp, dn]

    worst = _timed(grad_timer, make)
    record_property("TL_stable", f"{worst:.1e}")
    assert worst < FD_TOL


@criterion("1", "gradient correctness (analytic vs central differences, float64)")
def test_grad_channel_attention_path(grad_timer, record_property):
    def make(rng):
        att = _attention64(rng, 16)
        feats = torch.tensor(np.abs(rng.normal(0, 1, (2, 16, 4, 4))), dtype=torch.float64, requires_grad=True)
        proj = torch.from_numpy(rng.normal(0, 1, (2, 16)))

        def fn():
            m = att(feats)
            return (embed(apply_attention(feats, m)) * proj).sum() + (m * proj).sum()

        return fn, [feats, *att.parameters()]

    worst = _timed(grad_timer, make)
    record_property("attention", f"{worst:.1e}")
    assert worst < FD_TOL


@criterion("1", "gradient correctness (analytic vs central differences, float64)")
def test_grad_learned_weight(grad_timer, record_property):
    def make(rng):
        head = _head64(rng, 8)
        pooled = _leaf(rng, 5, 24)
        per = torch.from_numpy(rng.uniform(0.1, 2.0, 5))
        return (lambda: (importance_weight("learned", pooled=pooled, head=head) * per).sum()), \
            [pooled, *head.parameters()]

    worst = _timed(grad_timer, make)
    record_property("weight", f"{worst:.1e}")
    assert worst < FD_TOL


@criterion("1", "gradient correctness (analytic vs central differences, float64)")
@pytest.mark.parametrize("variant", ["stable", "verbatim"])
def test_grad_full_composition(grad_timer, record_property, variant):
    cfg = LossConfig(triplet_variant=variant)

    def make(rng):
        c = 16
        att, head = _attention64(rng, c), _head64(rng, c)

        def terms(fx, fy, fz):
            ms = [att(f) for f in (fx, fy, fz)]
            ex, ey, ez = (embed(apply_attention(f, m)) for f, m in zip((fx, fy, fz), ms))
            return ms, pair_distance(ex, ey), pair_distance(ey, ez)

        while True:
            fx, fy, fz = (torch.tensor(np.abs(rng.normal(0, 1, (3, c, 4, 4))), dtype=torch.float64,
                                       requires_grad=True) for _ in range(3))
            with torch.no_grad():
                _, dp, dn = terms(fx, fy, fz)
            # near the verbatim pole the loss is too curved for any finite step
            if variant == "stable" or float((dp.exp() - dn.exp()).abs().min()) > 0.1:
                break

        def fn():
            ms, dp, dn = terms(fx, fy, fz)
            l_tl = triplet_loss(dp, dn, cfg)
            l_al = attention_loss(ms[0], ms[1])
            pooled = torch.cat([f.mean(dim=(-2, -1)) for f in (fx, fy, fz)], dim=1)
            w = importance_weight("learned", pooled=pooled, head=head)
            return batch_loss(l_tl, l_al, w, cfg.lam)

        return fn, [fx, fy, fz, *att.parameters(), *head.parameters()]

    try:
        worst = _timed(grad_timer, make)
    except SingularityError:
        pytest.fail("a random draw hit the verbatim singularity")
    record_property(f"total_{variant}", f"{worst:.1e}")
    assert worst < FD_TOL


@criterion("1", "gradient correctness (analytic vs central differences, float64)")
def test_grad_desk_model(grad_timer, record_property):
    t = time.perf_counter()
    torch.manual_seed(5)
    net = JointAttentionNet()
    with torch.no_grad():
        net.weight_head.weight.normal_(0, 0.05)
    g = torch.Generator().manual_seed(6)
    images = tuple(torch.rand(2, 3, 64, 64, generator=g) for _ in range(3))
    worst = gradient_check(net, images, step=1e-5, n_coords=200, seed=0)
    grad_timer["seconds"] += time.perf_counter() - t
    record_property("desk_model", f"{worst:.1e}")
    assert worst < FD_TOL


@criterion("1", "gradient correctness (analytic vs central differences, float64)")
def test_grad_runtime(grad_timer, record_property):
    record_property("seconds", f"{grad_timer['seconds']:.1f}")
    assert 0 < grad_timer["seconds"] < 60


# -- 2. formula oracles -----------------------------------------------------------------

@criterion("2", "formula oracles (filtering loop, verbatim triplet, singularity)")
def test_filtering_matches_loop():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        c, h, w = (int(v) for v in rng.integers(1, 9, 3))
        f = rng.normal(size=(c, h, w))
        m = rng.uniform(0, 1, c)
        out = apply_attention(torch.from_numpy(f), torch.from_numpy(m)).numpy()
        ref = np.empty_like(f)
        for k in range(c):
            for i in range(h):
                for j in range(w):
                    ref[k, i, j] = m[k] * f[k, i, j]
        worst = max(worst, float(np.abs(out - ref).max()))
    assert worst == 0.0


@criterion("2", "formula oracles (filtering loop, verbatim triplet, singularity)")
def test_verbatim_matches_scalar_math():
    rng = np.random.default_rng(1)
    dp, dn = rng.uniform(0, 3, 200), rng.uniform(0, 3, 200)
    keep = np.abs(np.exp(dp) - np.exp(dn)) >= 1e-8
    got = triplet_loss_verbatim(dp[keep], dn[keep]).numpy()
    ref = np.array([math.exp(a) / (math.exp(a) - math.exp(b)) for a, b in zip(dp[keep], dn[keep])])
    assert np.abs(got - ref).max() <= 1e-12 * np.maximum(1.0, np.abs(ref)).max()


@criterion("2", "formula oracles (filtering loop, verbatim triplet, singularity)")
def test_verbatim_singularity():
    with pytest.raises(SingularityError):
        triplet_loss_verbatim(0.7, 0.7)
    with pytest.raises(SingularityError):
        triplet_loss_verbatim(0.0, 5e-9)
    triplet_loss_verbatim(0.0, 2e-8)


# -- 3. trivial anchors -------------------------------------------------------------

@criterion("3", "trivial anchors")
def test_trivial_anchors():
    att = ChannelAttention(64)
    m = att(torch.zeros(1, 64, 8, 8))
    assert torch.equal(m, torch.full_like(m, 0.5))
    mm = torch.rand(64, dtype=torch.float64)
    assert float(attention_loss(mm, mm)) == 0.0
    assert float(triplet_loss_stable(0.4, 0.4)) == pytest.approx(LOG2, abs=1e-15)
    assert float(total_loss(1.0, 2.0, 1.0, 2.5)) == 6.0


# -- 4. desk benchmark -------------------------------------------------------------------

@criterion("4", "desk benchmark (seed 42, 200/50 pairs, 30 epochs)")
@pytest.mark.slow
def test_benchmark_accuracy(bench, record_property):
    full, nosa = bench.rows["full"], bench.rows["without_sa"]
    # null: independent distances give chance accuracy on the same triplet count
    rng = np.random.default_rng(0)
    null = np.mean([discrimination_from_distances(rng.random(1000), rng.random(1000))[0] for _ in range(200)])
    assert abs(null - 0.5) < 0.01
    record_property("acc_full", f"{full.accuracy:.3f}")
    record_property("acc_without_sa", f"{nosa.accuracy:.3f}")
    assert full.accuracy > 0.5 + 0.25
    assert full.accuracy > nosa.accuracy


@criterion("4", "desk benchmark (seed 42, 200/50 pairs, 30 epochs)")
@pytest.mark.slow
def test_benchmark_alignment(bench, record_property):
    full, untrained = bench.rows["full"], bench.rows["untrained"]
    record_property("err_full", f"{full.alignment_error:.2f}")
    record_property("err_untrained", f"{untrained.alignment_error:.2f}")
    record_property("acc_untrained", f"{untrained.accuracy:.3f}")
    record_property("hit_untrained", f"{untrained.hit_rate:.3f}")
    assert full.alignment_error < untrained.alignment_error


@criterion("4", "desk benchmark (seed 42, 200/50 pairs, 30 epochs)")
@pytest.mark.slow
def test_benchmark_heatmap_hits(bench, record_property):
    full, nosa = bench.rows["full"], bench.rows["without_sa"]
    record_property("hit_full", f"{full.hit_rate:.3f}")
    record_property("hit_without_sa", f"{nosa.hit_rate:.3f}")
    assert full.hit_rate >= 0.70
    assert full.hit_rate > nosa.hit_rate


@criterion("4", "desk benchmark (seed 42, 200/50 pairs, 30 epochs)")
@pytest.mark.slow
def test_benchmark_runtime(bench, record_property):
    used = sum(bench.seconds[k] for k in ("generate", "untrained", "full", "without_sa"))
    record_property("seconds", f"{used:.0f}")
    assert used <= 15 * 60


# -- 5. ablation ordering -----------------------------------------------------------------

@criterion("5", "full >= every ablation on pairs accuracy")
@pytest.mark.slow
def test_ablation_ordering(bench, record_property):
    accs = {v: bench.rows[v].accuracy for v in VARIANTS}
    record_property("acc", ", ".join(f"{v} {a:.3f}" for v, a in accs.items()))
    for v in VARIANTS:
        assert accs["full"] >= accs[v], v


# -- 6. summarization -------------------------------------------------------------------

@criterion("6", "summary F beats length-matched random selection (20 seeds)")
@pytest.mark.slow
def test_summary_beats_random(bench, record_property):
    net, store = bench.nets["full"], bench.synth.frames
    pairs = [p for p in bench.test_m if p.action_segments]
    assert pairs
    picked, ours = [], []
    for pair in pairs:
        n = pair.third_view.n_seconds
        ann = annotated_seconds(pair.action_segments, n)
        s = summarize(net, store, pair)
        picked.append((n, len(s.selected), ann))
        ours.append(summary_metrics(s.selected, ann)[2])
    baseline = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        baseline.append(np.mean([summary_metrics(random_selection(n, k, rng), ann)[2] for n, k, ann in picked]))
    f_ours, f_rand = float(np.mean(ours)), float(np.mean(baseline))
    record_property("F", f"{f_ours:.3f}")
    record_property("F_random", f"{f_rand:.3f}")
    assert f_ours > f_rand


# -- 7. co-segmentation -------------------------------------------------------------------

def _brute_force(img1, img3, lab1, lab3, peak1, peak3, alpha):
    """Independent scan over all candidate pairs; ties keep the first in row-major order."""

    def segments(img, lab):
        out = []
        for v in sorted(set(lab.ravel().tolist())):
            ys, xs = np.nonzero(lab == v)
            px = img[ys, xs]
            hist = []
            for ch in range(3):
                idx = np.minimum((px[:, ch] * 8).astype(int), 7)
                counts = np.bincount(idx, minlength=8).astype(float)
                hist.append(counts / counts.sum())
            out.append((v, xs.mean(), ys.mean(), np.concatenate(hist)))
        return out

    s1, s3 = segments(img1, lab1), segments(img3, lab3)
    d1, d3 = math.hypot(*img1.shape[:2]), math.hypot(*img3.shape[:2])
    best = None
    for v1, x1, y1, h1 in s1:
        for v3, x3, y3, h3 in s3:
            prox = math.hypot(x1 - peak1[0], y1 - peak1[1]) / d1 + math.hypot(x3 - peak3[0], y3 - peak3[1]) / d3
            app = 0.0
            for a, b in zip(h1, h3):
                if a + b > 0:
                    app += 0.5 * (a - b) ** 2 / (a + b)
            cost = alpha * prox + (1 - alpha) * app
            if best is None or cost < best[0]:
                best = (cost, v1, v3)
    return best, len(s1), len(s3)


@criterion("7", "co-segmentation equals brute-force minimum on every test image")
@pytest.mark.slow
def test_coseg_matches_brute_force(bench, record_property):
    net, store, truth = bench.nets["full"], bench.synth.frames, bench.synth.truth
    checked = 0
    for pair in bench.test_m:
        gt = truth[pair.pair_id]
        visible = [t for t, b in sorted(gt.boxes_third.items()) if b is not None]
        t3 = visible[len(visible) // 2] if visible else 0
        img3 = store.get(pair.pair_id, "third", t3)
        img1 = store.get(pair.pair_id, "first", gt.alignment[t3])
        heats = []
        for img in (img1, img3):
            f = extract_features(img, net)
            with torch.no_grad():
                m = net.attention(f[None])[0]
            heats.append(roa_heatmap(f, m, img.shape[0]).upsampled)
        res = cosegment_from_heatmaps(img1, img3, heats[0], heats[1], slico, 0.5)
        lab1, lab3 = slico(img1), slico(img3)
        peaks = [np.unravel_index(int(np.argmax(h)), h.shape)[::-1] for h in heats]
        (cost, v1, v3), n1, n3 = _brute_force(img1, img3, lab1, lab3, peaks[0], peaks[1], 0.5)
        assert n1 <= 50 and n3 <= 50
        assert res.labels == (v1, v3), pair.pair_id
        assert res.cost == pytest.approx(cost, rel=1e-12, abs=1e-12)
        checked += 1
    record_property("images", checked)
    assert checked == len(bench.test_m)


# -- 8. determinism --------------------------------------------------------------------------

@criterion("8", "two end-to-end CLI runs give byte-identical reports")
def test_end_to_end_determinism(tmp_path, record_property):
    def run(root):
        data = root / "data"
        steps = [
            ["gen-synth", "--pairs", 8, "--test-pairs", 3, "--seed", 11, "--out", data],
            ["train", "--manifest", data / "train.jsonl", "--epochs", 2, "--seed", 11, "--out", root / "run"],
            ["eval-pairs", "--checkpoint", root / "run" / "checkpoint.bin", "--manifest", data / "test.jsonl",
             "--n-triplets", 100, "--seed", 11, "--out", root / "eval"],
            ["eval-moments", "--checkpoint", root / "run" / "checkpoint.bin", "--manifest", data / "test.jsonl",
             "--out", root / "eval"],
        ]
        for argv in steps:
            assert cli_main([str(a) for a in argv]) == 0, argv[0]

    run(tmp_path / "a")
    run(tmp_path / "b")
    # the train report carries wall-clock timings, so only metrics and weights are compared
    names = ["eval/eval_pairs.json", "eval/eval_moments.json", "run/checkpoint.bin"]
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    record_property("files", len(names))


# -- training-curve property -------------------------------------------------------------------

@criterion("T", "desk training: 5-epoch moving-average total loss decreases monotonically")
@pytest.mark.slow
def test_moving_average_monotone(bench, record_property):
    ma = moving_average(bench.reports["full"].losses)
    rises = [(i, b - a) for i, (a, b) in enumerate(zip(ma, ma[1:])) if b >= a]
    record_property("rises", len(rises))
    if rises:
        i, r = max(rises, key=lambda x: x[1])
        record_property("largest_rise", f"{r:.4f}@window{i + 1}")
    assert not rises
