"""Acceptance gates: one test per headline guarantee, at the stated tolerance.

Each test is self-contained evidence: gradient correctness, attention
normalization, residual identities, label-assignment equivalence, loss and
metric algebra, end-to-end tracking quality, the directional module study,
training mechanics, and the template-update gate.
"""

import math
import time

import numpy as np
import pytest

from siamfuse.attention import attend, project
from siamfuse.crops import template_crop
from siamfuse.data_synth import (
    SequenceSpec,
    TripletConfig,
    draw_triplet_indices,
    generate_sequence,
    sample_triplet,
)
from siamfuse.experiments import (
    BASELINE_ARM,
    FUSION_ARM,
    benchmark_records,
    mean_iou,
    run_benchmark,
    train_arm,
    training_records,
)
from siamfuse.metrics import ao_sr, iou_xywh, precision_at, success_auc
from siamfuse.model import ModelConfig, TrackerModel
from siamfuse.rpn_head import (
    AnchorConfig,
    LossWeights,
    assign_labels_center_distance,
    assign_labels_iou,
    generate_anchors,
    smooth_l1,
    total_loss,
)
from siamfuse.search_augmentation import augment_search, init_augment_params
from siamfuse.template_fusion import TemplateTriple, fuse_templates, init_fusion_params
from siamfuse.tensor import (
    Tensor,
    bce_with_logits,
    channel_bias_add,
    conv2d,
    depthwise_correlate,
    grad_check,
    linear,
    matmul,
    maxpool2d,
    softmax_cross_entropy,
    softmax_rows,
)
from siamfuse.tracker import FrameResult, TrackerConfig, init_state, maybe_update_template, track_sequence
from siamfuse.training import TrainConfig, train

# Shared constants for the trained-model gates. The seed is fixed so the
# whole suite exercises one reproducible training run per configuration.
ACCEPT_SEED = 1
FALLBACK_SEEDS = (0, 2, 3, 4, 5)
LINEAR_SEQUENCE_SEED = 2004


@pytest.fixture(scope="session")
def train_set():
    return training_records(12)


@pytest.fixture(scope="session")
def bench_set():
    return benchmark_records(10)


@pytest.fixture(scope="session")
def fusion_model(train_set):
    model, _ = train_arm(FUSION_ARM, train_set, ACCEPT_SEED, train_cfg=TrainConfig.desk())
    return model


@pytest.fixture(scope="session")
def baseline_model(train_set):
    model, _ = train_arm(BASELINE_ARM, train_set, ACCEPT_SEED, train_cfg=TrainConfig.desk())
    return model


# -- 1: gradient suite ---------------------------------------------------------


def test_gradient_suite_every_op_and_both_modules(capsys):
    """Central finite differences agree with backprop, rel err < 1e-4, 64-bit.

    Twenty random instances per op, every coordinate checked; the whole
    suite must finish inside two minutes.
    """
    t0 = time.monotonic()
    rng = np.random.default_rng(0)
    counts: dict[str, int] = {}

    def check(name, f, x):
        res = grad_check(f, Tensor(x))
        assert res.passed, f"{name}: max rel error {res.max_rel_error:.3e} at {res.worst_index}"
        counts[name] = counts.get(name, 0) + 1

    for i in range(20):
        # Every random quantity is drawn once, outside the closures: grad_check
        # re-evaluates f per coordinate and needs it deterministic.
        v = rng.normal(size=(3, 4))
        u = rng.normal(size=(3, 4))
        m = rng.normal(size=(4, 3))
        scalar = float(rng.normal())
        mix26 = rng.normal(size=(2, 6))
        mix34 = rng.normal(size=(3, 4))
        check("add", lambda t: (t + Tensor(u)).sum(), v)
        check("add_scalar", lambda t: (t + scalar).sum(), v)
        check("neg", lambda t: (-t).sum(), v)
        check("sub", lambda t: (t - Tensor(u)).mean(), v)
        check("rsub", lambda t: (1.0 - t).mean(), v)
        check("mul", lambda t: (t * Tensor(u)).sum(), v)
        check("mul_scalar", lambda t: (t * 2.5).sum(), v)
        check("matmul", lambda t: matmul(t, Tensor(m)).sum(), v)
        check("transpose2d", lambda t: (t.transpose2d() * Tensor(m)).sum(), v)
        check("reshape", lambda t: (t.reshape(2, 6) * Tensor(mix26)).sum(), v)
        v_off_kink = np.where(np.abs(v) < 0.05, v + 0.1, v)
        check("relu", lambda t: t.relu().sum(), v_off_kink)
        check("sum", lambda t: t.sum(), v)
        check("mean", lambda t: t.mean(), v)
        idx = rng.integers(0, v.size, size=5)
        mix5 = rng.normal(size=5)
        check("take", lambda t: (t.take(idx) * Tensor(mix5)).sum(), v)

        w = rng.normal(size=(4, 4))
        b = rng.normal(size=4)
        check("linear_x", lambda t: linear(t, Tensor(w), Tensor(b)).sum(), v)
        check("linear_w", lambda t: linear(Tensor(v), t, Tensor(b)).sum(), w)
        check("softmax_rows", lambda t: (softmax_rows(t) * Tensor(mix34)).sum(), v)

        img = rng.normal(size=(2, 6, 6))
        kern = rng.normal(size=(3, 2, 3, 3))
        feat344 = rng.normal(size=(3, 4, 4))
        bias3 = rng.normal(size=3)
        pool_in = rng.normal(size=(2, 6, 6))
        check("conv2d_x", lambda t: conv2d(t, Tensor(kern), stride=1, padding=1).sum(), img)
        check("conv2d_w", lambda t: conv2d(Tensor(img), t, stride=2, padding=0).sum(), kern)
        check("channel_bias", lambda t: channel_bias_add(Tensor(feat344), t).sum(), bias3)
        check("maxpool2d", lambda t: maxpool2d(t).sum(), pool_in)

        search = rng.normal(size=(3, 7, 7))
        templ = rng.normal(size=(3, 3, 3))
        check("dwcorr_search", lambda t: depthwise_correlate(t, Tensor(templ)).sum(), search)
        check("dwcorr_template", lambda t: depthwise_correlate(Tensor(search), t).sum(), templ)

        logits = rng.normal(size=(6, 2))
        labels = rng.integers(0, 2, size=6)
        check("pair_ce", lambda t: softmax_cross_entropy(t, labels), logits)
        btarget = rng.integers(0, 2, size=(2, 3, 3)).astype(float)
        blogits = rng.normal(size=(2, 3, 3))
        check("bce", lambda t: bce_with_logits(t, btarget), blogits)
        l1_target = rng.normal(size=(5, 4)) * 2.0
        l1_pred = rng.normal(size=(5, 4)) * 2.0
        check("smooth_l1", lambda t: smooth_l1(t, l1_target), l1_pred)

        q = rng.normal(size=(5, 6))
        k = rng.normal(size=(5, 6))
        vv = rng.normal(size=(5, 6))
        proj_w = rng.normal(size=(6, 6)) * 0.4
        proj_b = rng.normal(size=6)
        check("attend_q", lambda t: attend(t, Tensor(k), Tensor(vv))[0].sum(), q)
        check("attend_k", lambda t: attend(Tensor(q), t, Tensor(vv))[0].sum(), k)
        check("attend_v", lambda t: attend(Tensor(q), Tensor(k), t)[0].sum(), vv)
        check("project", lambda t: project(t, Tensor(proj_w), Tensor(proj_b)).sum(), q)

    # The two attention blocks end to end, against every input leaf.
    c, hw = 6, 4
    for i in range(20):
        block_rng = np.random.default_rng(100 + i)
        fp = init_fusion_params(c, block_rng)
        # Move the zero-initialized output filter off zero so gradients flow
        # through the whole block rather than collapsing to the identity path.
        fp.filter_w.data[:] = block_rng.normal(size=fp.filter_w.shape) * 0.3
        fi = block_rng.normal(size=(c, hw, hw))
        fa = block_rng.normal(size=(c, hw, hw))
        fc = block_rng.normal(size=(c, hw, hw))
        for name, base in (("fuse_initial", fi), ("fuse_accumulated", fa), ("fuse_current", fc)):
            def run_fusion(t, which=name):
                triple = TemplateTriple(
                    t if which == "fuse_initial" else Tensor(fi),
                    t if which == "fuse_accumulated" else Tensor(fa),
                    t if which == "fuse_current" else Tensor(fc),
                )
                return fuse_templates(triple, fp).sum()
            check(name, run_fusion, base)

        ap = init_augment_params(c, block_rng)
        ap.filters[-1].data[:] = block_rng.normal(size=ap.filters[-1].shape) * 0.3
        ft = block_rng.normal(size=(c, hw, hw))
        fs = block_rng.normal(size=(c, hw + 2, hw + 2))
        check("augment_template", lambda t: augment_search(t, Tensor(fs), ap).sum(), ft)
        check("augment_search", lambda t: augment_search(Tensor(ft), t, ap).sum(), fs)

    elapsed = time.monotonic() - t0
    assert all(n >= 20 for n in counts.values()), counts
    assert elapsed < 120.0, f"gradient suite took {elapsed:.1f}s"
    with capsys.disabled():
        print(f"\n[acceptance] gradient suite: PASS "
              f"({sum(counts.values())} checks over {len(counts)} ops, {elapsed:.1f}s)")


# -- 2: attention normalization ------------------------------------------------


def test_attention_rows_stochastic_on_1000_inputs(capsys):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 13))
        m = int(rng.integers(1, 13))
        d = int(rng.integers(1, 17))
        scale = float(rng.choice([0.1, 1.0, 10.0]))
        q = Tensor(rng.normal(size=(n, d)) * scale)
        k = Tensor(rng.normal(size=(m, d)) * scale)
        v = Tensor(rng.normal(size=(m, d)))
        _, weights = attend(q, k, v)
        assert weights.shape == (n, m)
        assert (weights.data >= 0).all()
        worst = max(worst, float(np.abs(weights.data.sum(axis=1) - 1.0).max()))
    assert worst <= 1e-6, f"worst row-sum deviation {worst:.2e}"
    with capsys.disabled():
        print(f"\n[acceptance] attention row-stochastic: PASS (worst deviation {worst:.2e})")


# -- 3: residual identities ------------------------------------------------------


def test_zero_initialized_blocks_are_bit_exact_identities(capsys):
    rng = np.random.default_rng(2)
    for trial in range(50):
        c = int(rng.integers(2, 10))
        hw = int(rng.integers(2, 7))
        fp = init_fusion_params(c, rng)          # output filter starts at zero
        ap = init_augment_params(c, rng)
        fi = rng.normal(size=(c, hw, hw))
        triple = TemplateTriple(Tensor(fi), Tensor(rng.normal(size=(c, hw, hw))),
                                Tensor(rng.normal(size=(c, hw, hw))))
        fused = fuse_templates(triple, fp)
        assert fused.data.tobytes() == fi.tobytes(), f"fusion not an identity at init (trial {trial})"

        fs = rng.normal(size=(c, hw + 3, hw + 3))
        out = augment_search(Tensor(fi), Tensor(fs), ap)
        assert out.data.tobytes() == fs.tobytes(), f"augmentation not an identity at init (trial {trial})"
    with capsys.disabled():
        print("\n[acceptance] zero-init residual identities: PASS (bit-exact, 50 trials)")


# -- 4: label assignment oracles --------------------------------------------------


def _iou_scalar(ax, ay, aw, ah, bx, by, bw, bh):
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def test_label_assignment_matches_brute_force_oracles(capsys):
    rng = np.random.default_rng(3)
    for draw in range(1000):
        fh = int(rng.integers(1, 18))
        fw = int(rng.integers(1, 18))
        n_ratios = int(rng.integers(1, 4))
        ratios = tuple(float(r) for r in rng.uniform(0.3, 3.0, size=n_ratios))
        cfg = AnchorConfig(ratios=ratios, scale=float(rng.uniform(1.5, 4.0)), stride=8)
        search = 8 * max(fh, fw) + 32
        grid = generate_anchors(cfg, fh, fw, search)
        gt = np.array([
            rng.uniform(0, search * 0.8),
            rng.uniform(0, search * 0.8),
            rng.uniform(4, search * 0.5),
            rng.uniform(4, search * 0.5),
        ])

        thr_pos = float(rng.uniform(0.35, 0.75))
        thr_neg = float(rng.uniform(0.05, thr_pos))
        got = assign_labels_iou(grid, gt, thr_pos=thr_pos, thr_neg=thr_neg)
        want = np.full((cfg.num_anchors, fh, fw), -1, dtype=np.int8)
        for a in range(cfg.num_anchors):
            for i in range(fh):
                for j in range(fw):
                    cx, cy, w, h = grid.boxes[a, i, j]
                    iou = _iou_scalar(cx - w / 2, cy - h / 2, w, h, gt[0], gt[1], gt[2], gt[3])
                    if iou > thr_pos:
                        want[a, i, j] = 1
                    elif iou < thr_neg:
                        want[a, i, j] = 0
        assert np.array_equal(got.cls_pair, want), f"iou assignment mismatch on draw {draw}"
        assert np.array_equal(got.cls_binary, (want == 1).astype(float))

        thr = float(rng.uniform(0.5, 9.0))
        got_cd = assign_labels_center_distance(grid, gt, thr=thr)
        ccol = ((gt[0] - grid.origin) + (gt[0] + gt[2] - grid.origin)) / (2.0 * grid.stride)
        crow = ((gt[1] - grid.origin) + (gt[1] + gt[3] - grid.origin)) / (2.0 * grid.stride)
        want_cd = np.zeros((cfg.num_anchors, fh, fw), dtype=np.int8)
        for i in range(fh):
            for j in range(fw):
                d2 = (crow - i) ** 2 + (ccol - j) ** 2
                if d2 < thr:
                    want_cd[:, i, j] = 1
        assert np.array_equal(got_cd.cls_pair, want_cd), f"cd assignment mismatch on draw {draw}"
        assert np.array_equal(got_cd.cls_binary, (want_cd == 1).astype(float))
    with capsys.disabled():
        print("\n[acceptance] label-assignment oracle equivalence: PASS (1000 draws, exact)")


# -- 5: loss algebra ----------------------------------------------------------------


def test_loss_composition_and_smooth_l1_formula(capsys):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        lam_pair = float(rng.uniform(0.1, 3.0))
        lam_cls = float(rng.uniform(0.1, 3.0))
        pair = float(rng.uniform(0, 4))
        binary = float(rng.uniform(0, 4))
        reg = float(rng.uniform(0, 4))
        got = total_loss(Tensor(pair), Tensor(binary), Tensor(reg),
                         LossWeights(pair_weight=lam_pair, cls_weight=lam_cls)).item()
        want = lam_cls * (lam_pair * pair + binary) + reg
        worst = max(worst, abs(got - want))
    assert worst <= 1e-12, f"composite loss deviates by {worst:.2e}"

    pred = rng.normal(size=(40,)) * 2.0
    target = rng.normal(size=(40,)) * 2.0
    got = smooth_l1(Tensor(pred), target).item()
    x = pred - target
    want = float(np.mean(np.where(np.abs(x) < 1.0, 0.5 * x * x, np.abs(x) - 0.5)))
    assert abs(got - want) <= 1e-12
    both_branches = (np.abs(x) < 1).any() and (np.abs(x) >= 1).any()
    assert both_branches, "test data must exercise both smooth-L1 branches"
    with capsys.disabled():
        print(f"\n[acceptance] loss algebra: PASS (worst deviation {worst:.2e})")


# -- 6: metric oracles ---------------------------------------------------------------


def test_metric_counting_oracles_and_perfect_constants(capsys):
    rng = np.random.default_rng(5)
    taus = np.linspace(0, 1, 21)
    for _ in range(1000):
        n = int(rng.integers(1, 51))
        ious = rng.uniform(0, 1, size=n)
        ious[rng.uniform(size=n) < 0.1] = 0.0
        ious[rng.uniform(size=n) < 0.1] = 1.0
        errors = rng.uniform(0, 60, size=n)

        curve = np.array([sum(1 for v in ious if v > t) / n for t in taus])
        assert success_auc(ious) == curve.mean(), "success_auc deviates from its counting oracle"
        assert precision_at(errors) == sum(1 for e in errors if e <= 20.0) / n
        ao, sr50, sr75 = ao_sr(ious)
        assert sr50 == sum(1 for v in ious if v > 0.5) / n
        assert sr75 == sum(1 for v in ious if v > 0.75) / n
        assert abs(ao - math.fsum(ious) / n) <= 1e-12

    perfect = np.ones(17)
    assert success_auc(perfect) == 20 / 21
    assert precision_at(np.zeros(17)) == 1.0
    assert ao_sr(perfect) == (1.0, 1.0, 1.0)
    with capsys.disabled():
        print("\n[acceptance] metric counting oracles: PASS (1000 lists, exact)")


# -- 7: tracker sanity -----------------------------------------------------------------


def test_tracker_holds_a_linear_motion_target(fusion_model, capsys):
    record = generate_sequence(SequenceSpec(length=100, seed=LINEAR_SEQUENCE_SEED, speed=2.0))
    t0 = time.monotonic()
    run = track_sequence(fusion_model, record.frames, record.boxes[0])
    elapsed = time.monotonic() - t0
    ious = np.array([
        iou_xywh(p, g) for p, g in zip(run.boxes_xywh, record.boxes.astype(float))
    ])
    assert elapsed < 300.0, f"tracking took {elapsed:.1f}s"
    assert ious.mean() >= 0.5, f"mean IoU {ious.mean():.4f} below 0.5"
    lost = np.nonzero(ious[5:] == 0.0)[0]
    assert lost.size == 0, f"target lost (IoU 0) at frames {lost + 5}"
    with capsys.disabled():
        print(f"\n[acceptance] tracker sanity: PASS "
              f"(mean IoU {ious.mean():.4f}, min {ious.min():.4f}, {elapsed:.1f}s)")


# -- 8: directional ablation --------------------------------------------------------------


def test_attention_and_center_labels_beat_plain_baseline(
    fusion_model, baseline_model, train_set, bench_set, capsys
):
    full = mean_iou(run_benchmark(fusion_model, bench_set, jobs=4))
    base = mean_iou(run_benchmark(baseline_model, bench_set, jobs=4))
    if full > base:
        with capsys.disabled():
            print(f"\n[acceptance] directional study: PASS "
                  f"({FUSION_ARM.name} {full:.4f} > {BASELINE_ARM.name} {base:.4f})")
        return

    # Ordering failed at the default seed: repeat over fixed seed sets and
    # require it to hold in at least four of five.
    wins = 0
    outcomes = []
    for seed in FALLBACK_SEEDS:
        m_full, _ = train_arm(FUSION_ARM, train_set, seed, train_cfg=TrainConfig.desk())
        m_base, _ = train_arm(BASELINE_ARM, train_set, seed, train_cfg=TrainConfig.desk())
        f = mean_iou(run_benchmark(m_full, bench_set, jobs=4))
        b = mean_iou(run_benchmark(m_base, bench_set, jobs=4))
        wins += int(f > b)
        outcomes.append((seed, f, b))
    assert wins >= 4, (
        f"ordering held in only {wins}/5 seed sets "
        f"(default seed gave {full:.4f} vs {base:.4f}; fallback {outcomes})"
    )
    with capsys.disabled():
        print(f"\n[acceptance] directional study: PASS (fallback {wins}/5 seed sets)")


# -- 9: training mechanics ----------------------------------------------------------------


def test_training_mechanics_freeze_schedule_and_sampler(capsys):
    # Backbone stays bit-identical through the freeze window.
    records = [generate_sequence(SequenceSpec(length=12, seed=31))]
    model = TrackerModel.initialize(ModelConfig.desk(), seed=5)
    before = {k: v.data.copy() for k, v in model.parameters().items() if k.startswith("backbone.")}
    train(model, records, TrainConfig.desk(epochs=1, freeze_backbone_epochs=1,
                                           steps_per_epoch=5, batch_size=2, seed=6))
    for name, old in before.items():
        assert model.parameters()[name].data.tobytes() == old.tobytes(), f"{name} moved while frozen"

    # Exact lr endpoints on the full-scale schedule.
    sgd_cfg = TrainConfig().sgd_config()
    assert sgd_cfg.lr_at(0) == 0.005
    assert sgd_cfg.lr_at(49) == 0.0005

    # Sampler constraints: zero violations over 1e5 draws.
    rng = np.random.default_rng(7)
    tcfg = TripletConfig()
    n_frames = 60
    for _ in range(100_000):
        t_init, t_acc, t_cur, t_search = draw_triplet_indices(n_frames, tcfg, rng)
        lo = min(t_init, t_acc, t_cur, t_search)
        hi = max(t_init, t_acc, t_cur, t_search)
        assert hi - lo < tcfg.window, "indices span more than the sampling window"
        assert t_cur == t_acc + 1, "templates are not a consecutive pair"
        assert t_search == t_cur + 1, "search frame does not follow the pair"
        assert 0 <= lo and hi < n_frames

    # The full sampler reports the same indices it crops with.
    record = generate_sequence(SequenceSpec(length=60, seed=33))
    for _ in range(50):
        trip = sample_triplet(record, 32, 64, tcfg, rng)
        t_init, t_acc, t_cur, t_search = trip.indices
        assert t_cur == t_acc + 1 and t_search == t_cur + 1
        assert max(trip.indices) - min(trip.indices) < tcfg.window
    with capsys.disabled():
        print("\n[acceptance] training mechanics: PASS (freeze, lr endpoints, 1e5 sampler draws)")


# -- 10: template update gate ------------------------------------------------------------------


def test_template_update_gate_threshold(fusion_model, capsys):
    assert TrackerConfig().update_threshold == 1.18

    record = generate_sequence(SequenceSpec(length=4, seed=41))
    tcfg = TrackerConfig()
    model = fusion_model
    state = init_state(record.frames[0], record.boxes[0], model, tcfg)
    acc_before = state.accumulated.copy()
    cur_before = state.current.copy()

    low = FrameResult(box_xywh=record.boxes[1].astype(float), confidence=1.18, raw_confidence=1.18)
    assert maybe_update_template(record.frames[1], low, state, model, tcfg) is False
    assert state.accumulated.tobytes() == acc_before.tobytes()
    assert state.current.tobytes() == cur_before.tobytes()
    assert not low.updated

    just_below = FrameResult(box_xywh=record.boxes[1].astype(float), confidence=1.1799,
                             raw_confidence=1.1799)
    assert maybe_update_template(record.frames[1], just_below, state, model, tcfg) is False
    assert state.accumulated.tobytes() == acc_before.tobytes()

    high = FrameResult(box_xywh=record.boxes[1].astype(float), confidence=1.1801,
                       raw_confidence=1.1801)
    assert maybe_update_template(record.frames[1], high, state, model, tcfg) is True
    crop = template_crop(record.frames[1], state.box, model.cfg.backbone.template_size)
    want_current = model.extract(crop).data
    want_accumulated = model.fuse(
        TemplateTriple(Tensor(state.initial), Tensor(acc_before), Tensor(want_current))
    ).data
    assert state.current.tobytes() == want_current.tobytes()
    assert state.accumulated.tobytes() == want_accumulated.tobytes()
    assert high.updated and state.updates == 1
    with capsys.disabled():
        print("\n[acceptance] template update gate: PASS "
              "(1.18 inclusive hold, above-threshold refresh verified bit-exact)")
