"""Acceptance suite: one test per criterion, each printing a PASS line.

The synthetic benchmark (criteria 5-7) trains four models on a generated
2000/300/300-study dataset; the session-scoped fixture runs once and the
criteria assert against its results. Budgets are asserted in wall-clock
seconds.
"""

import math
import time
import warnings

import numpy as np
import pytest

from helpers import auc_pair_count_oracle, check_grads, conv2d_oracle, matmul_oracle
from studyformer import tensor as T
from studyformer.assembly import assemble_square
from studyformer.backbone import DESK_BACKBONE, PAPER_BACKBONE, BackboneConfig, extract_features, init_backbone
from studyformer.checkpoint import bundle_equal, load_checkpoint, save_checkpoint
from studyformer.data import (
    SyntheticSpec,
    aggregate_study_labels,
    generate_synthetic_dataset,
    load_image,
    plan_study,
    split_by_study,
)
from studyformer.eval import evaluate_models, export_attention_map, roc_auc, roc_curve_points, tile_means, trapezoid_area
from studyformer.tensor import Tensor
from studyformer.train import TrainConfig, bce_loss, init_model_bundle, train_staged
from studyformer.vit import ViTConfig, classify, desk_vit_config, encode, init_vit, paper_vit_config, tokenize, tokenize_batch


def _passed(name):
    print(f"\nACCEPTANCE {name}: PASS")


# -- criterion 1: gradient suite -----------------------------------------------------


def test_gradient_suite():
    start = time.time()
    rng = np.random.default_rng(0)

    # every differentiable op, elementwise FD on small extents
    x = rng.uniform(0.2, 1.5, size=(4, 6))
    g, b = rng.standard_normal(6), rng.standard_normal(6)
    w65 = rng.standard_normal((6, 5))
    r45, r46 = rng.standard_normal((4, 5)), rng.standard_normal((4, 6))
    op_cases = [
        (lambda t: T.reduce_sum(T.mul(T.matmul(t, Tensor(w65)), Tensor(r45))), [x]),
        (lambda t: T.reduce_sum(T.mul(T.softmax(t), Tensor(r46))), [x]),
        (lambda t, tg, tb: T.reduce_sum(T.mul(T.layer_norm(t, tg, tb), Tensor(r46))), [x, g, b]),
        (lambda t: T.reduce_sum(T.mul(T.gelu(t), Tensor(r46))), [x]),
        (lambda t: T.reduce_sum(T.mul(T.sigmoid(t), Tensor(r46))), [x]),
        (lambda t: T.reduce_sum(T.mul(T.log(t), Tensor(r46))), [x]),
        (lambda t: T.reduce_sum(T.mul(T.powc(t, 1.3), Tensor(r46))), [x]),
        (lambda t: T.reduce_mean(T.mul(t, t)), [x]),
        (lambda t: bce_loss(T.sigmoid(t), (rng.random((4, 6)) < 0.5).astype(float)), [x]),
    ]
    for fn, arrays in op_cases:
        check_grads(fn, arrays, step=1e-5, rtol=1e-4)

    xc = rng.standard_normal((1, 2, 5, 5))
    wc = rng.standard_normal((2, 2, 3, 3))
    bc = rng.standard_normal(2)
    rc = rng.standard_normal((1, 2, 3, 3))
    check_grads(
        lambda tx, tw, tb: T.reduce_sum(T.mul(T.conv2d(tx, tw, tb, stride=2, padding=1), Tensor(rc))), [xc, wc, bc]
    )

    # end-to-end desk ViT (depth 2, heads 2, embed 16, W=2, G=4) through BCE
    cfg = ViTConfig(depth=2, heads=2, mlp_dim=32, embed_dim=16, n_labels=5, supported_widths=(2,))
    gsize, c = 4, 6
    grid_rows = rng.standard_normal((1, (2 * gsize) ** 2, c))
    y = (rng.random((1, 5)) < 0.5).astype(np.float64)
    template = init_vit(cfg, grid_g=gsize, in_channels=c, seed=1)
    template.head_w.data[:] = 0.1 * rng.standard_normal(template.head_w.shape)
    arrays = [p.data.copy() for _, p in template.named_parameters()]

    def vit_loss(*ts):
        params = init_vit(cfg, grid_g=gsize, in_channels=c, seed=1)
        it = iter(ts)
        params.proj_w, params.proj_b, params.cls = next(it), next(it), next(it)
        params.pos[2] = next(it)
        for blk in params.blocks:
            for f in type(blk).FIELDS:
                setattr(blk, f, next(it))
        params.head_w, params.head_b = next(it), next(it)
        tokens = tokenize_batch(Tensor(grid_rows), 2, params)
        enc, _ = encode(tokens, params)
        return bce_loss(classify(enc, params), y)

    worst = check_grads(vit_loss, arrays, sample=8, seed=2)
    assert worst < 1e-4

    # backbone end to end
    bcfg = BackboneConfig(input_size=8, stage_channels=(3,), downsample=(2,), out_channels=2, out_grid=4)
    xb = rng.standard_normal((1, 3, 8, 8))
    rb = rng.standard_normal((1, 2, 4, 4))
    base = init_backbone(bcfg, seed=3)
    arrays = [p.data.copy() for _, p in base.named_parameters()]

    def backbone_loss(*ts):
        q = init_backbone(bcfg, seed=3)
        it = iter(ts)
        for st in q.stages:
            st["w"], st["b"] = next(it), next(it)
        q.proj_w, q.proj_b = next(it), next(it)
        return T.reduce_sum(T.mul(extract_features(q, Tensor(xb)), Tensor(rb)))

    check_grads(backbone_loss, arrays, sample=8, seed=4)

    elapsed = time.time() - start
    assert elapsed < 120, f"gradient suite took {elapsed:.1f}s (budget 120s)"
    _passed(f"gradient suite ({elapsed:.1f}s < 120s, max rel err < 1e-4)")


# -- criterion 2: oracle suite --------------------------------------------------------


def test_oracle_suite():
    start = time.time()
    rng = np.random.default_rng(1)

    for _ in range(100):
        m, k, n = rng.integers(1, 9, size=3)
        a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
        got = T.matmul(Tensor(a), Tensor(b)).data
        assert np.abs(got - matmul_oracle(a, b)).max() < 1e-10

    for _ in range(100):
        bsz, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        h = int(rng.integers(3, 7))
        kh = int(rng.integers(1, min(4, h + 1)))
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 2))
        x = rng.standard_normal((bsz, cin, h, h))
        w = rng.standard_normal((cout, cin, kh, kh))
        bias = rng.standard_normal(cout)
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(bias), stride=stride, padding=padding).data
        want = conv2d_oracle(x, w, bias, stride=stride, padding=padding)
        assert np.abs(got - want).max() < 1e-10

    worst_pair = worst_trap = 0.0
    for trial in range(10_000):
        n = int(rng.integers(8, 60))
        scores = np.round(rng.random(n), 2) if trial % 3 == 0 else rng.random(n)
        labels = (rng.random(n) < rng.uniform(0.2, 0.8)).astype(int)
        if labels.min() == labels.max():
            continue
        auc = roc_auc(scores, labels)
        worst_pair = max(worst_pair, abs(auc - auc_pair_count_oracle(scores, labels)))
        worst_trap = max(worst_trap, abs(auc - trapezoid_area(roc_curve_points(scores, labels))))
    assert worst_pair < 1e-9, worst_pair
    assert worst_trap < 1e-9, worst_trap

    for _ in range(200):
        m = (rng.random((rng.integers(1, 9), rng.integers(1, 9))) < 0.5).astype(int)
        want = [max(m[i][j] for i in range(m.shape[0])) for j in range(m.shape[1])]
        assert (aggregate_study_labels(m) == want).all()

    elapsed = time.time() - start
    assert elapsed < 300, f"oracle suite took {elapsed:.1f}s (budget 300s)"
    _passed(f"oracle suite ({elapsed:.1f}s < 300s; pair-count err {worst_pair:.1e}, trapezoid err {worst_trap:.1e})")


# -- criterion 3: paper-scale shape contracts ------------------------------------------


def test_shape_contracts():
    start = time.time()
    rng = np.random.default_rng(2)

    backbone = init_backbone(PAPER_BACKBONE, seed=5, dtype=np.float32)
    view = Tensor(rng.standard_normal((1, 3, 320, 320)).astype(np.float32))
    feats = extract_features(backbone, view)
    assert feats.shape == (1, 1024, 10, 10)

    maps = [Tensor(rng.standard_normal((1024, 10, 10)).astype(np.float32)) for _ in range(4)]
    grid = assemble_square(maps, 2)
    assert grid.data.shape == (20, 20, 1024)

    params = init_vit(paper_vit_config(), grid_g=10, in_channels=1024, seed=6, dtype=np.float32)
    maps16 = [Tensor(rng.standard_normal((1024, 10, 10)).astype(np.float32)) for _ in range(16)]
    tokens16 = tokenize(assemble_square(maps16, 4), params)
    assert tokens16.shape == (1601, 1024)

    tokens = tokenize(grid, params)
    with T.no_grad():
        encoded, _ = encode(tokens, params)
        probs = classify(encoded, params)
    assert probs.shape == (41,)
    assert ((probs.data > 0) & (probs.data < 1)).all()

    elapsed = time.time() - start
    assert elapsed < 60, f"shape contracts took {elapsed:.1f}s (budget 60s)"
    _passed(f"paper-scale shape contracts ({elapsed:.1f}s < 60s)")


# -- criterion 4: staged-training contract ---------------------------------------------


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept_small")
    spec = SyntheticSpec(n_train=10, n_val=3, n_test=3, seed=17)
    manifest = generate_synthetic_dataset(spec, root)
    train_m, val_m, test_m = split_by_study(manifest, spec.cutoff, 0.5)
    return spec, train_m, val_m, test_m


def test_staged_training_contract(small_dataset, tmp_path):
    spec, train_m, val_m, _ = small_dataset
    labels = train_m.label_names

    def fresh():
        return init_model_bundle(
            "studyformer", DESK_BACKBONE, labels, seed=7, vit_config=desk_vit_config(len(labels))
        )

    # stage 1 leaves the backbone bitwise unchanged
    bundle = fresh()
    before = [p.data.copy() for _, p in bundle.backbone.named_parameters()]
    cfg = TrainConfig(stage1_epochs=2, stage2_epochs=0, batch_size=4, seed=18)
    bundle, _ = train_staged(bundle, train_m, val_m, cfg)
    assert all(np.array_equal(a, p.data) for a, (_, p) in zip(before, bundle.backbone.named_parameters()))

    # fixed seed reproduces runs bitwise
    cfg_full = TrainConfig(stage1_epochs=3, stage2_epochs=1, batch_size=4, seed=19)
    a, log_a = train_staged(fresh(), train_m, val_m, cfg_full)
    b, log_b = train_staged(fresh(), train_m, val_m, cfg_full)
    assert log_a == log_b and bundle_equal(a, b)

    # resume after checkpoint reproduces the uninterrupted trajectory exactly
    half = TrainConfig(stage1_epochs=2, stage2_epochs=0, batch_size=4, seed=19)
    resumed, _ = train_staged(fresh(), train_m, val_m, half)
    mid = tmp_path / "mid.sfck"
    save_checkpoint(resumed, mid)
    resumed = load_checkpoint(mid)
    resumed, log_r = train_staged(resumed, train_m, val_m, cfg_full)
    assert log_r["stage1_train"] == log_a["stage1_train"]
    assert log_r["stage2_train"] == log_a["stage2_train"]
    assert bundle_equal(a, resumed)

    _passed("staged-training contract (bitwise freeze, bitwise seed replay, exact resume)")


# -- criteria 5-7: synthetic benchmark ---------------------------------------------------

BENCH_SEED = 42
TRAIN_SEED = 1
EVAL_SEED = 99
SUBSET = (0, 1, 6)  # disc, square, disc+square: the label-group specialization


@pytest.fixture(scope="session")
def benchmark(tmp_path_factory):
    root = tmp_path_factory.mktemp("benchmark")
    spec = SyntheticSpec(n_train=2000, n_val=300, n_test=300, seed=BENCH_SEED)
    manifest = generate_synthetic_dataset(spec, root)
    train_m, val_m, test_m = split_by_study(manifest, spec.cutoff, 0.5)
    assert len(train_m.studies) == 2000 and len(val_m.studies) == 300 and len(test_m.studies) == 300
    labels = manifest.label_names

    dt = np.float32
    pre_cfg = TrainConfig(stage1_epochs=2, stage2_epochs=12, batch_size=24, lr_stage1=3e-3, lr_stage2=3e-3, seed=TRAIN_SEED)
    multi_cfg = TrainConfig(stage1_epochs=30, stage2_epochs=2, batch_size=24, lr_stage1=3e-3, lr_stage2=3e-4, seed=TRAIN_SEED)

    budget_start = time.time()
    single = init_model_bundle("single", DESK_BACKBONE, labels, seed=11, dtype=dt, head_hidden=48)
    single, _ = train_staged(single, train_m, val_m, pre_cfg)

    studyformer = init_model_bundle(
        "studyformer",
        DESK_BACKBONE,
        labels,
        seed=12,
        dtype=dt,
        vit_config=desk_vit_config(len(labels), depth=3, embed_dim=48, mlp_dim=96),
        backbone_params=single.backbone,
    )
    studyformer, _ = train_staged(studyformer, train_m, val_m, multi_cfg)

    mvcnn = init_model_bundle("mvcnn", DESK_BACKBONE, labels, seed=13, dtype=dt, head_hidden=48, backbone_params=single.backbone)
    mvcnn, _ = train_staged(mvcnn, train_m, val_m, multi_cfg)
    budget = time.time() - budget_start

    subset_model = init_model_bundle(
        "studyformer",
        DESK_BACKBONE,
        labels,
        seed=14,
        dtype=dt,
        label_subset=SUBSET,
        vit_config=desk_vit_config(len(SUBSET), depth=3, embed_dim=48, mlp_dim=96),
        backbone_params=single.backbone,
    )
    subset_model, subset_log = train_staged(subset_model, train_m, val_m, multi_cfg)

    report, table = evaluate_models([single, mvcnn, studyformer, subset_model], test_m, seed=EVAL_SEED)
    print(table)
    return {
        "spec": spec,
        "labels": labels,
        "test": test_m,
        "bundles": {"single": single, "mvcnn": mvcnn, "studyformer": studyformer, "subset": subset_model},
        "subset_log": subset_log,
        "report": report,
        "table": table,
        "budget_seconds": budget,
    }


def _macro(report, labels, model, idxs):
    vals = [report.auc_or_none(labels[j], model) for j in idxs]
    vals = [v for v in vals if v is not None]
    assert vals, f"no defined AUC for {model}"
    return float(np.mean(vals))


def test_synthetic_benchmark(benchmark):
    spec = benchmark["spec"]
    labels = benchmark["labels"]
    report = benchmark["report"]
    single_idx = list(range(len(spec.shapes)))
    conj_idx = list(range(len(spec.shapes), len(labels)))

    budget = benchmark["budget_seconds"]
    assert budget < 45 * 60, f"identical-budget trainings took {budget:.0f}s (budget 2700s)"

    # (a) StudyFormer macro-AUC on single-view-evidence labels
    sf_single = _macro(report, labels, "studyformer", single_idx)
    assert sf_single >= 0.90, f"studyformer single-evidence macro-AUC {sf_single:.3f} < 0.90"

    # (b) multi-view advantage on conjunction labels vs the single-view max baseline
    sf_conj = _macro(report, labels, "studyformer", conj_idx)
    sv_conj = _macro(report, labels, "single-view-max", conj_idx)
    assert sf_conj - sv_conj >= 0.05, f"conjunction advantage {sf_conj - sv_conj:.3f} < 0.05 (sf {sf_conj:.3f} vs sv {sv_conj:.3f})"

    # (c) the comparison table carries all four model columns, AUCs in range
    assert report.model_names == ["single-view-max", "mvcnn", "studyformer", "studyformer-subset"]
    table = benchmark["table"]
    for name in report.model_names:
        assert name in table
    assert report.auc
    for v in report.auc.values():
        assert 0.0 <= v <= 1.0

    _passed(
        f"synthetic benchmark (budget {budget:.0f}s < 2700s; single-evidence macro {sf_single:.3f} >= 0.90; "
        f"conjunction advantage {sf_conj - sv_conj:+.3f} >= 0.05; table OK)"
    )


def test_attention_map_check(benchmark, tmp_path):
    spec = benchmark["spec"]
    test_m = benchmark["test"]
    bundle = benchmark["bundles"]["studyformer"]
    n_shapes = len(spec.shapes)

    relevant_means, irrelevant_means = [], []
    exported = 0
    index_of = {f"s{idx:05d}": idx for idx in range(spec.n_total)}
    for study in test_m.studies:
        plan = plan_study(spec, index_of[study.study_id])
        shaped = plan.presence.any(axis=1)
        if study.study_labels[:n_shapes].sum() == 0 or shaped.all() or not shaped.any():
            continue  # need a positive study with both shaped and empty views
        heat, paths = export_attention_map(bundle, test_m, study, tmp_path / f"{study.study_id}.pgm", seed=EVAL_SEED)
        w = heat.shape[0] // DESK_BACKBONE.out_grid
        means = tile_means(heat, w)
        n = study.n_views
        for k in range(w * w):
            # originals come first, then augmented copies cycling through views
            source = k if k < n else (k - n) % n
            r, c = divmod(k, w)
            (relevant_means if shaped[source] else irrelevant_means).append(means[r, c])
        # heatmap file is a well-formed P5 graymap
        img = load_image(paths["heatmap"])
        assert img.shape[:2] == heat.shape
        exported += 1
        if exported >= 24:
            break

    assert exported >= 20, f"only {exported} eligible studies"
    rel, irr = float(np.mean(relevant_means)), float(np.mean(irrelevant_means))
    assert rel > irr, f"mean attention on shaped tiles {rel:.4f} <= empty tiles {irr:.4f}"
    _passed(f"attention-map check ({exported} studies; shaped-tile mean {rel:.4f} > empty-tile mean {irr:.4f})")


def test_label_subset_mode(benchmark):
    spec = benchmark["spec"]
    labels = benchmark["labels"]
    report = benchmark["report"]
    log = benchmark["subset_log"]
    bundle = benchmark["bundles"]["subset"]

    assert bundle.n_outputs == len(SUBSET)
    assert all(math.isfinite(v) for v in log["stage1_train"] + log["stage2_train"])
    covered = [labels[i] for i in SUBSET]
    defined = [lab for lab in labels if report.auc_or_none(lab, "studyformer-subset") is not None]
    assert set(defined) <= set(covered) and defined
    _passed(f"label-subset mode (3-label model trained and evaluated on {covered})")
