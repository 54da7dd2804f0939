"""ROC-AUC metrics, the single-view-max and MVCNN baselines, the
model-comparison harness, and attention-map export.

The primary AUC implementation is rank-based (Mann-Whitney with average
ranks for ties); curve integration is deliberately independent so the two
cross-check each other. Labels with only one class present get no AUC: they
are reported as absent ("—"), never as 0 or 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .assembly import choose_grid_width, synthesize_views
from .data import Manifest, bilinear_resize, write_pgm, write_ppm
from .errors import ConfigError, ContractError, DimensionError, UndefinedMetricError
from .train import (
    ModelBundle,
    augment_seed_for,
    conv_head_forward,
    predict_study,
    single_view_forward_study,
    studyformer_forward_study,
)
from .vit import attention_rollout

# -- metrics ------------------------------------------------------------------


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise DimensionError(f"scores {scores.shape} vs labels {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ContractError("labels must be 0/1")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUC undefined: {n_pos} positives, {n_neg} negatives")
    return scores, labels, n_pos, n_neg


def _average_ranks(scores):
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    s = scores[order]
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and s[j] == s[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j + 1)  # average of 1-based ranks i+1..j
        i = j
    return ranks


def roc_auc(scores, labels) -> float:
    """P(random positive outscores a random negative), ties counted half."""
    scores, labels, n_pos, n_neg = _check_binary(scores, labels)
    ranks = _average_ranks(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_curve_points(scores, labels):
    """ROC polyline from (0,0) to (1,1) with one knot per distinct score."""
    scores, labels, n_pos, n_neg = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and s[j] == s[i]:
            j += 1
        tp += int((y[i:j] == 1).sum())
        fp += int((y[i:j] == 0).sum())
        points.append((fp / n_neg, tp / n_pos))
        i = j
    return points


def trapezoid_area(points) -> float:
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


# -- baselines ------------------------------------------------------------------


def single_view_max_baseline(per_view_probs):
    """Study score per label = max of the per-view scores."""
    m = np.asarray(per_view_probs, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1:
        raise ContractError(f"need a nonempty n x L probability matrix, got shape {m.shape}")
    return m.max(axis=0)


def mvcnn_forward(per_view_features, head_params):
    """Elementwise-max view pooling, then the small convolutional head."""
    if not per_view_features:
        raise ContractError("mvcnn_forward needs at least one view")
    shape = per_view_features[0].shape
    if len(shape) != 3:
        raise DimensionError(f"per-view features must be [C,G,G], got {shape}")
    for f in per_view_features[1:]:
        if f.shape != shape:
            raise DimensionError(f"inconsistent feature shapes {shape} vs {f.shape}")
    pooled = per_view_features[0]
    for f in per_view_features[1:]:
        pooled = T.maximum(pooled, f)
    c, g = shape[0], shape[1]
    probs = conv_head_forward(head_params, T.reshape(pooled, (1, c, g, g)))
    return T.reshape(probs, (head_params.config.n_labels,))


# -- model comparison -------------------------------------------------------------


@dataclass
class EvalReport:
    label_names: list
    model_names: list
    auc: dict = field(default_factory=dict)  # (label, model) -> float; absent keys are undefined
    curves: dict = field(default_factory=dict)  # (label, model) -> [(fpr, tpr), ...]
    metadata: dict = field(default_factory=dict)

    def auc_or_none(self, label, model):
        return self.auc.get((label, model))


def _model_name(bundle, used):
    if bundle.model_type == "single":
        base = "single-view-max"
    elif bundle.model_type == "mvcnn":
        base = "mvcnn"
    elif bundle.label_subset:
        base = "studyformer-subset"
    else:
        base = "studyformer"
    name = base
    k = 2
    while name in used:
        name = f"{base}-{k}"
        k += 1
    return name


def _study_images(manifest, study):
    from .data import load_image

    return [load_image(manifest.view_path(study, k)) for k in range(study.n_views)]


def _score_matrix(bundle, dataset, seed):
    """[n_studies, L_dataset] scores; labels the model does not emit are NaN."""
    n, l_all = len(dataset.studies), dataset.n_labels
    out = np.full((n, l_all), np.nan)
    cols = list(bundle.label_subset) if bundle.label_subset else list(range(l_all))
    for i, study in enumerate(dataset.studies):
        images = _study_images(dataset, study)
        probs = predict_study(bundle, images, augment_seed=augment_seed_for(seed, study.study_id))
        out[i, cols] = probs
    return out


def evaluate_models(checkpoints, dataset: Manifest, label_names=None, seed=0):
    """Score every checkpoint on every study; returns (EvalReport, table text).

    `checkpoints` holds ModelBundles or checkpoint paths. Labels with a
    single class in the dataset, and labels a subset model does not emit,
    are absent from the report (rendered as an em-dash in the table).
    """
    from .checkpoint import load_checkpoint

    if not dataset.studies:
        raise ContractError("evaluation dataset is empty")
    label_names = list(label_names) if label_names else list(dataset.label_names)
    if label_names != list(dataset.label_names):
        raise ConfigError("label_names must match the dataset label vocabulary")
    bundles = [b if isinstance(b, ModelBundle) else load_checkpoint(b) for b in checkpoints]
    for b in bundles:
        if list(b.label_names) != label_names:
            raise ConfigError(
                f"checkpoint trained on {len(b.label_names)} labels {b.label_names!r} "
                f"is incompatible with dataset labels {label_names!r}"
            )

    truth = np.stack([s.study_labels for s in dataset.studies])
    report = EvalReport(label_names=label_names, model_names=[], metadata={"seed": int(seed), "dataset": str(dataset.root)})
    for bundle in bundles:
        name = _model_name(bundle, set(report.model_names))
        report.model_names.append(name)
        scores = _score_matrix(bundle, dataset, seed)
        for j, label in enumerate(label_names):
            col = scores[:, j]
            if np.isnan(col).all():
                continue  # label not emitted by this model
            try:
                auc = roc_auc(col, truth[:, j])
            except UndefinedMetricError:
                continue  # single-class label: absent, not 0
            report.auc[(label, name)] = auc
            report.curves[(label, name)] = roc_curve_points(col, truth[:, j])
    return report, render_table(report)


def render_table(report: EvalReport) -> str:
    """Aligned text table; the best defined AUC per label row is starred."""
    headers = ["label"] + list(report.model_names)
    rows = []
    for label in report.label_names:
        values = {m: report.auc_or_none(label, m) for m in report.model_names}
        defined = [v for v in values.values() if v is not None]
        best = max(defined) if defined else None
        row = [label]
        for m in report.model_names:
            v = values[m]
            if v is None:
                row.append("—")
            else:
                row.append(f"{v:.4f}*" if v == best else f"{v:.4f}")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows + [headers]) for i in range(len(headers))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*headers), fmt.format(*["-" * w for w in widths])]
    lines += [fmt.format(*r) for r in rows]
    lines.append("")
    lines.append("note: studyformer outputs depend on view order; the single-view-max and")
    lines.append("mvcnn baselines are permutation-invariant in the views.")
    return "\n".join(lines)


def report_lines(report: EvalReport):
    """Machine-readable lines `label <TAB> model <TAB> auc` (absent AUCs omitted)."""
    out = []
    for label in report.label_names:
        for m in report.model_names:
            v = report.auc_or_none(label, m)
            if v is not None:
                out.append(f"{label}\t{m}\t{v:.6f}")
    return out


def write_report(report: EvalReport, out_dir):
    """Write report.txt, report.tsv, and per-(label, model) ROC curve files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(render_table(report) + "\n", encoding="utf-8")
    (out_dir / "report.tsv").write_text("\n".join(report_lines(report)) + "\n", encoding="utf-8")
    curve_dir = out_dir / "curves"
    curve_dir.mkdir(exist_ok=True)
    for (label, model), points in report.curves.items():
        safe = f"{label}_{model}".replace("/", "-").replace(" ", "_").replace("+", "and")
        lines = [f"{fpr:.6f}\t{tpr:.6f}" for fpr, tpr in points]
        (curve_dir / f"{safe}.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out_dir / "report.txt"


# -- attention maps -----------------------------------------------------------------


def tile_means(heat, width):
    """Mean heat per tile: [W, W] from a (W*G, W*G) map."""
    side = heat.shape[0]
    g = side // width
    return heat.reshape(width, g, width, g).mean(axis=(1, 3))


def export_attention_map(bundle: ModelBundle, manifest: Manifest, study, out_path, seed=0):
    """Run the full pipeline with attention recording and write artifacts.

    Writes the rollout heatmap as a P5 graymap at (W*G) x (W*G), a P6
    overlay at input resolution per tile, and a sidecar text file stating
    each tile's provenance. Returns (heatmap, artifact paths dict).
    """
    if bundle.model_type != "studyformer":
        raise ContractError(f"attention maps need a studyformer bundle, got {bundle.model_type}")
    if bundle.trained_epochs() == 0:
        raise ContractError("attention maps need a trained bundle")
    images = _study_images(manifest, study)
    choose_grid_width(len(images))
    aseed = augment_seed_for(seed, study.study_id)
    with T.no_grad():
        _, grid, record = studyformer_forward_study(bundle, images, aseed, record_attention=True)
    heat = attention_rollout(record)

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    base = out_path.with_suffix("")
    heat_path = base.with_suffix(".pgm")
    overlay_path = Path(str(base) + "_overlay.ppm")
    sidecar_path = Path(str(base) + "_provenance.txt")

    write_pgm(heat_path, np.round(heat * 255.0).astype(np.uint8))

    # overlay: the exact tile images the model saw, tinted by upsampled heat
    w = grid.width
    s = bundle.backbone.config.input_size
    tiles, _ = synthesize_views(images, w * w, aseed)
    mosaic = np.zeros((w * s, w * s, 3))
    heatbig = np.zeros((w * s, w * s))
    g = grid.grid_g
    for k in range(w * w):
        r, c = divmod(k, w)
        tile_img = bilinear_resize(tiles[k], s, s)
        mosaic[r * s:(r + 1) * s, c * s:(c + 1) * s] = tile_img
        heatbig[r * s:(r + 1) * s, c * s:(c + 1) * s] = bilinear_resize(heat[r * g:(r + 1) * g, c * g:(c + 1) * g], s, s)
    blend = mosaic * 0.55
    blend[:, :, 0] += 0.45 * heatbig
    blend[:, :, 1] += 0.45 * heatbig * 0.25
    overlay = np.round(np.clip(blend, 0, 1) * 255.0).astype(np.uint8)
    write_ppm(overlay_path, overlay)

    lines = [f"study {study.study_id}: {len(images)} views, grid width {w}"]
    for k, prov in enumerate(grid.provenance):
        r, c = divmod(k, w)
        lines.append(f"tile ({r},{c}): {prov.describe()}")
    sidecar_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    return heat, {"heatmap": heat_path, "overlay": overlay_path, "provenance": sidecar_path}
