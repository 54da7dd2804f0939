"""Losses, the Adam optimizer, model bundles for the three architectures,
the two-stage training procedure, and study-level forward passes.

Stage 1 freezes the backbone and trains only the ViT (or the convolutional
head for the MVCNN / per-view baselines); because frozen features are
constant, per-study grids / pooled maps / per-view features are computed
once and cached for the whole stage. Stage 2 unfreezes everything and
backpropagates through the backbone.

All shuffling and augmentation randomness is derived from the config seed
through named sub-streams, so a fixed seed reproduces the loss trajectory
bitwise and training can resume from a checkpoint mid-run without changing
the trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .assembly import assemble_square, choose_grid_width, synthesize_views
from .backbone import BackboneConfig, BackboneParams, extract_features, init_backbone
from .data import Manifest, preprocess_image
from .errors import ConfigError, ContractError, DimensionError, TrainingError
from .rng import AUGMENT, SHUFFLE, stream_rng, string_key
from .tensor import Tensor
from .vit import ViTConfig, ViTParams, classify, desk_vit_config, encode, init_vit, tokenize_batch

MODEL_TYPES = ("studyformer", "mvcnn", "single")


# -- losses --------------------------------------------------------------------

PROB_CLAMP = 1e-7


def _loss_inputs(probabilities, targets):
    p = probabilities if isinstance(probabilities, Tensor) else Tensor(probabilities)
    y = targets if isinstance(targets, Tensor) else Tensor(np.asarray(targets), dtype=p.dtype)
    if p.shape != y.shape:
        raise DimensionError(f"loss: probabilities {p.shape} vs targets {y.shape}")
    return p, y


def bce_loss(probabilities, targets):
    """Mean binary cross entropy; probabilities clamped to [1e-7, 1-1e-7]."""
    p, y = _loss_inputs(probabilities, targets)
    pc = T.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ny = Tensor(1.0 - y.data)
    ll = T.add(T.mul(y, T.log(pc)), T.mul(ny, T.log(T.add(T.neg(pc), 1.0))))
    return T.neg(T.reduce_mean(ll))


def focal_loss(probabilities, targets, alpha=1.0, gamma=2.0):
    """Mean of -alpha * (1 - p_t)^gamma * log(p_t); reduces to BCE at
    gamma=0, alpha=1."""
    if not (0.0 < alpha <= 1.0) or gamma < 0.0:
        raise ContractError(f"focal loss needs alpha in (0,1] and gamma >= 0, got {alpha}, {gamma}")
    p, y = _loss_inputs(probabilities, targets)
    ny = Tensor(1.0 - y.data)
    pt = T.add(T.mul(y, p), T.mul(ny, T.add(T.neg(p), 1.0)))
    ptc = T.clip(pt, PROB_CLAMP, 1.0 - PROB_CLAMP)
    mod = T.powc(T.add(T.neg(ptc), 1.0), gamma) if gamma != 0.0 else None
    ll = T.log(ptc)
    if mod is not None:
        ll = T.mul(mod, ll)
    if alpha != 1.0:
        ll = T.mul(ll, float(alpha))
    return T.neg(T.reduce_mean(ll))


# -- optimizer -------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    """Adam with per-parameter moments keyed by name (beta1=0.9, beta2=0.999)."""

    def __init__(self, state: AdamState, beta1=0.9, beta2=0.999, eps=1e-8):
        self.state = state
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, named_params, lr):
        st = self.state
        st.step += 1
        c1 = 1.0 - self.beta1**st.step
        c2 = 1.0 - self.beta2**st.step
        for name, p in named_params:
            if p.grad is None:
                continue
            g = p.grad
            m = st.m.get(name)
            if m is None:
                m = st.m[name] = np.zeros_like(p.data)
                st.v[name] = np.zeros_like(p.data)
            v = st.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None


# -- MVCNN / per-view convolutional head -------------------------------------------


@dataclass(frozen=True)
class ConvHeadConfig:
    in_channels: int
    hidden: int
    n_labels: int


@dataclass
class ConvHeadParams:
    config: ConvHeadConfig
    w1: Tensor = None
    b1: Tensor = None
    w2: Tensor = None
    b2: Tensor = None
    wl: Tensor = None
    bl: Tensor = None

    def named_parameters(self):
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2), ("wl", self.wl), ("bl", self.bl)]

    def set_frozen(self, frozen):
        for _, p in self.named_parameters():
            p.requires_grad = not frozen
            if frozen:
                p.grad = None


def init_conv_head(config: ConvHeadConfig, seed: int, dtype=np.float64) -> ConvHeadParams:
    rng = stream_rng(seed, "init", 2)
    c, h = config.in_channels, config.hidden

    def uni(shape, fan_in):
        b = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-b, b, size=shape).astype(dtype), requires_grad=True)

    return ConvHeadParams(
        config=config,
        w1=uni((h, c, 3, 3), c * 9),
        b1=Tensor(np.zeros(h, dtype=dtype), requires_grad=True),
        w2=uni((h, h, 3, 3), h * 9),
        b2=Tensor(np.zeros(h, dtype=dtype), requires_grad=True),
        wl=Tensor(np.zeros((h, config.n_labels), dtype=dtype), requires_grad=True),
        bl=Tensor(np.zeros(config.n_labels, dtype=dtype), requires_grad=True),
    )


def conv_head_forward(params: ConvHeadParams, features: Tensor) -> Tensor:
    """[B,C,G,G] feature maps -> [B,L] probabilities."""
    h = T.gelu(T.conv2d(features, params.w1, params.b1, padding=1))
    h = T.gelu(T.conv2d(h, params.w2, params.b2, padding=1))
    h = T.reduce_mean(h, axis=(2, 3))
    logits = T.add_bias(T.matmul(h, params.wl), params.bl)
    return T.sigmoid(logits)


# -- model bundle --------------------------------------------------------------------


@dataclass
class ModelBundle:
    """Everything needed to run, train, checkpoint, and resume one model."""

    model_type: str
    backbone: BackboneParams
    head: object  # ViTParams or ConvHeadParams
    opt: AdamState = field(default_factory=AdamState)
    meta: dict = field(default_factory=dict)
    history: dict = field(default_factory=lambda: {k: [] for k in ("stage1_train", "stage1_val", "stage2_train", "stage2_val")})

    @property
    def dtype(self):
        return self.backbone.proj_w.dtype

    @property
    def label_names(self):
        return self.meta["label_names"]

    @property
    def label_subset(self):
        return self.meta.get("label_subset")

    @property
    def effective_labels(self):
        sub = self.label_subset
        return [self.label_names[i] for i in sub] if sub else list(self.label_names)

    @property
    def n_outputs(self):
        return self.head.config.n_labels

    def named_parameters(self):
        out = [(f"backbone.{n}", p) for n, p in self.backbone.named_parameters()]
        out += [(f"head.{n}", p) for n, p in self.head.named_parameters()]
        return out

    def trained_epochs(self):
        return self.meta.get("stage1_done", 0) + self.meta.get("stage2_done", 0)


def init_model_bundle(
    model_type,
    backbone_config: BackboneConfig,
    label_names,
    seed,
    dtype=np.float64,
    label_subset=None,
    vit_config: ViTConfig = None,
    head_hidden=32,
    backbone_params: BackboneParams = None,
) -> ModelBundle:
    if model_type not in MODEL_TYPES:
        raise ConfigError(f"model type must be one of {MODEL_TYPES}, got {model_type!r}")
    label_names = list(label_names)
    if label_subset is not None:
        label_subset = tuple(int(i) for i in label_subset)
        if not label_subset or any(i < 0 or i >= len(label_names) for i in label_subset):
            raise ConfigError(f"label subset {label_subset} out of range for {len(label_names)} labels")
    n_out = len(label_subset) if label_subset else len(label_names)
    if backbone_params is None:
        backbone = init_backbone(backbone_config, seed, dtype=dtype)
    else:
        backbone = clone_backbone(backbone_params)
    if model_type == "studyformer":
        cfg = vit_config or desk_vit_config(n_out)
        if cfg.n_labels != n_out:
            raise ConfigError(f"ViT head emits {cfg.n_labels} labels but the task has {n_out}")
        head = init_vit(cfg, grid_g=backbone_config.out_grid, in_channels=backbone_config.out_channels, seed=seed, dtype=dtype)
    else:
        head = init_conv_head(ConvHeadConfig(backbone_config.out_channels, head_hidden, n_out), seed, dtype=dtype)
    meta = {
        "label_names": label_names,
        "label_subset": label_subset,
        "stage1_done": 0,
        "stage2_done": 0,
        "seed": int(seed),
    }
    return ModelBundle(model_type=model_type, backbone=backbone, head=head, meta=meta)


def clone_backbone(params: BackboneParams) -> BackboneParams:
    out = BackboneParams(config=params.config)
    for st in params.stages:
        out.stages.append({k: Tensor(v.data.copy(), requires_grad=True) for k, v in st.items()})
    out.proj_w = Tensor(params.proj_w.data.copy(), requires_grad=True)
    out.proj_b = Tensor(params.proj_b.data.copy(), requires_grad=True)
    return out


# -- study-level forward passes ---------------------------------------------------------


def augment_seed_for(seed, study_id):
    return int(stream_rng(seed, AUGMENT, string_key(study_id)).integers(2**32))


def _preprocess_tiles(bundle, images):
    s = bundle.backbone.config.input_size
    return np.stack([preprocess_image(img, s).data.astype(bundle.dtype) for img in images])


def study_grid(bundle, images, augment_seed):
    """images (float [H,W,3] arrays) -> FeatureGrid through synth + backbone."""
    w = choose_grid_width(len(images))
    tiles, prov = synthesize_views(images, w * w, augment_seed)
    batch = Tensor(_preprocess_tiles(bundle, tiles))
    feats = extract_features(bundle.backbone, batch)
    c, g = bundle.backbone.config.out_channels, bundle.backbone.config.out_grid
    maps = [T.reshape(T.narrow(feats, 0, k, 1), (c, g, g)) for k in range(w * w)]
    return assemble_square(maps, w, provenance=prov)


def studyformer_forward_study(bundle, images, augment_seed, record_attention=False):
    """Full pipeline for one study: (probabilities [L], FeatureGrid, record)."""
    if bundle.model_type != "studyformer":
        raise ContractError(f"expected a studyformer bundle, got {bundle.model_type}")
    grid = study_grid(bundle, images, augment_seed)
    side = grid.data.shape[0]
    flat = T.reshape(grid.data, (1, side * side, grid.channels))
    tokens = tokenize_batch(flat, grid.width, bundle.head)
    enc, record = encode(tokens, bundle.head, record_attention=record_attention)
    probs = classify(enc, bundle.head)
    return T.reshape(probs, (bundle.n_outputs,)), grid, record


def _pooled_features(bundle, images):
    batch = Tensor(_preprocess_tiles(bundle, images))
    feats = extract_features(bundle.backbone, batch)
    c, g = bundle.backbone.config.out_channels, bundle.backbone.config.out_grid
    pooled = T.reshape(T.narrow(feats, 0, 0, 1), (c, g, g))
    for k in range(1, len(images)):
        pooled = T.maximum(pooled, T.reshape(T.narrow(feats, 0, k, 1), (c, g, g)))
    return pooled


def mvcnn_forward_study(bundle, images):
    if bundle.model_type != "mvcnn":
        raise ContractError(f"expected an mvcnn bundle, got {bundle.model_type}")
    if not images:
        raise ContractError("mvcnn forward needs at least one view")
    pooled = _pooled_features(bundle, images)
    c, g = pooled.shape[0], pooled.shape[1]
    probs = conv_head_forward(bundle.head, T.reshape(pooled, (1, c, g, g)))
    return T.reshape(probs, (bundle.n_outputs,))


def single_view_forward_study(bundle, images):
    """Per-view probabilities [n_views, L] from the single-view model."""
    if bundle.model_type != "single":
        raise ContractError(f"expected a single-view bundle, got {bundle.model_type}")
    batch = Tensor(_preprocess_tiles(bundle, images))
    feats = extract_features(bundle.backbone, batch)
    return conv_head_forward(bundle.head, feats)


def predict_study(bundle, images, augment_seed=0):
    """Study-level probabilities as a numpy vector (no gradients)."""
    with T.no_grad():
        if bundle.model_type == "studyformer":
            probs, _, _ = studyformer_forward_study(bundle, images, augment_seed)
            return probs.data.copy()
        if bundle.model_type == "mvcnn":
            return mvcnn_forward_study(bundle, images).data.copy()
        per_view = single_view_forward_study(bundle, images).data
        return per_view.max(axis=0)


# -- staged training -----------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    stage1_epochs: int = 8
    stage2_epochs: int = 2
    batch_size: int = 16
    lr_stage1: float = 3e-3
    lr_stage2: float = 3e-4
    loss: str = "bce"
    focal_alpha: float = 1.0
    focal_gamma: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.loss not in ("bce", "focal"):
            raise ConfigError(f"loss must be 'bce' or 'focal', got {self.loss!r}")
        if self.focal_gamma < 0:
            raise ConfigError("focal gamma must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")


def _loss_fn(config, probs, targets):
    if config.loss == "focal":
        return focal_loss(probs, targets, alpha=config.focal_alpha, gamma=config.focal_gamma)
    return bce_loss(probs, targets)


@dataclass
class _Item:
    """One training unit: a whole study, or one view for the single model."""

    key: int  # batching group (grid width for studyformer, else 0)
    images: list  # uint8 [H,W,3] raw views
    labels: np.ndarray
    augment_seed: int
    cached: object = None  # stage-1 cache payload


def _load_images_u8(manifest, study):
    from .data import load_image

    out = []
    for k in range(study.n_views):
        img = load_image(manifest.view_path(study, k))
        out.append(np.round(img * 255.0).astype(np.uint8))
    return out


def _as_float(img_u8):
    return img_u8.astype(np.float64) / 255.0


def _restrict(labels, subset):
    return labels[list(subset)] if subset else labels


def _load_items(bundle, manifest, config):
    subset = bundle.label_subset
    items = []
    for study in manifest.studies:
        imgs = _load_images_u8(manifest, study)
        aseed = augment_seed_for(config.seed, study.study_id)
        if bundle.model_type == "single":
            for k in range(study.n_views):
                items.append(
                    _Item(key=0, images=[imgs[k]], labels=_restrict(study.view_labels[k], subset).astype(np.float64), augment_seed=aseed)
                )
        else:
            key = choose_grid_width(study.n_views) if bundle.model_type == "studyformer" else 0
            items.append(
                _Item(key=key, images=imgs, labels=_restrict(study.study_labels, subset).astype(np.float64), augment_seed=aseed)
            )
    return items


def _build_stage1_cache(bundle, items):
    """Precompute what the frozen backbone makes constant for stage 1."""
    c, g = bundle.backbone.config.out_channels, bundle.backbone.config.out_grid
    with T.no_grad():
        for it in items:
            imgs = [_as_float(u) for u in it.images]
            if bundle.model_type == "studyformer":
                grid = study_grid(bundle, imgs, it.augment_seed)
                side = grid.data.shape[0]
                it.cached = grid.data.data.reshape(side * side, c)
            elif bundle.model_type == "mvcnn":
                it.cached = _pooled_features(bundle, imgs).data
            else:
                feats = extract_features(bundle.backbone, Tensor(_preprocess_tiles(bundle, imgs)))
                it.cached = feats.data[0]


def _forward_stage1(bundle, batch):
    if bundle.model_type == "studyformer":
        grids = Tensor(np.stack([it.cached for it in batch]))
        tokens = tokenize_batch(grids, batch[0].key, bundle.head)
        enc, _ = encode(tokens, bundle.head)
        return classify(enc, bundle.head)
    feats = Tensor(np.stack([it.cached for it in batch]))
    return conv_head_forward(bundle.head, feats)


def _forward_stage2(bundle, batch):
    c, g = bundle.backbone.config.out_channels, bundle.backbone.config.out_grid
    if bundle.model_type == "studyformer":
        w = batch[0].key
        tiles = []
        for it in batch:
            synth, _ = synthesize_views([_as_float(u) for u in it.images], w * w, it.augment_seed)
            tiles.append(_preprocess_tiles(bundle, synth))
        feats = extract_features(bundle.backbone, Tensor(np.concatenate(tiles, axis=0)))
        rows = []
        for i, it in enumerate(batch):
            sf = T.narrow(feats, 0, i * w * w, w * w)
            maps = [T.reshape(T.narrow(sf, 0, k, 1), (c, g, g)) for k in range(w * w)]
            grid = assemble_square(maps, w)
            side = grid.data.shape[0]
            rows.append(T.reshape(grid.data, (1, side * side, c)))
        tokens = tokenize_batch(T.concat(rows, axis=0), w, bundle.head)
        enc, _ = encode(tokens, bundle.head)
        return classify(enc, bundle.head)
    if bundle.model_type == "mvcnn":
        counts = [len(it.images) for it in batch]
        flat = []
        for it in batch:
            flat.extend(_as_float(u) for u in it.images)
        feats = extract_features(bundle.backbone, Tensor(_preprocess_tiles(bundle, flat)))
        pooled_rows = []
        off = 0
        for n in counts:
            p = T.reshape(T.narrow(feats, 0, off, 1), (1, c, g, g))
            for k in range(1, n):
                p = T.maximum(p, T.reshape(T.narrow(feats, 0, off + k, 1), (1, c, g, g)))
            pooled_rows.append(p)
            off += n
        return conv_head_forward(bundle.head, T.concat(pooled_rows, axis=0))
    # single-view items hold exactly one image each
    imgs = [_as_float(it.images[0]) for it in batch]
    feats = extract_features(bundle.backbone, Tensor(_preprocess_tiles(bundle, imgs)))
    return conv_head_forward(bundle.head, feats)


def _batches(items, batch_size, rng=None):
    """Deterministic same-key batches; shuffled within key groups when rng given."""
    groups = {}
    for i, it in enumerate(items):
        groups.setdefault(it.key, []).append(i)
    for key in sorted(groups):
        idx = groups[key]
        if rng is not None:
            idx = [idx[j] for j in rng.permutation(len(idx))]
        for lo in range(0, len(idx), batch_size):
            yield [items[i] for i in idx[lo:lo + batch_size]]


def _run_epoch(bundle, items, config, stage, epoch, adam, lr, trainable, forward):
    rng = stream_rng(config.seed, SHUFFLE, stage, epoch)
    total, count = 0.0, 0
    for b, batch in enumerate(_batches(items, config.batch_size, rng)):
        probs = forward(bundle, batch)
        targets = np.stack([it.labels for it in batch]).astype(bundle.dtype)
        loss = _loss_fn(config, probs, targets)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss in stage {stage}, epoch {epoch}, batch {b}")
        loss.backward()
        adam.step(trainable, lr)
        total += value * len(batch)
        count += len(batch)
    return total / max(count, 1)


def _eval_loss(bundle, items, config, forward):
    if not items:
        return math.nan
    total, count = 0.0, 0
    with T.no_grad():
        for batch in _batches(items, config.batch_size):
            probs = forward(bundle, batch)
            targets = np.stack([it.labels for it in batch]).astype(bundle.dtype)
            total += _loss_fn(config, probs, targets).item() * len(batch)
            count += len(batch)
    return total / count


def train_staged(bundle: ModelBundle, train_manifest: Manifest, val_manifest: Manifest, config: TrainConfig):
    """Run (or resume) the two training stages; returns (bundle, loss log).

    Stage 1 leaves the backbone bitwise untouched; stage 2 trains everything.
    Resuming a checkpointed bundle with the same config continues the exact
    trajectory of an uninterrupted run.
    """
    if train_manifest is None or not train_manifest.studies:
        raise ContractError("training manifest is empty")
    subset = bundle.label_subset
    if subset and any(i >= train_manifest.n_labels for i in subset):
        raise ConfigError(f"label subset {subset} out of range for manifest with {train_manifest.n_labels} labels")
    n_expected = len(subset) if subset else train_manifest.n_labels
    if bundle.n_outputs != n_expected:
        raise ConfigError(f"bundle emits {bundle.n_outputs} labels but the dataset needs {n_expected}")

    items = _load_items(bundle, train_manifest, config)
    val_items = _load_items(bundle, val_manifest, config) if val_manifest and val_manifest.studies else []
    adam = Adam(bundle.opt)
    hist = bundle.history

    done1 = bundle.meta.get("stage1_done", 0)
    if done1 < config.stage1_epochs:
        bundle.backbone.set_frozen(True)
        _build_stage1_cache(bundle, items)
        _build_stage1_cache(bundle, val_items)
        trainable = [(f"head.{n}", p) for n, p in bundle.head.named_parameters()]
        for epoch in range(done1, config.stage1_epochs):
            tr = _run_epoch(bundle, items, config, 1, epoch, adam, config.lr_stage1, trainable, _forward_stage1)
            va = _eval_loss(bundle, val_items, config, _forward_stage1)
            hist["stage1_train"].append(tr)
            hist["stage1_val"].append(va)
            bundle.meta["stage1_done"] = epoch + 1
        for it in items + val_items:
            it.cached = None
    bundle.backbone.set_frozen(False)

    done2 = bundle.meta.get("stage2_done", 0)
    if done2 < config.stage2_epochs:
        trainable = bundle.named_parameters()
        for epoch in range(done2, config.stage2_epochs):
            tr = _run_epoch(bundle, items, config, 2, epoch, adam, config.lr_stage2, trainable, _forward_stage2)
            va = _eval_loss(bundle, val_items, config, _forward_stage2)
            hist["stage2_train"].append(tr)
            hist["stage2_val"].append(va)
            bundle.meta["stage2_done"] = epoch + 1

    log = {k: list(v) for k, v in hist.items()}
    return bundle, log
