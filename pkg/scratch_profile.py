"""Scratch: profile stage costs and dtype effect (not part of the package)."""
import sys
import time
import tempfile
from pathlib import Path

import numpy as np

sys.path.insert(0, "src")

from studyformer.backbone import DESK_BACKBONE
from studyformer.data import SyntheticSpec, generate_synthetic_dataset, split_by_study
from studyformer.train import TrainConfig, init_model_bundle, train_staged, _load_items, _build_stage1_cache, _run_epoch, _forward_stage1, _forward_stage2, Adam
from studyformer.vit import desk_vit_config

dtype = np.float32 if sys.argv[1] == "f32" else np.float64
root = Path(tempfile.mkdtemp(prefix="prof_"))
spec = SyntheticSpec(n_train=200, n_val=50, n_test=50, seed=7)
manifest = generate_synthetic_dataset(spec, root)
train_m, val_m, _ = split_by_study(manifest, spec.cutoff, 0.5)
labels = manifest.label_names
cfg = TrainConfig(stage1_epochs=0, stage2_epochs=0, batch_size=24, seed=3)

for kind, vitc in [("single", None), ("studyformer", desk_vit_config(len(labels), depth=3, embed_dim=48, mlp_dim=96)), ("mvcnn", None)]:
    b = init_model_bundle(kind, DESK_BACKBONE, labels, seed=5, vit_config=vitc, dtype=dtype)
    items = _load_items(b, train_m, cfg)
    t = time.time()
    b.backbone.set_frozen(True)
    _build_stage1_cache(b, items)
    t_cache = time.time() - t
    trainable = [(f"head.{n}", p) for n, p in b.head.named_parameters()]
    adam = Adam(b.opt)
    t = time.time()
    _run_epoch(b, items, cfg, 1, 0, adam, 3e-3, trainable, _forward_stage1)
    t_s1 = time.time() - t
    b.backbone.set_frozen(False)
    trainable = b.named_parameters()
    t = time.time()
    _run_epoch(b, items, cfg, 2, 0, adam, 3e-4, trainable, _forward_stage2)
    t_s2 = time.time() - t
    print(f"{dtype.__name__} {kind:12s} items={len(items):4d} cache={t_cache:6.1f}s stage1_epoch={t_s1:6.2f}s stage2_epoch={t_s2:6.1f}s")
