"""Scratch: diagnose the single-view pretrainer quality (not part of the package)."""
import sys
import time
import tempfile
from pathlib import Path

import numpy as np

sys.path.insert(0, "src")

from studyformer.backbone import BackboneConfig, DESK_BACKBONE
from studyformer.data import SyntheticSpec, generate_synthetic_dataset, split_by_study
from studyformer.eval import roc_auc, _score_matrix
from studyformer.train import TrainConfig, init_model_bundle, train_staged

arch = sys.argv[1] if len(sys.argv) > 1 else "preset"
lr2 = float(sys.argv[2]) if len(sys.argv) > 2 else 1e-3
epochs = int(sys.argv[3]) if len(sys.argv) > 3 else 8
hidden = int(sys.argv[4]) if len(sys.argv) > 4 else 48

if arch == "preset":
    bb = DESK_BACKBONE
elif arch == "deep":
    bb = BackboneConfig(input_size=64, stage_channels=(16, 32, 48), downsample=(2, 2, 4), out_channels=48, out_grid=4)
else:
    raise SystemExit(f"unknown arch {arch}")

t0 = time.time()
root = Path(tempfile.mkdtemp(prefix="diag_"))
spec = SyntheticSpec(n_train=400, n_val=60, n_test=140, seed=42)
manifest = generate_synthetic_dataset(spec, root)
train_m, val_m, test_m = split_by_study(manifest, spec.cutoff, 0.3)
labels = manifest.label_names

cfg = TrainConfig(stage1_epochs=2, stage2_epochs=epochs, batch_size=24, lr_stage1=3e-3, lr_stage2=lr2, seed=1)
b = init_model_bundle("single", bb, labels, seed=11, dtype=np.float32, head_hidden=hidden)
b, log = train_staged(b, train_m, val_m, cfg)
print(f"arch={arch} lr2={lr2} epochs={epochs} hidden={hidden}")
print(f"train losses: {['%.3f' % v for v in log['stage2_train']]}")
print(f"val   losses: {['%.3f' % v for v in log['stage2_val']]}")

for name, dataset in [("train", train_m), ("test", test_m)]:
    scores = _score_matrix(b, dataset, seed=99)
    truth = np.stack([s.study_labels for s in dataset.studies])
    aucs = []
    for j, lab in enumerate(labels):
        try:
            aucs.append(f"{lab}={roc_auc(scores[:, j], truth[:, j]):.3f}")
        except Exception:
            aucs.append(f"{lab}=--")
    print(f"{name}: " + " ".join(aucs))
print(f"wall {time.time()-t0:.1f}s")
