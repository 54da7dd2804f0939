"""Scratch: can the single-view model memorize a tiny set? (not in package)"""
import sys
import time
import tempfile
from pathlib import Path

import numpy as np

sys.path.insert(0, "src")

import studyformer.backbone as B
from studyformer.data import SyntheticSpec, generate_synthetic_dataset
from studyformer.train import TrainConfig, init_model_bundle, train_staged
from studyformer.data import Manifest

B.NORM_MODE = sys.argv[1] if len(sys.argv) > 1 else "channel"
lr = float(sys.argv[2]) if len(sys.argv) > 2 else 3e-3
epochs = int(sys.argv[3]) if len(sys.argv) > 3 else 60

root = Path(tempfile.mkdtemp(prefix="ovf_"))
spec = SyntheticSpec(n_train=10, n_val=0, n_test=0, seed=3)
manifest = generate_synthetic_dataset(spec, root)
t0 = time.time()
b = init_model_bundle("single", B.DESK_BACKBONE, manifest.label_names, seed=1, dtype=np.float32, head_hidden=48)
cfg = TrainConfig(stage1_epochs=0, stage2_epochs=epochs, batch_size=8, lr_stage2=lr, seed=2)
b, log = train_staged(b, manifest, None, cfg)
tr = log["stage2_train"]
print(f"norm={B.NORM_MODE} lr={lr}: loss {tr[0]:.3f} -> {tr[len(tr)//2]:.3f} -> {tr[-1]:.3f}  ({time.time()-t0:.0f}s)")
