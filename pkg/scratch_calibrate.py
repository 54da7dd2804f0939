"""Scratch calibration for the acceptance benchmark (not part of the package)."""
import sys
import time
import tempfile
from pathlib import Path

import numpy as np

sys.path.insert(0, "src")

from studyformer.backbone import DESK_BACKBONE
from studyformer.data import SyntheticSpec, generate_synthetic_dataset, split_by_study
from studyformer.eval import evaluate_models
from studyformer.train import TrainConfig, init_model_bundle, train_staged
from studyformer.vit import desk_vit_config

N_TRAIN, N_VAL, N_TEST = (int(x) for x in sys.argv[1:4]) if len(sys.argv) > 3 else (2000, 300, 300)
PRE_S2 = int(sys.argv[4]) if len(sys.argv) > 4 else 12
S1, S2 = (int(x) for x in sys.argv[5:7]) if len(sys.argv) > 6 else (30, 2)
DT = np.float32

t0 = time.time()
root = Path(tempfile.mkdtemp(prefix="calib_"))
spec = SyntheticSpec(n_train=N_TRAIN, n_val=N_VAL, n_test=N_TEST, seed=42)
manifest = generate_synthetic_dataset(spec, root)
train_m, val_m, test_m = split_by_study(manifest, spec.cutoff, 0.5)
print(f"[{time.time()-t0:7.1f}s] dataset: {N_TRAIN}/{len(val_m.studies)}/{len(test_m.studies)} at {root}", flush=True)

labels = manifest.label_names
L = len(labels)
single_idx = list(range(len(spec.shapes)))
conj_idx = list(range(len(spec.shapes), L))

pre_cfg = TrainConfig(stage1_epochs=2, stage2_epochs=PRE_S2, batch_size=24, lr_stage1=3e-3, lr_stage2=3e-3, seed=1)
mv_cfg = TrainConfig(stage1_epochs=S1, stage2_epochs=S2, batch_size=24, lr_stage1=3e-3, lr_stage2=3e-4, seed=1)

t = time.time()
single = init_model_bundle("single", DESK_BACKBONE, labels, seed=11, dtype=DT, head_hidden=48)
single, log_s = train_staged(single, train_m, val_m, pre_cfg)
print(f"[{time.time()-t0:7.1f}s] single {time.time()-t:.1f}s  s2={['%.3f' % v for v in log_s['stage2_train']]}", flush=True)

t = time.time()
sf = init_model_bundle(
    "studyformer", DESK_BACKBONE, labels, seed=12, dtype=DT,
    vit_config=desk_vit_config(L, depth=3, embed_dim=48, mlp_dim=96),
    backbone_params=single.backbone,
)
sf, log_f = train_staged(sf, train_m, val_m, mv_cfg)
print(f"[{time.time()-t0:7.1f}s] studyformer {time.time()-t:.1f}s  s1={['%.3f' % v for v in log_f['stage1_train'][::5]]}  s2={['%.3f' % v for v in log_f['stage2_train']]}", flush=True)

t = time.time()
mv = init_model_bundle("mvcnn", DESK_BACKBONE, labels, seed=13, dtype=DT, head_hidden=48, backbone_params=single.backbone)
mv, log_m = train_staged(mv, train_m, val_m, mv_cfg)
print(f"[{time.time()-t0:7.1f}s] mvcnn {time.time()-t:.1f}s  s1={['%.3f' % v for v in log_m['stage1_train'][::5]]}  s2={['%.3f' % v for v in log_m['stage2_train']]}", flush=True)

t = time.time()
report, table = evaluate_models([single, mv, sf], test_m, seed=99)
print(f"[{time.time()-t0:7.1f}s] eval in {time.time()-t:.1f}s")
print(table)


def macro(model, idxs):
    vals = [report.auc_or_none(labels[j], model) for j in idxs]
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else float("nan")


print(f"single-evidence macro: single={macro('single-view-max', single_idx):.3f} mvcnn={macro('mvcnn', single_idx):.3f} studyformer={macro('studyformer', single_idx):.3f}")
print(f"conjunction macro:     single={macro('single-view-max', conj_idx):.3f} mvcnn={macro('mvcnn', conj_idx):.3f} studyformer={macro('studyformer', conj_idx):.3f}")
print(f"conj per-label: " + " ".join(f"{labels[j]}: sv={report.auc_or_none(labels[j],'single-view-max'):.3f} sf={report.auc_or_none(labels[j],'studyformer'):.3f}" for j in conj_idx))
print(f"total wall: {time.time()-t0:.1f}s")
