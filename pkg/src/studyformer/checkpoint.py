"""Checkpoint files: magic ``SFCK``, a u16 format version, then named
length-prefixed sections (configs as canonical key=value text, parameter and
optimizer tensors as TNSR blobs, loss history as raw f64). All integers are
little-endian. save -> load is a bitwise identity, including optimizer
moments, so training resumes exactly."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, BackboneParams, init_backbone
from .errors import FormatError
from .tensor import Tensor, tensor_from_bytes, tensor_to_bytes
from .train import AdamState, ConvHeadConfig, ModelBundle, init_conv_head
from .vit import ViTConfig, init_vit

MAGIC = b"SFCK"
VERSION = 1

_HISTORY_KEYS = ("stage1_train", "stage1_val", "stage2_train", "stage2_val")
_DTYPE_NAME = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
_NAME_DTYPE = {"f32": np.float32, "f64": np.float64}


def _kv_text(pairs):
    return "".join(f"{k}={v}\n" for k, v in pairs).encode("utf-8")


def _parse_kv(blob):
    out = {}
    for line in blob.decode("utf-8").splitlines():
        if not line.strip():
            continue
        k, _, v = line.partition("=")
        out[k] = v
    return out


def _csv_ints(s):
    return tuple(int(x) for x in s.split(",") if x != "")


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.off = 0

    def take(self, n):
        if self.off + n > len(self.blob):
            raise FormatError(f"checkpoint truncated at byte {self.off} (need {n} more)")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]


def _named_blob(name, payload):
    nb = name.encode("utf-8")
    return struct.pack("<H", len(nb)) + nb + struct.pack("<Q", len(payload)) + payload


def _tensor_entry(name, t):
    blob = tensor_to_bytes(t)
    nb = name.encode("utf-8")
    return struct.pack("<H", len(nb)) + nb + struct.pack("<Q", len(blob)) + blob


def save_checkpoint(bundle: ModelBundle, path):
    """Serialize a ModelBundle (weights + optimizer + history) to `path`."""
    meta = _kv_text(
        [
            ("model_type", bundle.model_type),
            ("dtype", _DTYPE_NAME[bundle.dtype]),
            ("label_names", ",".join(bundle.label_names)),
            ("label_subset", ",".join(str(i) for i in bundle.label_subset) if bundle.label_subset else "-"),
            ("stage1_done", bundle.meta.get("stage1_done", 0)),
            ("stage2_done", bundle.meta.get("stage2_done", 0)),
            ("seed", bundle.meta.get("seed", 0)),
        ]
    )
    bc = bundle.backbone.config
    backbone_cfg = _kv_text(
        [
            ("input_size", bc.input_size),
            ("stage_channels", ",".join(map(str, bc.stage_channels))),
            ("downsample", ",".join(map(str, bc.downsample))),
            ("out_channels", bc.out_channels),
            ("out_grid", bc.out_grid),
        ]
    )
    hc = bundle.head.config
    if bundle.model_type == "studyformer":
        head_cfg = _kv_text(
            [
                ("kind", "vit"),
                ("depth", hc.depth),
                ("heads", hc.heads),
                ("mlp_dim", hc.mlp_dim),
                ("embed_dim", hc.embed_dim),
                ("n_labels", hc.n_labels),
                ("widths", ",".join(map(str, hc.supported_widths))),
                ("grid_g", bundle.head.grid_g),
                ("in_channels", bundle.head.in_channels),
            ]
        )
    else:
        head_cfg = _kv_text(
            [("kind", "conv"), ("in_channels", hc.in_channels), ("hidden", hc.hidden), ("n_labels", hc.n_labels)]
        )

    named = bundle.named_parameters()
    params = struct.pack("<I", len(named)) + b"".join(_tensor_entry(n, p) for n, p in named)

    opt_names = sorted(bundle.opt.m)
    opt = struct.pack("<QI", bundle.opt.step, len(opt_names))
    for n in opt_names:
        opt += _tensor_entry(n, Tensor(bundle.opt.m[n]))
        opt += _tensor_entry(n, Tensor(bundle.opt.v[n]))

    hist = b""
    for key in _HISTORY_KEYS:
        arr = np.asarray(bundle.history.get(key, []), dtype="<f8")
        hist += struct.pack("<I", arr.size) + arr.tobytes()

    body = b"".join(
        _named_blob(name, payload)
        for name, payload in [
            ("meta", meta),
            ("backbone_config", backbone_cfg),
            ("head_config", head_cfg),
            ("params", params),
            ("opt", opt),
            ("history", hist),
        ]
    )
    Path(path).write_bytes(MAGIC + struct.pack("<H", VERSION) + body)


def _read_sections(blob):
    if blob[:4] != MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r}")
    r = _Reader(blob)
    r.take(4)
    version = r.u16()
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    sections = {}
    while r.off < len(blob):
        name = r.take(r.u16()).decode("utf-8")
        sections[name] = bytes(r.take(r.u64()))
    for need in ("meta", "backbone_config", "head_config", "params", "opt", "history"):
        if need not in sections:
            raise FormatError(f"checkpoint is missing the {need!r} section")
    return sections


def _read_tensor_entry(r):
    name = r.take(r.u16()).decode("utf-8")
    blob = r.take(r.u64())
    return name, tensor_from_bytes(blob)


def load_checkpoint(path) -> ModelBundle:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"checkpoint not found: {path}")
    sections = _read_sections(path.read_bytes())

    meta = _parse_kv(sections["meta"])
    model_type = meta.get("model_type", "")
    dtype = _NAME_DTYPE.get(meta.get("dtype", ""))
    if dtype is None:
        raise FormatError(f"unknown checkpoint dtype {meta.get('dtype')!r}")
    label_names = meta.get("label_names", "").split(",")
    subset = None if meta.get("label_subset", "-") == "-" else _csv_ints(meta["label_subset"])

    bkv = _parse_kv(sections["backbone_config"])
    backbone_config = BackboneConfig(
        input_size=int(bkv["input_size"]),
        stage_channels=_csv_ints(bkv["stage_channels"]),
        downsample=_csv_ints(bkv["downsample"]),
        out_channels=int(bkv["out_channels"]),
        out_grid=int(bkv["out_grid"]),
    )
    backbone = init_backbone(backbone_config, seed=0, dtype=dtype)

    hkv = _parse_kv(sections["head_config"])
    if hkv.get("kind") == "vit":
        cfg = ViTConfig(
            depth=int(hkv["depth"]),
            heads=int(hkv["heads"]),
            mlp_dim=int(hkv["mlp_dim"]),
            embed_dim=int(hkv["embed_dim"]),
            n_labels=int(hkv["n_labels"]),
            supported_widths=_csv_ints(hkv["widths"]),
        )
        head = init_vit(cfg, grid_g=int(hkv["grid_g"]), in_channels=int(hkv["in_channels"]), seed=0, dtype=dtype)
        if model_type != "studyformer":
            raise FormatError(f"vit head incompatible with model type {model_type!r}")
    elif hkv.get("kind") == "conv":
        cfg = ConvHeadConfig(in_channels=int(hkv["in_channels"]), hidden=int(hkv["hidden"]), n_labels=int(hkv["n_labels"]))
        head = init_conv_head(cfg, seed=0, dtype=dtype)
        if model_type not in ("mvcnn", "single"):
            raise FormatError(f"conv head incompatible with model type {model_type!r}")
    else:
        raise FormatError(f"unknown head kind {hkv.get('kind')!r}")

    bundle = ModelBundle(
        model_type=model_type,
        backbone=backbone,
        head=head,
        meta={
            "label_names": label_names,
            "label_subset": subset,
            "stage1_done": int(meta.get("stage1_done", 0)),
            "stage2_done": int(meta.get("stage2_done", 0)),
            "seed": int(meta.get("seed", 0)),
        },
    )

    slots = dict(bundle.named_parameters())
    r = _Reader(sections["params"])
    for _ in range(r.u32()):
        name, t = _read_tensor_entry(r)
        if name not in slots:
            raise FormatError(f"checkpoint parameter {name!r} has no slot in a {model_type} model")
        slot = slots.pop(name)
        if slot.shape != t.shape:
            raise FormatError(f"parameter {name!r} has shape {t.shape}, expected {slot.shape}")
        slot.data = t.data.astype(dtype, copy=False)
    if slots:
        raise FormatError(f"checkpoint is missing parameters: {sorted(slots)}")

    r = _Reader(sections["opt"])
    opt = AdamState(step=r.u64())
    for _ in range(r.u32()):
        name_m, m = _read_tensor_entry(r)
        name_v, v = _read_tensor_entry(r)
        if name_m != name_v:
            raise FormatError(f"optimizer entry mismatch: {name_m!r} vs {name_v!r}")
        opt.m[name_m] = m.data.astype(dtype, copy=False)
        opt.v[name_m] = v.data.astype(dtype, copy=False)
    bundle.opt = opt

    r = _Reader(sections["history"])
    for key in _HISTORY_KEYS:
        n = r.u32()
        vals = np.frombuffer(r.take(8 * n), dtype="<f8")
        bundle.history[key] = [float(x) for x in vals]
    return bundle


def bundle_equal(a: ModelBundle, b: ModelBundle) -> bool:
    """Bitwise equality of two bundles (params, optimizer, meta, history)."""
    if a.model_type != b.model_type or a.backbone.config != b.backbone.config or a.head.config != b.head.config:
        return False
    if a.meta.get("label_names") != b.meta.get("label_names") or a.label_subset != b.label_subset:
        return False
    for k in ("stage1_done", "stage2_done", "seed"):
        if a.meta.get(k, 0) != b.meta.get(k, 0):
            return False
    pa, pb = a.named_parameters(), b.named_parameters()
    if [n for n, _ in pa] != [n for n, _ in pb]:
        return False
    if any(not np.array_equal(x.data, y.data) for (_, x), (_, y) in zip(pa, pb)):
        return False
    if a.opt.step != b.opt.step or sorted(a.opt.m) != sorted(b.opt.m):
        return False
    for n in a.opt.m:
        if not np.array_equal(a.opt.m[n], b.opt.m[n]) or not np.array_equal(a.opt.v[n], b.opt.v[n]):
            return False
    for k in _HISTORY_KEYS:
        if not np.array_equal(np.asarray(a.history[k]), np.asarray(b.history[k]), equal_nan=True):
            return False
    return True
