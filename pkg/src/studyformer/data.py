"""Study ingestion, preprocessing, label aggregation, dataset splitting, and
the synthetic multi-view benchmark generator.

Images are binary portable pixmaps (P6) for color and portable graymaps (P5)
for grayscale. A manifest is line-oriented text: a header line with the
comma-separated label names, then one study per line:

    study_id <TAB> ISO-date <TAB> path;path;... <TAB> 0,1,...;1,0,...

with one comma-separated 0/1 group per view. The synthetic generator renders
procedural shapes into noisy views; each shape name doubles as a
single-view-evidence label, and conjunction labels (``a+b``) are positive
exactly when shape a appears in one view and shape b in a *different* view
of the same study.
"""

from __future__ import annotations

import datetime
import hashlib
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, InputError, ValidationError
from .rng import DATA, stream_rng
from .tensor import Tensor

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])

SHAPES = ("disc", "square", "cross", "ring", "bar", "wedge")


# -- image files -------------------------------------------------------------


def write_ppm(path, img):
    """Write an [H,W,3] uint8 array as a binary P6 pixmap."""
    img = np.asarray(img, dtype=np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def write_pgm(path, img):
    """Write an [H,W] uint8 array as a binary P5 graymap."""
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def _pnm_header(blob, path):
    # tokens: magic, width, height, maxval; '#' comments run to end of line
    tokens, i = [], 0
    while len(tokens) < 4 and i < len(blob):
        c = blob[i:i + 1]
        if c == b"#":
            while i < len(blob) and blob[i:i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(blob) and not blob[j:j + 1].isspace() and blob[j:j + 1] != b"#":
                j += 1
            tokens.append(blob[i:j])
            i = j
    if len(tokens) < 4:
        raise InputError(f"cannot decode image file {path}: truncated header")
    return tokens, i + 1  # single whitespace byte separates maxval from pixels


def load_image(path):
    """Load a P5/P6 file as an [H,W,3] float array in [0,1]."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise InputError(f"cannot read image file {path}: {e}") from e
    (magic, *dims), offset = _pnm_header(blob, path)
    if magic not in (b"P5", b"P6"):
        raise InputError(f"cannot decode image file {path}: unsupported magic {magic!r}")
    try:
        w, h, maxval = (int(d) for d in dims)
    except ValueError as e:
        raise InputError(f"cannot decode image file {path}: bad header") from e
    if maxval != 255 or w < 1 or h < 1:
        raise InputError(f"cannot decode image file {path}: unsupported header values")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    pixels = np.frombuffer(blob, dtype=np.uint8, count=-1, offset=offset)
    if pixels.size < need:
        raise InputError(f"cannot decode image file {path}: {pixels.size} pixel bytes, need {need}")
    img = pixels[:need].reshape(h, w, channels).astype(np.float64) / 255.0
    if channels == 1:
        img = np.repeat(img, 3, axis=2)
    return img


# -- preprocessing ------------------------------------------------------------


def _axis_interp(n_in, n_out):
    pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    lo = np.floor(pos).astype(int)
    frac = pos - lo
    return np.clip(lo, 0, n_in - 1), np.clip(lo + 1, 0, n_in - 1), frac


def bilinear_resize(img, out_h, out_w):
    """Separable bilinear resampling with half-pixel-centered coordinates."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi, f = _axis_interp(img.shape[0], out_h)
    fcol = f.reshape(-1, *([1] * (img.ndim - 1)))
    img = img[lo] * (1 - fcol) + img[hi] * fcol
    lo, hi, f = _axis_interp(img.shape[1], out_w)
    frow = f.reshape(1, -1, *([1] * (img.ndim - 2)))
    return img[:, lo] * (1 - frow) + img[:, hi] * frow


def preprocess_image(raw, target_size):
    """Resize to S x S, scale to [0,1], normalize with the ImageNet statistics.

    `raw` is an [H,W,3] or [H,W] float array in [0,1], or a path to a P5/P6
    file. Grayscale inputs are replicated to three channels. Returns a
    [3,S,S] Tensor.
    """
    s = int(target_size)
    if s < 8:
        raise ContractError(f"target size must be >= 8, got {s}")
    if isinstance(raw, (str, Path)):
        raw = load_image(raw)
    img = np.asarray(raw, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InputError(f"expected an [H,W,3] or [H,W] image, got shape {img.shape}")
    img = bilinear_resize(img, s, s)
    img = (img - IMAGENET_MEAN) / IMAGENET_STD
    return Tensor(np.ascontiguousarray(img.transpose(2, 0, 1)))


# -- studies and manifests -----------------------------------------------------


def aggregate_study_labels(view_labels):
    """Study label i = max over views of label i (a disease counts if any
    view shows it)."""
    m = np.asarray(view_labels)
    if m.ndim != 2 or m.shape[0] < 1:
        raise ContractError(f"need a nonempty n x L label matrix, got shape {m.shape}")
    return m.max(axis=0)


@dataclass
class Study:
    study_id: str
    timestamp: datetime.date
    view_paths: list
    view_labels: np.ndarray  # [n_views, L] in {0,1}
    study_labels: np.ndarray = None

    def __post_init__(self):
        self.view_labels = np.asarray(self.view_labels, dtype=np.int64)
        if self.study_labels is None:
            self.study_labels = aggregate_study_labels(self.view_labels)

    @property
    def n_views(self):
        return len(self.view_paths)


@dataclass
class Manifest:
    label_names: list
    studies: list
    root: Path = field(default_factory=Path)

    @property
    def n_labels(self):
        return len(self.label_names)

    def view_path(self, study, k):
        return Path(self.root) / study.view_paths[k]

    def serialize(self):
        lines = [",".join(self.label_names)]
        for s in self.studies:
            groups = ";".join(",".join(str(int(v)) for v in row) for row in s.view_labels)
            lines.append(f"{s.study_id}\t{s.timestamp.isoformat()}\t{';'.join(s.view_paths)}\t{groups}")
        return "\n".join(lines) + "\n"


def save_manifest(manifest, path):
    Path(path).write_text(manifest.serialize(), encoding="utf-8")


def load_manifest(path):
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"manifest not found: {path}")
    text = path.read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValidationError(f"manifest {path} is empty")
    label_names = [n.strip() for n in lines[0].split(",") if n.strip()]
    if not label_names:
        raise ValidationError(f"manifest {path} has an empty label header")
    root = path.parent
    studies, seen = [], set()
    missing = []
    for ln in lines[1:]:
        parts = ln.split("\t")
        if len(parts) != 4:
            raise ValidationError(f"malformed study record (need 4 tab-separated fields): {ln!r}")
        sid, ts, paths_s, labels_s = parts
        if sid in seen:
            raise ValidationError(f"duplicate study id {sid!r}")
        seen.add(sid)
        try:
            ts = datetime.date.fromisoformat(ts)
        except ValueError as e:
            raise ValidationError(f"study {sid!r}: bad date {parts[1]!r}") from e
        paths = [p for p in paths_s.split(";") if p]
        if not paths:
            raise ValidationError(f"study {sid!r} has no views")
        groups = labels_s.split(";")
        if len(groups) != len(paths):
            raise ValidationError(f"study {sid!r}: {len(paths)} views but {len(groups)} label groups")
        mat = []
        for g in groups:
            row = [int(v) for v in g.split(",")]
            if len(row) != len(label_names):
                raise ValidationError(f"study {sid!r}: label vector length {len(row)} != {len(label_names)}")
            mat.append(row)
        for p in paths:
            if not (root / p).is_file():
                missing.append(str(root / p))
        studies.append(Study(study_id=sid, timestamp=ts, view_paths=paths, view_labels=np.array(mat)))
    if missing:
        raise ValidationError(f"missing view files: {', '.join(missing)}")
    if not studies:
        raise ValidationError(f"manifest {path} lists no studies")
    return Manifest(label_names=label_names, studies=studies, root=root)


def split_by_study(manifest, cutoff, val_fraction):
    """Date-cutoff split: pre-cutoff studies train; the rest are shuffled
    deterministically (seeded by the manifest content hash) and divided
    val/test by val_fraction. Views never straddle splits."""
    if not manifest.studies:
        raise ContractError("cannot split an empty manifest")
    if not (0.0 < val_fraction < 1.0):
        raise ContractError(f"val_fraction must be in (0,1), got {val_fraction}")
    train = [s for s in manifest.studies if s.timestamp < cutoff]
    rest = [s for s in manifest.studies if s.timestamp >= cutoff]
    if not rest or not train:
        warnings.warn(f"degenerate date split: {len(train)} train / {len(rest)} post-cutoff studies")
    digest = hashlib.sha256(manifest.serialize().encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    order = rng.permutation(len(rest))
    rest = [rest[i] for i in order]
    n_val = int(round(len(rest) * val_fraction))
    mk = lambda studies: Manifest(label_names=list(manifest.label_names), studies=studies, root=manifest.root)
    return mk(train), mk(rest[:n_val]), mk(rest[n_val:])


# -- synthetic benchmark --------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    n_train: int
    n_val: int
    n_test: int
    image_size: int = 64
    shapes: tuple = SHAPES
    conjunctions: tuple = (("disc", "square"), ("cross", "ring"))
    shape_prob: float = 0.3
    decoy_fraction: float = 0.15  # one view shows both halves of a pair -> negative
    split_fraction: float = 0.15  # the halves land in two distinct views -> positive
    view_count_weights: tuple = (1, 1, 1, 1, 1, 1)  # studies with 1..6 views
    noise: float = 0.05
    seed: int = 0
    cutoff: datetime.date = datetime.date(2022, 4, 1)

    def __post_init__(self):
        if not self.shapes and not self.conjunctions:
            raise ContractError("synthetic spec needs at least one label")
        for a, b in self.conjunctions:
            if a not in self.shapes or b not in self.shapes:
                raise ContractError(f"conjunction ({a},{b}) references unknown shapes")
        if not (1 <= len(self.view_count_weights) <= 6):
            raise ContractError("view-count distribution must cover 1..6 views")

    @property
    def label_names(self):
        return list(self.shapes) + [f"{a}+{b}" for a, b in self.conjunctions]

    @property
    def n_total(self):
        return self.n_train + self.n_val + self.n_test


@dataclass(frozen=True)
class Placement:
    shape: str
    cx: float
    cy: float
    size: float


def shape_mask(shape, side, cx, cy, size):
    """Boolean pixel mask of one rendered shape on a side x side canvas."""
    yy, xx = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    dy, dx = yy - cy, xx - cx
    h = size / 2.0
    if shape == "disc":
        return dx * dx + dy * dy <= h * h
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= h
    if shape == "ring":
        r = np.sqrt(dx * dx + dy * dy)
        return (r <= h) & (r >= h - 4.0)
    if shape == "cross":
        t = size / 5.0
        return ((np.abs(dx) <= h) & (np.abs(dy) <= t)) | ((np.abs(dy) <= h) & (np.abs(dx) <= t))
    if shape == "bar":
        return (np.abs(dx) <= h) & (np.abs(dy) <= size / 5.0)
    if shape == "wedge":
        return (np.abs(dy) <= h) & (np.abs(dx) <= (dy + h) / 2.0)
    raise ContractError(f"unknown shape {shape!r}")


BACKGROUND = 0.12
FOREGROUND = 0.85


@dataclass
class StudyPlan:
    n_views: int
    presence: np.ndarray  # [n_views, n_shapes] bool
    placements: list  # per view: list of Placement
    view_labels: np.ndarray  # [n_views, L]
    study_labels: np.ndarray  # [L]


def _conjunction_positive(present_a, present_b):
    sa = set(np.flatnonzero(present_a))
    sb = set(np.flatnonzero(present_b))
    if not sa or not sb:
        return False
    return not (len(sa) == 1 and sa == sb)


def plan_study(spec, index):
    """Deterministically draw one study's views, shapes, and labels."""
    rng = stream_rng(spec.seed, DATA, index, 0)
    counts = np.asarray(spec.view_count_weights, dtype=np.float64)
    n_views = int(rng.choice(np.arange(1, len(counts) + 1), p=counts / counts.sum()))
    presence = rng.random((n_views, len(spec.shapes))) < spec.shape_prob
    if n_views >= 2 and spec.conjunctions:
        r = rng.random()
        pair = spec.conjunctions[int(rng.integers(len(spec.conjunctions)))]
        ia, ib = spec.shapes.index(pair[0]), spec.shapes.index(pair[1])
        if r < spec.decoy_fraction:
            d = int(rng.integers(n_views))
            presence[:, [ia, ib]] = False
            presence[d, [ia, ib]] = True
        elif r < spec.decoy_fraction + spec.split_fraction:
            i, j = rng.choice(n_views, size=2, replace=False)
            presence[:, [ia, ib]] = False
            presence[i, ia] = True
            presence[j, ib] = True
    placements = []
    for k in range(n_views):
        row = []
        for si, shape in enumerate(spec.shapes):
            if presence[k, si]:
                size = float(rng.uniform(14.0, 22.0))
                margin = size / 2.0 + 2.0
                cx = float(rng.uniform(margin, spec.image_size - margin))
                cy = float(rng.uniform(margin, spec.image_size - margin))
                row.append(Placement(shape=shape, cx=cx, cy=cy, size=size))
        placements.append(row)
    singles = presence.astype(np.int64)
    conj_cols = []
    for a, b in spec.conjunctions:
        ia, ib = spec.shapes.index(a), spec.shapes.index(b)
        pos = _conjunction_positive(presence[:, ia], presence[:, ib])
        # conjunction evidence is only resolvable at study level
        conj_cols.append(np.full((n_views, 1), int(pos), dtype=np.int64))
    view_labels = np.concatenate([singles] + conj_cols, axis=1) if conj_cols else singles
    return StudyPlan(
        n_views=n_views,
        presence=presence,
        placements=placements,
        view_labels=view_labels,
        study_labels=aggregate_study_labels(view_labels),
    )


def _render_view(spec, placements, noise_rng):
    side = spec.image_size
    img = BACKGROUND + spec.noise * noise_rng.standard_normal((side, side))
    for p in placements:
        img[shape_mask(p.shape, side, p.cx, p.cy, p.size)] = FOREGROUND
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def render_study_views(spec, index, plan=None):
    """All views of study `index` as uint8 graymaps (deterministic)."""
    if plan is None:
        plan = plan_study(spec, index)
    return [
        _render_view(spec, plan.placements[k], stream_rng(spec.seed, DATA, index, k + 1))
        for k in range(plan.n_views)
    ]


def generate_synthetic_dataset(spec, out_dir):
    """Write image files plus a manifest under out_dir and return the Manifest.

    Bitwise deterministic for a fixed (spec, seed): rerunning produces
    byte-identical files.
    """
    if not spec.label_names:
        raise ContractError("synthetic spec has no labels")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    studies = []
    for idx in range(spec.n_total):
        sid = f"s{idx:05d}"
        plan = plan_study(spec, idx)
        views = render_study_views(spec, idx, plan)
        paths = []
        for k, img in enumerate(views):
            rel = f"images/{sid}_v{k}.ppm"
            rgb = np.repeat(img[:, :, None], 3, axis=2)
            write_ppm(out_dir / rel, rgb)
            paths.append(rel)
        if idx < spec.n_train:
            ts = datetime.date(2022, 1, 1) + datetime.timedelta(days=idx % 89)
        else:
            ts = spec.cutoff + datetime.timedelta(days=1 + idx % 89)
        studies.append(Study(study_id=sid, timestamp=ts, view_paths=paths, view_labels=plan.view_labels))
    manifest = Manifest(label_names=spec.label_names, studies=studies, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.tsv")
    return manifest
