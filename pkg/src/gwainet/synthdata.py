"""Procedural synthetic identities: a deterministic face renderer, the
on-disk dataset layout, preprocessing, and training-triple sampling with the
guide policy and its two ablation modes.

Twelve identity knobs drive layered geometric primitives (oval face, eyes
with irises, angled eyebrow bars, triangle nose, curved mouth, hair cap);
nuisance knobs perturb pose, expression and lighting.  Rendering is a pure
function of (identity, nuisance, size): 4x supersampled rasterization, so
anti-aliased output is reproducible bit for bit.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .functional import bicubic_resize
from .tensor import ValidationError

# sub-streams so every draw is a pure function of the dataset seed
_ID_STREAM = 101
_NU_STREAM = 202
_SPLIT_STREAM = 303


@dataclass(frozen=True)
class IdentityParams:
    face_width: float
    face_height: float
    skin_tone: float
    eye_spacing: float
    eye_size: float
    iris_tone: float
    brow_angle: float
    nose_length: float
    mouth_width: float
    mouth_curve: float
    hair_tone: float
    hair_coverage: float

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"identity param {name}={v} outside [0, 1]")

    @staticmethod
    def from_rng(rng: np.random.Generator) -> "IdentityParams":
        return IdentityParams(*rng.uniform(0.0, 1.0, 12))


@dataclass(frozen=True)
class NuisanceParams:
    shift_v: float = 0.0        # fraction of image side, +- 0.10
    shift_u: float = 0.0
    rotation: float = 0.0       # degrees, +- 15
    scale: float = 1.0          # [0.9, 1.1]
    expression: float = 0.0     # mouth-curvature delta, +- 0.3
    gain: float = 1.0           # illumination, [0.8, 1.2]

    def __post_init__(self):
        checks = [abs(self.shift_v) <= 0.10 + 1e-12, abs(self.shift_u) <= 0.10 + 1e-12,
                  abs(self.rotation) <= 15.0 + 1e-9, 0.9 <= self.scale <= 1.1,
                  abs(self.expression) <= 0.3 + 1e-12, 0.8 <= self.gain <= 1.2]
        if not all(checks):
            raise ValidationError(f"nuisance params outside ranges: {self}")

    @staticmethod
    def from_rng(rng: np.random.Generator,
                 mode: str = "full") -> "NuisanceParams":
        """mode "translation" keeps everything but the shift neutral."""
        shift_v = rng.uniform(-0.10, 0.10)
        shift_u = rng.uniform(-0.10, 0.10)
        if mode == "translation":
            return NuisanceParams(shift_v=shift_v, shift_u=shift_u)
        if mode != "full":
            raise ValidationError(f"unknown nuisance mode {mode!r}")
        return NuisanceParams(
            shift_v=shift_v, shift_u=shift_u,
            rotation=rng.uniform(-15.0, 15.0),
            scale=rng.uniform(0.9, 1.1),
            expression=rng.uniform(-0.3, 0.3),
            gain=rng.uniform(0.8, 1.2),
        )


NEUTRAL_NUISANCE = NuisanceParams()


def _lerp(a, b, t):
    return tuple(a[i] + (b[i] - a[i]) * t for i in range(3))


def render_face(ident: IdentityParams, nuis: NuisanceParams, size: int) -> np.ndarray:
    """Render one face as (3, size, size) float32 in [0, 1]."""
    if size < 32:
        raise ValidationError(f"render size must be >= 32, got {size}")
    ss = 4
    n = size * ss
    ax = (np.arange(n, dtype=np.float64) + 0.5) / n * 2.0 - 1.0
    vv, uu = np.meshgrid(ax, ax, indexing="ij")

    # inverse nuisance transform: image frame -> face frame
    th = np.deg2rad(nuis.rotation)
    cv = vv - nuis.shift_v * 2.0
    cu = uu - nuis.shift_u * 2.0
    fv = (np.cos(th) * cv + np.sin(th) * cu) / nuis.scale
    fu = (-np.sin(th) * cv + np.cos(th) * cu) / nuis.scale

    img = np.empty((3, n, n), dtype=np.float64)
    for c, val in enumerate((0.15, 0.17, 0.20)):
        img[c] = val

    def paint(mask, color):
        for c in range(3):
            img[c][mask] = color[c]

    def ellipse(center_v, center_u, rv, ru):
        return ((fv - center_v) / rv) ** 2 + ((fu - center_u) / ru) ** 2 <= 1.0

    # identity ranges are wide relative to the nuisance ranges (scale only
    # varies +-10%) so identity dominates raw pixel distances
    face_ru = 0.42 + 0.34 * ident.face_width
    face_rv = 0.52 + 0.34 * ident.face_height
    face_cv = 0.05
    skin = _lerp((0.99, 0.84, 0.68), (0.40, 0.26, 0.16), ident.skin_tone)
    hair = _lerp((0.93, 0.88, 0.55), (0.05, 0.04, 0.03), ident.hair_tone)

    paint(ellipse(face_cv, 0.0, face_rv * 1.10, face_ru * 1.12), hair)
    face_mask = ellipse(face_cv, 0.0, face_rv, face_ru)
    paint(face_mask, skin)
    fringe_v = face_cv - face_rv + (0.08 + 0.85 * ident.hair_coverage) * face_rv
    paint(face_mask & (fv < fringe_v), hair)

    eye_du = 0.14 + 0.18 * ident.eye_spacing
    eye_r = 0.045 + 0.065 * ident.eye_size
    iris = _lerp((0.45, 0.65, 0.95), (0.30, 0.16, 0.07), ident.iris_tone)
    for su in (-1.0, 1.0):
        paint(ellipse(-0.12, su * eye_du, eye_r * 0.75, eye_r), (0.97, 0.97, 0.97))
        paint(ellipse(-0.12, su * eye_du, eye_r * 0.45, eye_r * 0.45), iris)

    # eyebrows: bars tilted by the brow angle, mirrored left/right
    ang = np.deg2rad((ident.brow_angle - 0.5) * 56.0)
    brow_color = tuple(x * 0.7 for x in hair)
    for su in (-1.0, 1.0):
        dv = fv - (-0.12 - eye_r * 0.75 - 0.10)
        du = fu - su * eye_du
        along = np.cos(su * ang) * du + np.sin(su * ang) * dv
        perp = -np.sin(su * ang) * du + np.cos(su * ang) * dv
        paint((np.abs(along) <= eye_r * 1.6) & (np.abs(perp) <= 0.026), brow_color)

    nose_len = 0.10 + 0.24 * ident.nose_length
    nose_top = -0.05
    tri = (fv >= nose_top) & (fv <= nose_top + nose_len) & \
          (np.abs(fu) <= (fv - nose_top) / nose_len * 0.08)
    paint(tri, tuple(x * 0.8 for x in skin))

    mouth_w = 0.10 + 0.22 * ident.mouth_width
    curve = np.clip((ident.mouth_curve - 0.5) * 0.8 + nuis.expression, -0.7, 0.7)
    mouth_v = 0.33 + curve * ((fu / mouth_w) ** 2 - 0.5) * 0.25
    band = (np.abs(fv - mouth_v) <= 0.04) & (np.abs(fu) <= mouth_w)
    paint(band, (0.72, 0.24, 0.24))

    img *= nuis.gain
    np.clip(img, 0.0, 1.0, out=img)
    out = img.reshape(3, size, ss, size, ss).mean(axis=(2, 4))
    # one binomial smoothing pass: feature edges span 2-3 pixels like real
    # photographs instead of razor-sharp rasterization steps
    k = (0.25, 0.5, 0.25)
    padded = np.pad(out, ((0, 0), (1, 1), (1, 1)), mode="edge")
    sm = np.zeros_like(out)
    for di, wi in zip((0, 1, 2), k):
        for dj, wj in zip((0, 1, 2), k):
            sm += wi * wj * padded[:, di:di + size, dj:dj + size]
    return sm.astype(np.float32)


# -- preprocessing -------------------------------------------------------------

def preprocess_input(img01: np.ndarray, mean: np.ndarray) -> np.ndarray:
    """Inputs (I_LR, I_GI): subtract the per-channel training mean."""
    if mean is None:
        raise ValidationError("preprocess_input: dataset mean not computed")
    mean = np.asarray(mean, dtype=img01.dtype)
    if mean.shape != (3,):
        raise ValidationError(f"mean must be 3 per-channel scalars, got {mean.shape}")
    return img01 - mean[:, None, None]


def preprocess_gt(img01: np.ndarray) -> np.ndarray:
    """Ground truth: rescale [0,1] -> [-1,1]."""
    return img01.astype(np.float32) * 2.0 - 1.0


def depreprocess_gt(img_pm1: np.ndarray) -> np.ndarray:
    return np.clip((img_pm1 + 1.0) / 2.0, 0.0, 1.0)


def to_uint8(img01: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img01 * 255.0), 0, 255).astype(np.uint8)


# -- dataset on disk -----------------------------------------------------------

def _write_png(path: Path, img01_chw: np.ndarray):
    arr = to_uint8(img01_chw).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path)


def _read_png(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def build_dataset(n_identities: int, images_per_identity: int, hr_size: int,
                  seed: int, out_dir, nuisance_mode: str = "full") -> dict:
    """Render and write the dataset; returns the manifest dict.

    Layout: out_dir/identity_<k>/img_<j>.png + manifest.json + mean.json.
    Splits are disjoint by identity: floor(n/4) each for val and test, the
    rest train.
    """
    if images_per_identity < 2:
        raise ValidationError(
            "images_per_identity must be >= 2: single-image identities cannot "
            "provide a guiding image and are removed from training data")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    ids = list(range(n_identities))
    perm = np.random.default_rng((seed, _SPLIT_STREAM)).permutation(n_identities)
    n_val = n_test = n_identities // 4
    splits = {
        "train": sorted(int(ids[i]) for i in perm[: n_identities - n_val - n_test]),
        "val": sorted(int(ids[i]) for i in perm[n_identities - n_val - n_test:
                                                n_identities - n_test]),
        "test": sorted(int(ids[i]) for i in perm[n_identities - n_test:]),
    }

    mean_acc = np.zeros(3, dtype=np.float64)
    mean_n = 0
    train_set = set(splits["train"])
    for k in range(n_identities):
        ident = IdentityParams.from_rng(np.random.default_rng((seed, _ID_STREAM, k)))
        id_dir = out / f"identity_{k:03d}"
        id_dir.mkdir(exist_ok=True)
        for j in range(images_per_identity):
            nu = NuisanceParams.from_rng(
                np.random.default_rng((seed, _NU_STREAM, k, j)), mode=nuisance_mode)
            img = render_face(ident, nu, hr_size)
            _write_png(id_dir / f"img_{j:02d}.png", img)
            if k in train_set:
                # mean over the written 8-bit values, matching what loads back
                mean_acc += to_uint8(img).astype(np.float64).mean(axis=(1, 2)) / 255.0
                mean_n += 1
    mean = (mean_acc / max(mean_n, 1)).round(6)

    manifest = {
        "version": 1,
        "seed": seed,
        "hr_size": hr_size,
        "images_per_identity": images_per_identity,
        "n_identities": n_identities,
        "nuisance_mode": nuisance_mode,
        "splits": splits,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (out / "mean.json").write_text(json.dumps(
        {"r": mean[0], "g": mean[1], "b": mean[2]}, sort_keys=True) + "\n")
    return manifest


class SynthDataset:
    """In-memory view of a built dataset directory."""

    def __init__(self, root, manifest: dict, mean: np.ndarray):
        self.root = Path(root)
        self.manifest = manifest
        self.mean = mean
        self.hr_size = manifest["hr_size"]
        self.splits = manifest["splits"]
        self.images: dict[int, list[np.ndarray]] = {}
        self.paths: dict[int, list[Path]] = {}
        for k in range(manifest["n_identities"]):
            id_dir = self.root / f"identity_{k:03d}"
            paths = sorted(id_dir.glob("img_*.png"))
            self.paths[k] = paths
            self.images[k] = [_read_png(p) for p in paths]

    @staticmethod
    def load(root) -> "SynthDataset":
        root = Path(root)
        mpath = root / "manifest.json"
        if not mpath.exists():
            raise ValidationError(f"no manifest.json under {root}")
        manifest = json.loads(mpath.read_text())
        mj = json.loads((root / "mean.json").read_text())
        mean = np.array([mj["r"], mj["g"], mj["b"]], dtype=np.float32)
        return SynthDataset(root, manifest, mean)

    @staticmethod
    def from_arrays(images: dict, hr_size: int, splits: dict,
                    mean=None) -> "SynthDataset":
        """In-memory dataset (tests and embedding); no files touched."""
        ds = SynthDataset.__new__(SynthDataset)
        ds.root = Path("<memory>")
        ds.manifest = {"version": 1, "seed": -1, "hr_size": hr_size,
                       "images_per_identity": max(len(v) for v in images.values()),
                       "n_identities": len(images), "nuisance_mode": "none",
                       "splits": splits}
        ds.hr_size = hr_size
        ds.splits = splits
        ds.images = {k: [np.asarray(v, dtype=np.float32) for v in vs]
                     for k, vs in images.items()}
        ds.paths = {k: [Path(f"<memory>/identity_{k:03d}/img_{j:02d}.png")
                        for j in range(len(vs))] for k, vs in images.items()}
        if mean is None:
            mean = np.mean([v.mean(axis=(1, 2)) for vs in ds.images.values()
                            for v in vs], axis=0)
        ds.mean = np.asarray(mean, dtype=np.float32)
        return ds

    def identities(self, split: str) -> list[int]:
        if split not in self.splits:
            raise ValidationError(f"unknown split {split!r}")
        return list(self.splits[split])

    def split_of(self, identity_id: int) -> str:
        for name, ids in self.splits.items():
            if identity_id in ids:
                return name
        raise ValidationError(f"identity {identity_id} not in any split")

    def content_digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.images):
            for img in self.images[k]:
                h.update(to_uint8(img).tobytes())
        return h.hexdigest()


@dataclass
class TrainingTriple:
    i_lr: np.ndarray                  # (3, hr/8, hr/8), input-preprocessed
    i_gi: np.ndarray | None           # (3, hr, hr), input-preprocessed
    i_gt: np.ndarray                  # (3, hr, hr), GT-preprocessed [-1, 1]
    i_gt_input: np.ndarray            # GT in input preprocessing (warp target)
    identity_id: int
    gt_index: int
    guide_identity: int | None
    guide_index: int | None


def sample_triple(dataset: SynthDataset, identity_id: int,
                  rng: np.random.Generator, guide_mode: str = "normal",
                  pool: list[int] | None = None) -> TrainingTriple:
    """One supervised example; the guide comes uniformly from the identity's
    remaining images ("normal"), from a uniformly random different identity
    ("shuffled"), or not at all ("none")."""
    imgs = dataset.images[identity_id]
    m = len(imgs)
    if guide_mode == "normal" and m < 2:
        raise ValidationError(
            f"identity {identity_id} has {m} image(s); guided sampling needs >= 2")
    gt_idx = int(rng.integers(m))
    raw_gt = imgs[gt_idx]

    guide_identity = guide_index = None
    i_gi = None
    if guide_mode == "normal":
        remaining = [j for j in range(m) if j != gt_idx]
        guide_index = remaining[int(rng.integers(len(remaining)))]
        guide_identity = identity_id
    elif guide_mode == "shuffled":
        if pool is None:
            pool = dataset.identities(dataset.split_of(identity_id))
        others = [k for k in pool if k != identity_id]
        if not others:
            raise ValidationError("shuffled guide mode needs a second identity")
        guide_identity = others[int(rng.integers(len(others)))]
        guide_index = int(rng.integers(len(dataset.images[guide_identity])))
    elif guide_mode != "none":
        raise ValidationError(f"unknown guide_mode {guide_mode!r}")

    if guide_identity is not None:
        i_gi = preprocess_input(dataset.images[guide_identity][guide_index],
                                dataset.mean)
    hr = dataset.hr_size
    lr_raw = bicubic_resize(raw_gt, hr // 8, hr // 8)
    return TrainingTriple(
        i_lr=preprocess_input(lr_raw, dataset.mean),
        i_gi=i_gi,
        i_gt=preprocess_gt(raw_gt),
        i_gt_input=preprocess_input(raw_gt, dataset.mean),
        identity_id=identity_id,
        gt_index=gt_idx,
        guide_identity=guide_identity,
        guide_index=guide_index,
    )
