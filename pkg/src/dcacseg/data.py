"""Dataset manifests, synthetic multi-domain data, folds, patch sampling and augmentation."""

from __future__ import annotations

import json
import logging
import math
import os
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter
from sklearn.model_selection import StratifiedKFold

if TYPE_CHECKING:
    from .planner import PlanConfig

logger = logging.getLogger(__name__)


class ManifestError(ValueError):
    """Raised for unreadable or inconsistent dataset manifests."""


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sample:
    image_path: Path
    mask_path: Path
    domain_id: int

    @property
    def image_id(self) -> str:
        return self.image_path.stem


@dataclass
class DatasetManifest:
    samples: list[Sample]
    domain_names: list[str]
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.domain_names) < 1:
            raise ManifestError("manifest needs at least one domain")
        for s in self.samples:
            if not 0 <= s.domain_id < len(self.domain_names):
                raise ManifestError(
                    f"domain_id {s.domain_id} >= K={len(self.domain_names)} for {s.image_path}"
                )

    @property
    def num_domains(self) -> int:
        return len(self.domain_names)

    @property
    def domain_ids(self) -> np.ndarray:
        return np.array([s.domain_id for s in self.samples], dtype=np.int64)

    def domain_counts(self) -> list[int]:
        return np.bincount(self.domain_ids, minlength=self.num_domains).tolist()

    @property
    def balanced(self) -> bool:
        return len(set(self.domain_counts())) == 1

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, indices: Sequence[int]) -> DatasetManifest:
        return DatasetManifest([self.samples[i] for i in indices], list(self.domain_names), self.seed)

    def select_domains(self, domains: Sequence[int]) -> DatasetManifest:
        """Keep only ``domains``; ids are renumbered in the given order."""
        remap = {d: i for i, d in enumerate(domains)}
        samples = [Sample(s.image_path, s.mask_path, remap[s.domain_id])
                   for s in self.samples if s.domain_id in remap]
        return DatasetManifest(samples, [self.domain_names[d] for d in domains], self.seed)

    def to_dict(self, relative_to: Path | None = None) -> dict:
        def rel(p: Path) -> str:
            if relative_to is not None:
                try:
                    return os.path.relpath(p, relative_to)
                except ValueError:
                    pass
            return str(p)

        return {
            "domains": list(self.domain_names),
            "seed": self.seed,
            "samples": [
                {"image": rel(s.image_path), "mask": rel(s.mask_path), "domain": s.domain_id}
                for s in self.samples
            ],
        }

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(path.parent.resolve()), indent=2) + "\n")


def merge_manifests(manifests: Sequence[DatasetManifest]) -> DatasetManifest:
    """Concatenate manifests; domain ids of later manifests are offset."""
    samples: list[Sample] = []
    names: list[str] = []
    for m in manifests:
        offset = len(names)
        names.extend(m.domain_names)
        samples.extend(Sample(s.image_path, s.mask_path, s.domain_id + offset) for s in m.samples)
    return DatasetManifest(samples, names, manifests[0].seed if manifests else 0)


def load_image(path: str | Path) -> np.ndarray:
    """RGB image as float32 H x W x 3 in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def load_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.uint8)


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="L").save(path)


def load_manifest(path: str | Path, num_classes: int = 2) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"missing file: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"invalid manifest JSON in {path}: {e}") from e
    root = path.parent
    domains = list(doc.get("domains") or [])
    samples = []
    for entry in doc.get("samples", []):
        img_p = (root / entry["image"]).resolve()
        mask_p = (root / entry["mask"]).resolve()
        for p in (img_p, mask_p):
            if not p.is_file():
                raise ManifestError(f"missing file: {p}")
        dom = int(entry["domain"])
        if not domains:
            raise ManifestError("manifest has no domains")
        if dom < 0 or dom >= len(domains):
            raise ManifestError(f"domain_id {dom} >= K={len(domains)} for {img_p}")
        img = load_image(img_p)
        mask = load_mask(mask_p)
        if mask.ndim != 2 or mask.shape != img.shape[:2]:
            raise ManifestError(
                f"mask/image shape mismatch for {img_p}: {mask.shape} vs {img.shape[:2]}"
            )
        bad = np.setdiff1d(np.unique(mask), np.arange(num_classes))
        if bad.size:
            kind = "non-binary mask" if num_classes == 2 else "invalid mask label"
            raise ManifestError(f"{kind}: value {int(bad[0])} in {mask_p}")
        samples.append(Sample(img_p, mask_p, dom))
    return DatasetManifest(samples, domains, int(doc.get("seed", 0)))


@dataclass
class CaseData:
    image: np.ndarray  # H x W x 3 float32
    mask: np.ndarray   # H x W uint8
    domain_id: int
    image_id: str


def load_cases(manifest: DatasetManifest) -> list[CaseData]:
    return [CaseData(load_image(s.image_path), load_mask(s.mask_path), s.domain_id, s.image_id)
            for s in manifest.samples]


# ---------------------------------------------------------------------------
# synthetic multi-domain data
# ---------------------------------------------------------------------------

_BACKGROUND_RGB = np.array([0.86, 0.68, 0.78])
_FOREGROUND_RGB = np.array([0.50, 0.30, 0.58])


@dataclass
class SynthSpec:
    """Generator settings. Per-domain lists default to evenly spread values."""

    num_domains: int = 4
    samples_per_domain: int = 10
    image_size: int = 96
    blob_count_range: tuple[int, int] = (1, 4)
    hue_degrees: list[float] | None = None
    texture_frequency: list[float] | None = None
    noise_level: list[float] | None = None
    texture_amplitude: float = 0.05

    def __post_init__(self) -> None:
        if self.num_domains < 1:
            raise ValueError("num_domains must be >= 1")
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")
        if self.samples_per_domain < 1:
            raise ValueError("samples_per_domain must be >= 1")
        lo, hi = self.blob_count_range
        if not 1 <= lo <= hi:
            raise ValueError("blob_count_range must satisfy 1 <= lo <= hi")
        n = self.num_domains
        if self.hue_degrees is None:
            self.hue_degrees = [35.0 * d for d in range(n)]
        if self.texture_frequency is None:
            self.texture_frequency = [0.10 + 0.05 * d for d in range(n)]
        if self.noise_level is None:
            self.noise_level = [0.02 + 0.01 * (d % 3) for d in range(n)]
        for name in ("hue_degrees", "texture_frequency", "noise_level"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} needs one value per domain")


def hue_rotation_matrix(degrees: float) -> np.ndarray:
    """Rotation of RGB space about the gray axis; keeps (R+G+B)/3 unchanged."""
    t = math.radians(degrees)
    u = np.full(3, 1.0 / math.sqrt(3.0))
    cross = np.array([[0, -u[2], u[1]], [u[2], 0, -u[0]], [-u[1], u[0], 0]])
    return math.cos(t) * np.eye(3) + math.sin(t) * cross + (1 - math.cos(t)) * np.outer(u, u)


def chroma_hue(rgb: np.ndarray) -> np.ndarray:
    """Hue angle (degrees) in the chroma plane orthogonal to the gray axis."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    return np.degrees(np.arctan2(math.sqrt(3.0) * (g - b), 2 * r - g - b))


def blob_mask(size: int, count: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(count):
        cy, cx = rng.uniform(0.15, 0.85, size=2) * size
        ay, ax = rng.uniform(0.08, 0.2, size=2) * size
        phi = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(phi) + dy * np.sin(phi)
        v = -dx * np.sin(phi) + dy * np.cos(phi)
        mask |= (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
    return mask


def synth_image(mask: np.ndarray, spec: SynthSpec, domain: int, rng: np.random.Generator) -> np.ndarray:
    size = mask.shape[0]
    sigma = 1.0 / spec.texture_frequency[domain]
    texture = gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    texture /= texture.std() + 1e-12
    # foreground gets an extra finer-grained texture component
    fine = gaussian_filter(rng.standard_normal((size, size)), 0.5 * sigma, mode="wrap")
    fine /= fine.std() + 1e-12
    m = mask.astype(np.float64)[..., None]
    img = (1 - m) * _BACKGROUND_RGB + m * _FOREGROUND_RGB
    img = img + spec.texture_amplitude * (texture + m[..., 0] * fine)[..., None]
    img = img @ hue_rotation_matrix(spec.hue_degrees[domain]).T
    img = img + spec.noise_level[domain] * rng.standard_normal(img.shape)
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def synth_generate(spec: SynthSpec, seed: int, out_dir: str | Path) -> DatasetManifest:
    """Write ``num_domains * samples_per_domain`` PNG image/mask pairs plus ``manifest.json``.

    Mask geometry is drawn from a stream that ignores the domain, so only the
    appearance differs between domains. Output is a pure function of
    ``(spec, seed)``.
    """
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"unwritable directory: {out_dir}: {e}") from e
    if not os.access(out_dir, os.W_OK):
        raise OSError(f"unwritable directory: {out_dir}")

    samples = []
    lo, hi = spec.blob_count_range
    for d in range(spec.num_domains):
        for i in range(spec.samples_per_domain):
            geom_rng = np.random.default_rng([seed, 0, d, i])
            look_rng = np.random.default_rng([seed, 1, d, i])
            mask = blob_mask(spec.image_size, int(geom_rng.integers(lo, hi + 1)), geom_rng)
            img = synth_image(mask, spec, d, look_rng)
            name = f"d{d}_{i:04d}"
            img_p = out_dir / "images" / f"{name}.png"
            mask_p = out_dir / "masks" / f"{name}.png"
            Image.fromarray(img, mode="RGB").save(img_p)
            save_mask(mask.astype(np.uint8), mask_p)
            samples.append(Sample(img_p.resolve(), mask_p.resolve(), d))
    manifest = DatasetManifest(samples, [f"domain_{d}" for d in range(spec.num_domains)], seed)
    manifest.save(out_dir / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------


@dataclass
class FoldSplit:
    fold_assignments: np.ndarray
    k: int

    def train_indices(self, fold: int) -> list[int]:
        return np.flatnonzero(self.fold_assignments != fold).tolist()

    def val_indices(self, fold: int) -> list[int]:
        return np.flatnonzero(self.fold_assignments == fold).tolist()


def make_folds(manifest: DatasetManifest, k: int, seed: int) -> FoldSplit:
    """Domain-stratified k-fold assignment."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    n = len(manifest)
    if n < k:
        raise ValueError(f"cannot split {n} samples into {k} folds")
    y = manifest.domain_ids
    counts = np.bincount(y)
    if counts[counts > 0].min() < k:
        warnings.warn(f"a domain has fewer than {k} samples; stratification is best-effort")
    assignment = np.empty(n, dtype=np.int64)
    if counts.max() < k:
        # StratifiedKFold refuses this case: deal domain-grouped, shuffled samples round-robin
        rng = np.random.default_rng(seed)
        order = np.concatenate([rng.permutation(np.flatnonzero(y == d)) for d in range(len(counts))])
        assignment[order] = np.arange(n) % k
        return FoldSplit(assignment, k)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        skf = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
        for fold, (_, val_idx) in enumerate(skf.split(np.zeros(n), y)):
            assignment[val_idx] = fold
    return FoldSplit(assignment, k)


# ---------------------------------------------------------------------------
# patch sampling and augmentation
# ---------------------------------------------------------------------------


@dataclass
class Patch:
    image: np.ndarray  # P x P x 3 float32 in [0, 1]
    mask: np.ndarray   # P x P uint8
    domain_id: int


def pad_to(array: np.ndarray, size: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Symmetric zero padding so both spatial dims are >= size; returns offsets."""
    h, w = array.shape[:2]
    ph, pw = max(size - h, 0), max(size - w, 0)
    pad = [(ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)] + [(0, 0)] * (array.ndim - 2)
    if ph or pw:
        array = np.pad(array, pad)
    return array, (ph // 2, pw // 2)


def sample_patch(case: CaseData, patch_size: int, rng: np.random.Generator,
                 force_fg: bool) -> Patch:
    image, _ = pad_to(case.image, patch_size)
    mask, _ = pad_to(case.mask, patch_size)
    h, w = mask.shape
    fg = np.flatnonzero(mask) if force_fg else np.empty(0)
    if fg.size:
        cy, cx = divmod(int(fg[rng.integers(fg.size)]), w)
        y0 = min(max(cy - patch_size // 2, 0), h - patch_size)
        x0 = min(max(cx - patch_size // 2, 0), w - patch_size)
    else:
        y0 = int(rng.integers(h - patch_size + 1))
        x0 = int(rng.integers(w - patch_size + 1))
    return Patch(image[y0:y0 + patch_size, x0:x0 + patch_size].copy(),
                 mask[y0:y0 + patch_size, x0:x0 + patch_size].copy(), case.domain_id)


def sample_minibatch(cases: Sequence[CaseData], plan: PlanConfig,
                     rng: np.random.Generator) -> list[Patch]:
    """Draw ``plan.batch_size`` patches; each is foreground-centred with probability ``p_fg``."""
    if not cases:
        raise ValueError("empty manifest")
    batch = []
    for _ in range(plan.batch_size):
        case = cases[int(rng.integers(len(cases)))]
        force_fg = bool(rng.random() < plan.p_fg)
        batch.append(sample_patch(case, plan.patch_size, rng, force_fg))
    return batch


@dataclass
class AugmentConfig:
    p_mirror: float = 0.5
    p_rot90: float = 0.5
    p_intensity: float = 0.15
    intensity_range: tuple[float, float] = (0.9, 1.1)

    @classmethod
    def from_plan(cls, plan: PlanConfig) -> AugmentConfig:
        return cls(plan.p_mirror, plan.p_rot90, plan.p_intensity, tuple(plan.intensity_range))


def augment(batch: Sequence[Patch], rng: np.random.Generator,
            config: AugmentConfig | None = None) -> list[Patch]:
    cfg = config or AugmentConfig()
    out = []
    for p in batch:
        img, mask = p.image, p.mask
        if rng.random() < cfg.p_mirror:
            img, mask = img[:, ::-1], mask[:, ::-1]
        if rng.random() < cfg.p_mirror:
            img, mask = img[::-1], mask[::-1]
        if rng.random() < cfg.p_rot90:
            k = int(rng.integers(1, 4))
            img, mask = np.rot90(img, k), np.rot90(mask, k)
        if rng.random() < cfg.p_intensity:
            img = np.clip(img * rng.uniform(*cfg.intensity_range), 0.0, 1.0)
        out.append(Patch(np.ascontiguousarray(img, dtype=np.float32),
                         np.ascontiguousarray(mask), p.domain_id))
    return out


def patches_to_arrays(batch: Sequence[Patch]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack patches into (B,3,P,P) images, (B,P,P) masks and (B,) domain ids."""
    images = np.stack([p.image.transpose(2, 0, 1) for p in batch]).astype(np.float32)
    masks = np.stack([p.mask for p in batch]).astype(np.int64)
    domains = np.array([p.domain_id for p in batch], dtype=np.int64)
    return images, masks, domains
