"""Samples, manifest/PGM I/O, augmentation, cropping, folds and the synthetic face generator."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

IMAGE_SIZE = 60
CROP_SIZE = 48
ROTATION_ANGLES = (-15, -10, -5, 5, 10, 15)


class ManifestError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray
    expression_label: int
    identity_label: int
    subject_id: int
    provenance: str = "original"
    path: str | None = None

    def __post_init__(self):
        if self.image.shape != (IMAGE_SIZE, IMAGE_SIZE) or self.image.dtype != np.uint8:
            raise ValueError(f"sample image must be {IMAGE_SIZE}x{IMAGE_SIZE} uint8, "
                             f"got {self.image.shape} {self.image.dtype}")

    @property
    def labels(self) -> tuple[int, int, int]:
        return self.expression_label, self.identity_label, self.subject_id


# ---------------------------------------------------------------------------
# PGM and manifest files


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError("PGM output needs a 2-D uint8 array")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Read an 8-bit binary (P5) PGM."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: expected 8-bit PGM, maxval is {maxval}")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).copy()


def load_manifest(path: str | Path) -> list[Sample]:
    """Parse a tab-separated manifest and load each referenced PGM.

    Each non-comment line is ``image_path<TAB>expression<TAB>identity<TAB>subject``;
    image paths are relative to the manifest's directory.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    base = path.parent
    samples = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ManifestError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        rel, *nums = parts
        try:
            expr, ident, subj = (int(v) for v in nums)
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: labels must be integers ({exc})") from None
        if min(expr, ident, subj) < 0:
            raise ManifestError(f"{path}:{lineno}: labels must be non-negative")
        try:
            image = read_pgm(base / rel)
        except (OSError, ValueError) as exc:
            raise ManifestError(f"{path}:{lineno}: cannot read image {rel}: {exc}") from None
        if image.shape != (IMAGE_SIZE, IMAGE_SIZE):
            raise ManifestError(f"{path}:{lineno}: image {rel} is {image.shape[1]}x{image.shape[0]}, "
                                f"expected {IMAGE_SIZE}x{IMAGE_SIZE}")
        samples.append(Sample(image, expr, ident, subj, path=rel))
    return samples


def write_manifest(path: str | Path, samples: Sequence[Sample], image_dir: str = "images") -> None:
    """Write every sample as a PGM under ``image_dir`` plus the manifest."""
    path = Path(path)
    (path.parent / image_dir).mkdir(parents=True, exist_ok=True)
    lines = ["# image\texpression\tidentity\tsubject"]
    for k, s in enumerate(samples):
        rel = s.path or f"{image_dir}/{k:06d}.pgm"
        write_pgm(path.parent / rel, s.image)
        lines.append(f"{rel}\t{s.expression_label}\t{s.identity_label}\t{s.subject_id}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# augmentation and cropping


def flip_image(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


def rotate_image(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate about the image centre (bilinear, edges replicated), keeping the size."""
    if abs(angle_deg) > 45:
        raise ValueError(f"rotation angle must be within +-45 degrees, got {angle_deg}")
    if angle_deg == 0:
        return img.copy()
    out = ndimage.rotate(img.astype(np.float64), angle_deg, reshape=False, order=1, mode="nearest")
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def augment(samples: Iterable[Sample]) -> list[Sample]:
    """Original, flipped, six rotations and the six flipped rotations of each sample."""
    out = []
    for s in samples:
        flipped = flip_image(s.image)
        out.append(replace(s, image=s.image.copy(), provenance="original"))
        out.append(replace(s, image=flipped, provenance="flip"))
        for angle in ROTATION_ANGLES:
            out.append(replace(s, image=rotate_image(s.image, angle), provenance=f"rotation({angle})"))
        for angle in ROTATION_ANGLES:
            out.append(replace(s, image=rotate_image(flipped, angle), provenance=f"flip+rotation({angle})"))
    return out


def crop(img: np.ndarray, mode: str = "eval", rng: np.random.Generator | None = None,
         size: int = CROP_SIZE) -> np.ndarray:
    """Random crop in train mode, centre crop in eval mode."""
    margin = img.shape[0] - size
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode crop needs an rng")
        top, left = rng.integers(0, margin + 1, size=2)
    elif mode == "eval":
        top = left = margin // 2
    else:
        raise ValueError(f"unknown crop mode {mode!r}")
    return img[top : top + size, left : left + size]


def to_input(images: np.ndarray) -> np.ndarray:
    """uint8 [B,48,48] -> float32 [B,48,48,1] roughly centred on zero."""
    return ((np.asarray(images, dtype=np.float32) - 127.5) / 64.0)[..., None]


def batch_images(samples: Sequence[Sample], mode: str = "eval", rng: np.random.Generator | None = None) -> np.ndarray:
    return to_input(np.stack([crop(s.image, mode, rng) for s in samples]))


# ---------------------------------------------------------------------------
# subject-disjoint folds


@dataclass
class FoldSplit:
    assignments: dict[int, int]
    k: int

    def fold_of(self, subject_id: int) -> int:
        return self.assignments[subject_id]

    def subjects(self, fold: int) -> list[int]:
        return sorted(s for s, f in self.assignments.items() if f == fold)

    def split(self, samples: Sequence[Sample], fold: int) -> tuple[list[Sample], list[Sample]]:
        """(train, test) where test holds every sample whose subject is in ``fold``."""
        train = [s for s in samples if self.assignments[s.subject_id] != fold]
        test = [s for s in samples if self.assignments[s.subject_id] == fold]
        return train, test


def make_folds(samples: Sequence[Sample], k: int = 10, seed: int = 0) -> FoldSplit:
    subjects = sorted({s.subject_id for s in samples})
    if len(subjects) < k:
        raise ValueError(f"{len(subjects)} subjects cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(subjects))
    return FoldSplit({subjects[j]: pos % k for pos, j in enumerate(order)}, k)


# ---------------------------------------------------------------------------
# synthetic faces

# (row, col, sigma) of each facial region analogue on the 60x60 canvas
_REGIONS = {
    "brow_l": (17, 20, 3.0), "brow_r": (17, 40, 3.0),
    "eye_l": (24, 20, 2.5), "eye_r": (24, 40, 2.5),
    "nose": (33, 30, 3.0),
    "mouth_l": (43, 23, 3.0), "mouth_c": (44, 30, 3.0), "mouth_r": (43, 37, 3.0),
}


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic face-factor dataset.

    ``seed`` fixes the "world" (identity textures and expression patterns);
    ``sample_seed`` fixes the per-image nuisance draws, so two datasets of
    the same people can be drawn from one world.
    """

    num_identities: int = 8
    num_expressions: int = 6
    samples_per_cell: int = 40
    sessions_per_identity: int = 5
    variation_strength: float = 0.6
    expression_intensity: float = 40.0
    texture_contrast: float = 25.0
    noise_sigma: float = 6.0
    seed: int = 0
    sample_seed: int | None = None

    def __post_init__(self):
        if not 0 <= self.variation_strength <= 1:
            raise ValueError("variation_strength must be within [0, 1]")
        if self.samples_per_cell % self.sessions_per_identity:
            raise ValueError("samples_per_cell must be a multiple of sessions_per_identity")


def _blob(row: float, col: float, sigma: float) -> np.ndarray:
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    return np.exp(-((yy - row) ** 2 + (xx - col) ** 2) / (2 * sigma**2))


def _pattern(rng: np.random.Generator, jitter: float) -> np.ndarray:
    """A signed mixture of region blobs, positions jittered by up to ``jitter`` px."""
    out = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    for row, col, sigma in _REGIONS.values():
        amp = rng.choice([-1.0, 1.0]) * rng.uniform(0.3, 1.0)
        dr, dc = rng.uniform(-jitter, jitter, size=2)
        out += amp * _blob(row + dr, col + dc, sigma * rng.uniform(0.8, 1.3))
    return out / np.abs(out).max()


@dataclass
class SynthWorld:
    spec: SynthSpec
    textures: np.ndarray            # [N,60,60]
    deformations: np.ndarray        # [N,E,60,60]
    sessions: np.ndarray = field(repr=False)  # [N,S,2] brightness offset, horizontal gradient


def build_world(spec: SynthSpec) -> SynthWorld:
    rng = np.random.default_rng(spec.seed)
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    face = np.exp(-(((yy - 31) / 26.0) ** 2 + ((xx - 30) / 21.0) ** 2) ** 2)
    textures = np.empty((spec.num_identities, IMAGE_SIZE, IMAGE_SIZE))
    for k in range(spec.num_identities):
        field_ = ndimage.gaussian_filter(rng.standard_normal((IMAGE_SIZE, IMAGE_SIZE)), 3.0, mode="wrap")
        field_ /= field_.std()
        textures[k] = 70 + 90 * face + spec.texture_contrast * field_
    canonical = np.stack([_pattern(rng, 1.0) for _ in range(spec.num_expressions)])
    v = spec.variation_strength
    deformations = np.empty((spec.num_identities, spec.num_expressions, IMAGE_SIZE, IMAGE_SIZE))
    for k in range(spec.num_identities):
        for e in range(spec.num_expressions):
            deformations[k, e] = (1 - v) * canonical[e] + v * _pattern(rng, 3.0)
    sessions = np.stack([rng.uniform(-12, 12, size=spec.sessions_per_identity * spec.num_identities),
                         rng.uniform(-0.3, 0.3, size=spec.sessions_per_identity * spec.num_identities)],
                        axis=-1).reshape(spec.num_identities, spec.sessions_per_identity, 2)
    return SynthWorld(spec, textures, deformations, sessions)


def synth_generate(spec: SynthSpec) -> list[Sample]:
    """Deterministically render ``N * E * samples_per_cell`` faces.

    Each image is the identity's texture plus its identity-conditioned
    expression deformation (scaled by a per-sample intensity), a session
    lighting offset, and Gaussian pixel noise. Subjects are
    (identity, session) pairs, so subject-disjoint folds still see every
    identity during training.
    """
    world = build_world(spec)
    sample_seed = spec.seed + 1 if spec.sample_seed is None else spec.sample_seed
    rng = np.random.default_rng([sample_seed, 7919])
    xx = np.arange(IMAGE_SIZE)[None, :] - IMAGE_SIZE / 2
    per_session = spec.samples_per_cell // spec.sessions_per_identity
    samples = []
    for k in range(spec.num_identities):
        for e in range(spec.num_expressions):
            for j in range(spec.samples_per_cell):
                session = j // per_session
                offset, slope = world.sessions[k, session]
                intensity = spec.expression_intensity * rng.uniform(0.7, 1.3)
                img = (world.textures[k] + intensity * world.deformations[k, e] + offset + slope * xx
                       + rng.normal(0.0, spec.noise_sigma, (IMAGE_SIZE, IMAGE_SIZE)))
                pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
                subject = k * spec.sessions_per_identity + session
                samples.append(Sample(pixels, e, k, subject,
                                      path=f"images/id{k:03d}_ex{e}_{j:03d}.pgm"))
    log.debug("generated %d synthetic samples", len(samples))
    return samples
