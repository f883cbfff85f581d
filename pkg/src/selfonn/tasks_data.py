"""Desk-scale datasets and metrics for the regression/segmentation tasks.

Everything is seeded and offline: a procedural 60x60 grayscale generator
stands in for photographic corpora, plus ingestion of user-supplied PGM/PNG
directories. Samples hold maps normalized to [-1, 1]; 8-bit images map
affinely onto that range.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import tensor_core as tc

#: Reported SNR ceiling; exact reconstruction would otherwise divide by zero.
SNR_CAP_DB = 99.0

TASK_KINDS = ("denoise", "synthesize", "transform", "segment", "toy_rotate180")


@dataclass
class Sample:
    """One training pair, both maps in [-1, 1]."""

    input: np.ndarray
    target: np.ndarray
    id: str

    def __post_init__(self):
        self.input = np.asarray(self.input, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        for name, arr in (("input", self.input), ("target", self.target)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"sample {self.id}: non-finite {name}")
            if np.max(np.abs(arr)) > 1.0 + 1e-12:
                raise ValueError(f"sample {self.id}: {name} outside [-1, 1]")


@dataclass
class Fold:
    train: list
    test: list
    seed: int = 0

    def __post_init__(self):
        overlap = {s.id for s in self.train} & {s.id for s in self.test}
        if overlap:
            raise ValueError(f"train/test overlap: {sorted(overlap)[:5]}")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def snr_db(reference: np.ndarray, output: np.ndarray) -> float:
    """10*log10 of reference variance over error variance, capped at +99 dB.

    The "noise" is the difference image reference - output; a constant
    reference has no signal power and is rejected.
    """
    reference = np.asarray(reference, dtype=np.float64)
    output = np.asarray(output, dtype=np.float64)
    if reference.shape != output.shape:
        raise tc.ShapeError(f"reference {reference.shape} vs output {output.shape}")
    sig = float(np.var(reference))
    if sig <= 0.0:
        raise ValueError("constant reference: SNR undefined")
    noise = float(np.var(reference - output))
    if noise == 0.0:
        return SNR_CAP_DB
    return min(10.0 * np.log10(sig / noise), SNR_CAP_DB)


def add_gwn_at_snr(clean: np.ndarray, target_snr_db: float, seed) -> np.ndarray:
    """Add zero-mean Gaussian noise at an exact variance ratio.

    The draw is rescaled so the realized noise variance equals
    var(clean) / 10**(snr/10) exactly, not just in expectation.
    """
    clean = np.asarray(clean, dtype=np.float64)
    sig = float(np.var(clean))
    if sig <= 0.0:
        raise ValueError("constant input: SNR target unreachable")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(clean.shape)
    noise -= noise.mean()
    std = noise.std()
    if std == 0.0:
        raise ValueError("degenerate noise draw")
    want = np.sqrt(sig / 10.0 ** (target_snr_db / 10.0))
    return clean + noise * (want / std)


def f1_and_ce(output: np.ndarray, mask: np.ndarray, threshold: float = 0.0):
    """F1 score and classification error of ``output > threshold`` vs mask.

    All-negative prediction against an all-negative mask counts as perfect
    (F1 = 1); otherwise F1 = 2TP / (2TP + FP + FN). CE = (FP + FN) / total.
    """
    output = np.asarray(output)
    mask = np.asarray(mask)
    if output.shape != mask.shape:
        raise tc.ShapeError(f"output {output.shape} vs mask {mask.shape}")
    if mask.dtype != bool:
        vals = np.unique(mask)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError(f"mask is not binary (values {vals[:5]})")
        mask = mask.astype(bool)
    pred = output > threshold
    tp = int(np.sum(pred & mask))
    fp = int(np.sum(pred & ~mask))
    fn = int(np.sum(~pred & mask))
    denom = 2 * tp + fp + fn
    f1 = 1.0 if denom == 0 else 2.0 * tp / denom
    ce = (fp + fn) / mask.size
    return f1, ce


# ---------------------------------------------------------------------------
# Normalization and image I/O
# ---------------------------------------------------------------------------


def u8_to_unit(img: np.ndarray) -> np.ndarray:
    """[0, 255] -> [-1, 1] affine map."""
    img = np.asarray(img)
    return img.astype(np.float64) / 255.0 * 2.0 - 1.0


def unit_to_u8(x: np.ndarray) -> np.ndarray:
    """[-1, 1] -> [0, 255], clamped then rounded to nearest."""
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    return np.rint((x + 1.0) * 127.5).astype(np.uint8)


def read_pgm(path) -> np.ndarray:
    """Binary 8-bit PGM (P5) reader; rejects 16-bit files."""
    with open(path, "rb") as fh:
        data = fh.read()
    # header: magic, width, height, maxval as whitespace/comment-separated tokens
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.match(rb"\s*(?:#[^\n]*\n\s*)*([^\s#]+)", data[pos:])
        if not m:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(m.group(1))
        pos += m.end()
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    if not 0 < maxval < 256:
        raise ValueError(f"{path}: unsupported maxval {maxval} (8-bit only)")
    pos += 1  # single whitespace byte after maxval
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    if pixels.size != width * height:
        raise ValueError(f"{path}: pixel payload truncated")
    return pixels.reshape(height, width).copy()


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError("write_pgm wants a 2D uint8 array")
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(img.tobytes())


def read_image(path) -> np.ndarray:
    """8-bit grayscale array from a PGM or PNG (or anything PIL reads)."""
    path = os.fspath(path)
    if path.lower().endswith(".pgm"):
        return read_pgm(path)
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def write_image(path, img: np.ndarray) -> None:
    path = os.fspath(path)
    if path.lower().endswith(".pgm"):
        write_pgm(path, img)
    else:
        Image.fromarray(np.asarray(img, dtype=np.uint8), mode="L").save(path)


# ---------------------------------------------------------------------------
# Procedural corpus
# ---------------------------------------------------------------------------


def _coords(size):
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return ys / max(h - 1, 1), xs / max(w - 1, 1)


def _texture(rng: np.random.Generator, size) -> np.ndarray:
    ys, xs = _coords(size)
    img = rng.uniform(-0.3, 0.3) + rng.uniform(-0.8, 0.8) * xs + rng.uniform(-0.8, 0.8) * ys
    for _ in range(rng.integers(2, 5)):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(1.5, 6.0)
        phase = rng.uniform(0, 2 * np.pi)
        carrier = np.cos(theta) * xs + np.sin(theta) * ys
        img += rng.uniform(0.2, 0.7) * np.sin(2 * np.pi * freq * carrier + phase)
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0.15, 0.85, 2)
        sy, sx = rng.uniform(0.05, 0.25, 2)
        img += rng.uniform(-1.0, 1.0) * np.exp(
            -(((ys - cy) / sy) ** 2 + ((xs - cx) / sx) ** 2)
        )
    img += rng.normal(0, 0.05, size)
    return img


def _to_u8_full_range(img: np.ndarray) -> np.ndarray:
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        raise ValueError("degenerate texture (constant image)")
    return np.rint((img - lo) / (hi - lo) * 255.0).astype(np.uint8)


def make_texture_images(count: int, size=(60, 60), seed=0):
    """Seeded grayscale textures: gradients + oriented gratings + blobs."""
    rng = np.random.default_rng(seed)
    return [_to_u8_full_range(_texture(rng, size)) for _ in range(count)]


def make_shape_images(count: int, size=(60, 60), seed=0):
    """(image, mask) pairs: textured background with brighter filled shapes."""
    rng = np.random.default_rng(seed)
    out = []
    ys, xs = _coords(size)
    for _ in range(count):
        base = 0.25 * _texture(rng, size)
        mask = np.zeros(size, dtype=bool)
        for _ in range(rng.integers(1, 4)):
            cy, cx = rng.uniform(0.2, 0.8, 2)
            ry, rx = rng.uniform(0.08, 0.22, 2)
            if rng.random() < 0.5:
                inside = ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0
            else:
                inside = (np.abs(ys - cy) <= ry) & (np.abs(xs - cx) <= rx)
            mask |= inside
        img = base + np.where(mask, rng.uniform(1.2, 1.8), 0.0)
        out.append((_to_u8_full_range(img), mask))
    return out


# ---------------------------------------------------------------------------
# Toy problem and folds
# ---------------------------------------------------------------------------


def rotate180(img: np.ndarray) -> np.ndarray:
    return np.asarray(img)[::-1, ::-1]


TOY_BASE_AMPLITUDE = 0.85
TOY_JITTER = 0.02


def make_toy_rotate180(count: int, seed=0, size: int = 3):
    """Jittered copies of one seeded base pattern, paired with their
    180-degree rotations.

    The reference two-layer network's output-side receptive fields do not
    reach the rotated source pixel for every output position, so fully
    independent random images would leave most of the mapping unlearnable.
    Low jitter around a shared base keeps every target pixel predictable
    while the images stay random and inside [-1, 1].
    """
    rng = np.random.default_rng(seed)
    base = rng.uniform(-TOY_BASE_AMPLITUDE, TOY_BASE_AMPLITUDE, (size, size))
    samples = []
    for i in range(count):
        img = base + TOY_JITTER * rng.standard_normal((size, size))
        np.clip(img, -1.0, 1.0, out=img)
        samples.append(Sample(img, rotate180(img).copy(), f"toy-{i:04d}"))
    return samples


def make_folds(corpus, n_folds: int = 10, train_fraction: float = 0.10, seed=0):
    """Seeded rotation folds: shuffle once, then give each fold the next
    consecutive block of ceil(train_fraction * N) samples as its train set
    (wrapping around only when the corpus is too small for disjoint blocks).
    The remainder of the corpus, in shuffled order, is that fold's test set.
    """
    corpus = list(corpus)
    n = len(corpus)
    if n < n_folds:
        raise ValueError(f"corpus of {n} cannot make {n_folds} folds")
    train_size = int(np.ceil(train_fraction * n))
    if train_size < 1:
        raise ValueError("train_fraction too small for this corpus")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    folds = []
    for j in range(n_folds):
        idx = [perm[(j * train_size + i) % n] for i in range(train_size)]
        chosen = set(idx)
        train = [corpus[i] for i in idx]
        test = [corpus[i] for i in perm if i not in chosen]
        folds.append(Fold(train=train, test=test, seed=int(seed)))
    return folds


# ---------------------------------------------------------------------------
# Task builders
# ---------------------------------------------------------------------------


def build_denoise_corpus(count: int, noise_snr_db: float = 0.0, size=(60, 60), seed=0):
    """Clean texture targets with clamped 0 dB (by default) GWN inputs."""
    images = make_texture_images(count, size, seed)
    samples = []
    for i, img in enumerate(images):
        target = u8_to_unit(img)
        noisy = add_gwn_at_snr(target, noise_snr_db, [seed, 7919, i])
        samples.append(
            Sample(np.clip(noisy, -1.0, 1.0), target, f"denoise-{i:04d}")
        )
    return samples


def build_segment_corpus(count: int, size=(60, 60), seed=0):
    """Shape images with +/-1 mask targets."""
    samples = []
    for i, (img, mask) in enumerate(make_shape_images(count, size, seed)):
        target = np.where(mask, 1.0, -1.0)
        samples.append(Sample(u8_to_unit(img), target, f"segment-{i:04d}"))
    return samples


def build_synthesize_folds(count: int, per_fold: int = 8, size=(60, 60), seed=0):
    """Synthesis folds: each target image gets its own fixed white-Gaussian
    input (unit variance, clamped). The network memorizes the fold's pairs,
    so metrics are reported on the train set and test is empty.
    """
    if count % per_fold:
        raise ValueError(f"count {count} not a multiple of per_fold {per_fold}")
    images = make_texture_images(count, size, seed)
    folds = []
    for j in range(count // per_fold):
        train = []
        for i in range(per_fold):
            gi = j * per_fold + i
            rng = np.random.default_rng([seed, 104729, gi])
            wgn = rng.standard_normal(size)
            wgn -= wgn.mean()
            wgn /= wgn.std()
            train.append(
                Sample(np.clip(wgn, -1.0, 1.0), u8_to_unit(images[gi]),
                       f"synth-{gi:04d}")
            )
        folds.append(Fold(train=train, test=[], seed=int(seed)))
    return folds


def build_transform_folds(count: int, per_fold: int = 4, size=(60, 60), seed=0):
    """Transformation folds: images grouped in twos, each pair serving as
    both input and output of each other (A->B, B->A, C->D, D->C per fold).
    """
    if per_fold % 2 or count % per_fold:
        raise ValueError("per_fold must be even and divide count")
    images = [u8_to_unit(im) for im in make_texture_images(count, size, seed)]
    folds = []
    for j in range(count // per_fold):
        train = []
        for pair in range(per_fold // 2):
            a = j * per_fold + 2 * pair
            b = a + 1
            train.append(Sample(images[a], images[b], f"transform-{a:04d}-to-{b:04d}"))
            train.append(Sample(images[b], images[a], f"transform-{b:04d}-to-{a:04d}"))
        folds.append(Fold(train=train, test=[], seed=int(seed)))
    return folds


# ---------------------------------------------------------------------------
# Manifest I/O (user-supplied or exported datasets)
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"


def save_dataset(directory, task_kind: str, folds) -> str:
    """Write samples as PGM files plus a manifest tying ids to folds.

    8-bit quantization applies; float values survive to within 1/255.
    """
    if task_kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {task_kind!r}")
    os.makedirs(directory, exist_ok=True)
    seen = {}
    sample_entries = []
    fold_entries = []
    for fold in folds:
        for part_name, part in (("train", fold.train), ("test", fold.test)):
            for s in part:
                if s.id in seen:
                    continue
                seen[s.id] = True
                inp = f"{s.id}_in.pgm"
                tgt = f"{s.id}_tgt.pgm"
                write_pgm(os.path.join(directory, inp), unit_to_u8(s.input))
                write_pgm(os.path.join(directory, tgt), unit_to_u8(s.target))
                sample_entries.append({"id": s.id, "input": inp, "target": tgt})
        fold_entries.append(
            {
                "seed": fold.seed,
                "train": [s.id for s in fold.train],
                "test": [s.id for s in fold.test],
            }
        )
    doc = {
        "version": 1,
        "task": task_kind,
        "samples": sample_entries,
        "folds": fold_entries,
    }
    path = os.path.join(directory, MANIFEST_NAME)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def load_dataset(manifest_path):
    """Read a manifest back into folds of normalized samples.

    Segmentation targets re-binarize with the >127 => positive rule; other
    tasks get plain [0,255] -> [-1,1] normalization.
    """
    with open(manifest_path) as fh:
        doc = json.load(fh)
    if doc.get("version") != 1:
        raise ValueError(f"{manifest_path}: unsupported manifest version")
    task_kind = doc.get("task")
    if task_kind not in TASK_KINDS:
        raise ValueError(f"{manifest_path}: unknown task {task_kind!r}")
    base = os.path.dirname(os.path.abspath(manifest_path))
    samples = {}
    for entry in doc["samples"]:
        inp = u8_to_unit(read_image(os.path.join(base, entry["input"])))
        raw_t = read_image(os.path.join(base, entry["target"]))
        if task_kind == "segment":
            tgt = np.where(raw_t > 127, 1.0, -1.0)
        else:
            tgt = u8_to_unit(raw_t)
        samples[entry["id"]] = Sample(inp, tgt, entry["id"])
    folds = []
    for f in doc["folds"]:
        folds.append(
            Fold(
                train=[samples[i] for i in f["train"]],
                test=[samples[i] for i in f["test"]],
                seed=int(f.get("seed", 0)),
            )
        )
    if not folds:
        raise ValueError(f"{manifest_path}: no folds defined")
    return task_kind, folds
