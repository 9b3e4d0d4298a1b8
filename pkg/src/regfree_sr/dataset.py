"""Aligned (LR, HR) training pairs cut from simulated measurements.

Each HR source image is degraded once as a whole; patches are then cut on a
stride grid from both the HR image and its simulation, so every pair shares
its field of view by construction. Augmentation (right-angle rotations and a
horizontal flip) is recorded per pair and applied identically to both members
when the pair is materialized.

On-disk layout written by :func:`save_dataset`::

    <out>/manifest.json
    <out>/<source_id>/<row>_<col>_lr.png     16-bit
    <out>/<source_id>/<row>_<col>_hr.png     16-bit

``row``/``col`` are the patch origin in HR pixels. Augmented variants reuse the
same files and differ only in their manifest record.
"""

from __future__ import annotations

import json
import math
import os
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .degradation import DegradationParams, degrade_array, gaussian_kernel
from .image import Image, load_image, make_rng, save_image

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class PairRecord:
    source_id: str
    origin: Tuple[int, int]  # HR pixels
    rot: int = 0  # quarter turns, counter-clockwise
    flip: bool = False  # horizontal flip after rotation
    split: str = "train"

    @property
    def key(self):
        return (self.source_id, self.origin)


@dataclass(frozen=True, eq=False)
class PatchPair:
    lr: Image
    hr: Image
    source_id: str
    origin: Tuple[int, int]
    rot: int = 0
    flip: bool = False


@dataclass
class DatasetManifest:
    records: List[PairRecord]
    params: DegradationParams
    patch_lr: int
    stride: int
    augment: Dict[str, bool]
    split_fraction: float
    seed: int
    splits: Dict[str, str]  # source_id -> "train" | "validation"
    patches: Dict[tuple, tuple] = field(default_factory=dict, repr=False)  # key -> (lr, hr) arrays
    root: Optional[str] = None

    @property
    def factor(self) -> int:
        return self.params.factor

    def select(self, split: str) -> List[PairRecord]:
        return [r for r in self.records if r.split == split]

    def arrays(self, record: PairRecord):
        lr, hr = self.patches[record.key]
        return augment_array(lr, record.rot, record.flip), augment_array(hr, record.rot, record.flip)

    def pair(self, record: PairRecord) -> PatchPair:
        lr, hr = self.arrays(record)
        return PatchPair(Image(lr), Image(hr), record.source_id, record.origin, record.rot, record.flip)

    def stack(self, split: str):
        """(lr, hr) float32 batches for every record of ``split``, manifest order."""
        recs = self.select(split)
        if not recs:
            return None, None
        lrs, hrs = zip(*(self.arrays(r) for r in recs))
        return np.stack(lrs).astype(np.float32), np.stack(hrs).astype(np.float32)

    def to_dict(self):
        return {
            "version": MANIFEST_VERSION,
            "params": self.params.to_dict(),
            "patch_lr": self.patch_lr,
            "patch_hr": self.patch_lr * self.factor,
            "stride": self.stride,
            "augment": dict(self.augment),
            "split_fraction": self.split_fraction,
            "seed": self.seed,
            "splits": dict(sorted(self.splits.items())),
            "pairs": [
                {
                    "source_id": r.source_id,
                    "origin": list(r.origin),
                    "rot": r.rot,
                    "flip": r.flip,
                    "split": r.split,
                    "lr": patch_path(r, "lr"),
                    "hr": patch_path(r, "hr"),
                }
                for r in self.records
            ],
        }


def patch_path(record: PairRecord, which: str) -> str:
    return f"{record.source_id}/{record.origin[0]}_{record.origin[1]}_{which}.png"


def augment_array(arr, rot: int, flip: bool):
    out = np.rot90(arr, rot, axes=(0, 1))
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def grid_origins(n: int, size: int, stride: int) -> List[int]:
    """Origins at multiples of ``stride``; the last one is clamped to ``n - size``."""
    if size > n:
        raise ValueError(f"patch size {size} exceeds extent {n}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    out = []
    o = 0
    while True:
        c = min(o, n - size)
        if not out or out[-1] != c:
            out.append(c)
        if o + size >= n:
            break
        o += stride
    return out


def _source_key(source_id: str) -> int:
    return zlib.crc32(source_id.encode("utf-8"))


def assign_splits(source_ids: Sequence[str], split_fraction: float, seed: int) -> Dict[str, str]:
    """Random split by source image. At least one validation source whenever
    there are two or more sources; a single source goes entirely to train."""
    ids = sorted(source_ids)
    n = len(ids)
    n_val = 0
    if n >= 2:
        n_val = min(n - 1, max(1, int(round((1.0 - split_fraction) * n))))
    order = make_rng(seed, 0).permutation(n)
    val = {ids[i] for i in order[:n_val]}
    return {s: ("validation" if s in val else "train") for s in ids}


def build_dataset(
    hr_images: Sequence[Image],
    params: DegradationParams,
    patch_lr: int = 96,
    stride: Optional[int] = None,
    augment: Sequence[str] = (),
    split_fraction: float = 0.9,
    seed: int = 0,
    source_ids: Optional[Sequence[str]] = None,
) -> DatasetManifest:
    """``stride`` is in LR pixels (defaults to ``patch_lr``); ``augment`` may
    contain ``"rot"`` (x4) and ``"flip"`` (x2)."""
    if not hr_images:
        raise ValueError("no HR images given")
    if not 0 < split_fraction < 1:
        raise ValueError("split_fraction must be in (0, 1)")
    unknown = set(augment) - {"rot", "flip"}
    if unknown:
        raise ValueError(f"unknown augmentation flags: {sorted(unknown)}")
    stride = patch_lr if stride is None else stride
    f = params.factor
    patch_hr = patch_lr * f
    if source_ids is None:
        source_ids = [f"img{i:03d}" for i in range(len(hr_images))]
    if len(set(source_ids)) != len(source_ids):
        raise ValueError("source ids must be unique")
    rots = (0, 1, 2, 3) if "rot" in augment else (0,)
    flips = (False, True) if "flip" in augment else (False,)
    splits = assign_splits(source_ids, split_fraction, seed)

    records, patches = [], {}
    for sid, img in sorted(zip(source_ids, hr_images), key=lambda t: t[0]):
        if img.height < patch_hr or img.width < patch_hr:
            raise ValueError(f"{sid}: image {img.height}x{img.width} smaller than HR patch {patch_hr}")
        hr = img.data
        lr = degrade_array(hr, params, make_rng(seed, 1, _source_key(sid))).astype(np.float32)
        rows = grid_origins(lr.shape[0], patch_lr, stride)
        cols = grid_origins(lr.shape[1], patch_lr, stride)
        for r in rows:
            for c in cols:
                origin = (r * f, c * f)
                patches[(sid, origin)] = (
                    lr[r : r + patch_lr, c : c + patch_lr].copy(),
                    hr[r * f : r * f + patch_hr, c * f : c * f + patch_hr].copy(),
                )
                for k in rots:
                    for fl in flips:
                        records.append(PairRecord(sid, origin, k, fl, splits[sid]))
    return DatasetManifest(
        records=records,
        params=params,
        patch_lr=patch_lr,
        stride=stride,
        augment={"rot": "rot" in augment, "flip": "flip" in augment},
        split_fraction=split_fraction,
        seed=seed,
        splits=splits,
        patches=patches,
    )


def save_dataset(manifest: DatasetManifest, out_dir) -> None:
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    written = set()
    for rec in manifest.records:
        if rec.key in written:
            continue
        written.add(rec.key)
        lr, hr = manifest.patches[rec.key]
        os.makedirs(os.path.join(out_dir, rec.source_id), exist_ok=True)
        save_image(Image(lr), os.path.join(out_dir, patch_path(rec, "lr")), bit_depth=16)
        save_image(Image(hr), os.path.join(out_dir, patch_path(rec, "hr")), bit_depth=16)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=1)
    manifest.root = out_dir


def load_dataset(root) -> DatasetManifest:
    root = os.fspath(root)
    path = os.path.join(root, "manifest.json")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no manifest.json in {root}")
    with open(path) as fh:
        d = json.load(fh)
    if d.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {d.get('version')}")
    records, patches = [], {}
    for p in d["pairs"]:
        rec = PairRecord(p["source_id"], tuple(p["origin"]), int(p["rot"]), bool(p["flip"]), p["split"])
        records.append(rec)
        if rec.key not in patches:
            patches[rec.key] = (
                load_image(os.path.join(root, p["lr"])).data,
                load_image(os.path.join(root, p["hr"])).data,
            )
    return DatasetManifest(
        records=records,
        params=DegradationParams(**d["params"]),
        patch_lr=d["patch_lr"],
        stride=d["stride"],
        augment=d["augment"],
        split_fraction=d["split_fraction"],
        seed=d["seed"],
        splits=d["splits"],
        patches=patches,
        root=root,
    )


def verify_alignment(pair: PatchPair, params: DegradationParams) -> bool:
    """True iff the LR patch is the noise-free simulation of the HR patch plus noise.

    Compares ``degrade(hr, variance=0)`` with ``lr`` away from a border of
    ceil(radius / factor) LR pixels, where the patch-level blur cannot see the
    surrounding image. The MSE threshold is the noise variance plus five
    standard errors of a variance estimate over the compared pixels, plus 1e-6.
    """
    f = params.factor
    if pair.hr.height != pair.lr.height * f or pair.hr.width != pair.lr.width * f:
        return False
    sim = degrade_array(pair.hr.data, params.replace(noise_variance=0.0))
    lr = pair.lr.data.astype(np.float64)
    m = math.ceil(gaussian_kernel(params.sigma).radius / f)
    if 2 * m < lr.shape[0] and 2 * m < lr.shape[1]:
        sim = sim[m:-m or None, m:-m or None]
        lr = lr[m:-m or None, m:-m or None]
    err = float(np.mean((sim - lr) ** 2))
    v = params.noise_variance
    return err < v * (1.0 + 5.0 * math.sqrt(2.0 / lr.size)) + 1e-6
