"""Synthetic face-like datasets with disjoint train/test identities.

Every identity prototype is a shared template plus a random combination of
a few smooth basis fields, so identities live in a low-dimensional "face
space" that features learned on some identities can transfer to.
Samples perturb the prototype by an integer translation (edge-replicated),
a brightness offset and additive Gaussian noise.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ShapeError
from .recognition import Region
from .tensor import Rng
from .training import LabeledDataset
from .weights import load_weights, save_weights

DEFAULT_REGIONS = (
    Region("full", 0, 0, 32, 32, 1.0),
    Region("center", 4, 4, 24, 24, 4.0 / 3.0),
    Region("upper", 0, 8, 16, 16, 2.0),
    Region("lower", 16, 8, 16, 16, 2.0),
    Region("left", 8, 0, 16, 16, 2.0),
)


@dataclass
class SyntheticDatasetSpec:
    train_identities: int = 20
    test_identities: int = 10
    images_per_identity: int = 20
    canvas: int = 32
    channels: int = 1
    translation: int = 2
    brightness: float = 0.2
    noise: float = 0.1
    identity_scale: float = 1.0
    identity_dim: int = 8
    smoothness: float = 2.5
    regions: list = field(default_factory=lambda: list(DEFAULT_REGIONS))
    seed: int = 0

    @property
    def num_identities(self):
        return self.train_identities + self.test_identities

    def validate(self):
        if self.num_identities < 2:
            raise ShapeError("need at least 2 identities")
        if min(self.train_identities, self.images_per_identity, self.canvas, self.identity_dim) < 1:
            raise ShapeError("identity, image, canvas and basis counts must be positive")
        if self.translation < 0 or self.translation >= self.canvas:
            raise ShapeError("translation must be in [0, canvas)")
        for r in self.regions:
            r.check(self.canvas, self.canvas)


def _smooth_field(rng: Rng, channels, size, sigma):
    """Unit-variance Gaussian random field blurred by a Gaussian of width ``sigma``."""
    white = rng.normal((channels, size, size))
    if sigma <= 0:
        return white
    radius = int(np.ceil(3 * sigma))
    t = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    k /= k.sum()
    padded = np.pad(white, ((0, 0), (radius, radius), (radius, radius)), mode="wrap")
    rows = np.apply_along_axis(lambda v: np.convolve(v, k, mode="valid"), 1, padded)
    out = np.apply_along_axis(lambda v: np.convolve(v, k, mode="valid"), 2, rows)
    return out / out.std()


def _translate(img, dy, dx):
    c, h, w = img.shape
    pad = max(abs(dy), abs(dx))
    if pad == 0:
        return img.copy()
    p = np.pad(img, ((0, 0), (pad, pad), (pad, pad)), mode="edge")
    return p[:, pad - dy:pad - dy + h, pad - dx:pad - dx + w].copy()


def make_prototypes(spec: SyntheticDatasetSpec):
    root = Rng(spec.seed, 0xDA7A)
    template = _smooth_field(root.spawn(0), spec.channels, spec.canvas, 2 * spec.smoothness)
    basis = np.stack([_smooth_field(root.spawn(1 + j), spec.channels, spec.canvas, spec.smoothness)
                      for j in range(spec.identity_dim)])
    coef = root.spawn(0xC0EF).normal((spec.num_identities, spec.identity_dim))
    coef *= spec.identity_scale / np.sqrt(spec.identity_dim)
    return template + np.tensordot(coef, basis, axes=1)


def generate(spec: SyntheticDatasetSpec):
    """In-memory ``(train, test)`` datasets. Test labels restart at 0."""
    spec.validate()
    protos = make_prototypes(spec)
    root = Rng(spec.seed, 0x5A3E)
    images, labels = [], []
    for k in range(spec.num_identities):
        r = root.spawn(k)
        for _ in range(spec.images_per_identity):
            t = spec.translation
            dy, dx = (int(v) for v in r.integers(-t, t + 1, size=2)) if t else (0, 0)
            img = _translate(protos[k], dy, dx)
            if spec.brightness:
                img = img + r.uniform(-spec.brightness, spec.brightness)
            if spec.noise:
                img = img + r.normal(img.shape, scale=spec.noise)
            images.append(img)
            labels.append(k)
    images = np.stack(images)
    labels = np.array(labels)
    tr = labels < spec.train_identities
    train = LabeledDataset(images[tr], labels[tr])
    test = LabeledDataset(images[~tr], labels[~tr] - spec.train_identities)
    return train, test


def spec_to_json(spec: SyntheticDatasetSpec) -> dict:
    d = asdict(spec)
    d["regions"] = [asdict(r) for r in spec.regions]
    return d


def spec_from_json(d: dict) -> SyntheticDatasetSpec:
    d = dict(d)
    d["regions"] = [Region(**r) for r in d.get("regions", [])]
    return SyntheticDatasetSpec(**d)


def gen_dataset(spec: SyntheticDatasetSpec, out_dir) -> dict:
    """Write ``train.did3``, ``test.did3`` and ``manifest.json`` under ``out_dir``."""
    train, test = generate(spec)
    os.makedirs(out_dir, exist_ok=True)
    for name, ds in (("train", train), ("test", test)):
        save_weights(os.path.join(out_dir, f"{name}.did3"),
                     {"images": ds.images, "labels": ds.identities.astype(np.float64)})
    manifest = {
        "spec": spec_to_json(spec),
        "train_identities": list(range(spec.train_identities)),
        "test_identities": list(range(spec.train_identities, spec.num_identities)),
        "regions": [asdict(r) for r in spec.regions],
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_dataset(data_dir):
    """Returns ``(train, test, manifest)`` as written by :func:`gen_dataset`."""
    with open(os.path.join(data_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    out = []
    for name in ("train", "test"):
        t = load_weights(os.path.join(data_dir, f"{name}.did3"))
        out.append(LabeledDataset(t["images"], np.rint(t["labels"]).astype(np.int64)))
    return out[0], out[1], manifest
