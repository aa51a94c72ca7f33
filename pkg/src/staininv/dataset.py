"""Image I/O, patch preprocessing, and the synthetic multi-domain triplet set.

Images travel as binary PPM (P6, maxval 255) so every artifact is bit-exact
and diffable.  Triplet datasets pair one image per domain for the same
underlying texture; the synthetic generator perturbs a base image's chroma
in HSD space so that aligned domains share their density plane by
construction, which gives the evaluation suite an exact oracle.
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .colour import hsd_forward, hsd_inverse_clamped, od_to_rgb, rgb_to_od
from .numerics import derive_seed

GCN_GUARD = 1e-8
ZCA_EPSILON = 1e-5

_WHITESPACE = b" \t\n\r\x0b\x0c"


class PpmParseError(ValueError):
    """Malformed PPM data; carries the byte offset of the failure."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(eq=False)
class Image:
    """8-bit RGB image; pixels is a (height, width, 3) uint8 array."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.dtype != np.uint8:
            raise ValueError("pixels must be uint8")
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError("pixels must have shape (height, width, 3)")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


def _next_token(data, pos):
    n = len(data)
    while pos < n:
        c = data[pos]
        if c in _WHITESPACE:
            pos += 1
        elif c == ord("#"):
            while pos < n and data[pos] not in b"\n\r":
                pos += 1
        else:
            break
    if pos >= n:
        raise PpmParseError("unexpected end of header", pos)
    start = pos
    while pos < n and data[pos] not in _WHITESPACE and data[pos] != ord("#"):
        pos += 1
    return data[start:pos], start, pos


def parse_ppm(data):
    """Parse binary P6 bytes into an Image."""
    if data[:2] != b"P6":
        raise PpmParseError(f"not a P6 file (magic {data[:2]!r})", 0)
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        token, start, pos = _next_token(data, pos)
        try:
            value = int(token)
        except ValueError:
            raise PpmParseError(f"invalid {name} token {token!r}", start) from None
        if value <= 0:
            raise PpmParseError(f"{name} must be positive, got {value}", start)
        fields.append(value)
    width, height, maxval = fields
    if maxval != 255:
        raise PpmParseError(f"unsupported maxval {maxval} (only 255)", pos)
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise PpmParseError("expected single whitespace after maxval", pos)
    pos += 1
    expected = width * height * 3
    payload = data[pos : pos + expected]
    if len(payload) != expected:
        raise PpmParseError(
            f"truncated payload: expected {expected} bytes, got {len(payload)}", pos
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return Image(pixels.copy())


def load_image(path):
    with open(path, "rb") as fh:
        return parse_ppm(fh.read())


def save_image(image, path):
    header = f"P6\n{image.width} {image.height}\n255\n".encode()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(image.pixels.tobytes())


def extract_patches(image, size=8, stride=None):
    """Flattened square patches in row-major scan order.

    Returns a (J, size*size*3) float array of raw byte values with
    J = (floor((H-size)/stride)+1) * (floor((W-size)/stride)+1).
    """
    pixels = image.pixels if isinstance(image, Image) else np.asarray(image)
    if stride is None:
        stride = size
    if stride < 1:
        raise ValueError("stride must be positive")
    h, w = pixels.shape[:2]
    if size > h or size > w:
        raise ValueError(f"patch size {size} exceeds image dims {h}x{w}")
    windows = np.lib.stride_tricks.sliding_window_view(pixels, (size, size), axis=(0, 1))
    windows = windows[::stride, ::stride]  # (gh, gw, 3, size, size)
    gh, gw = windows.shape[:2]
    patches = windows.transpose(0, 1, 3, 4, 2).reshape(gh * gw, size * size * 3)
    return patches.astype(np.float64)


def patch_grid_shape(height, width, size, stride):
    return (height - size) // stride + 1, (width - size) // stride + 1


def scale_to_pm1(values):
    """Map byte values [0, 255] to [-1, 1]."""
    return np.asarray(values, dtype=np.float64) / 127.5 - 1.0


def gcn(patch):
    """Global contrast normalisation: zero mean, unit population std per patch."""
    arr = np.asarray(patch, dtype=np.float64)
    mean = arr.mean(axis=-1, keepdims=True)
    std = arr.std(axis=-1, keepdims=True)
    return (arr - mean) / (std + GCN_GUARD)


@dataclass
class ZcaTransform:
    """Symmetric whitening transform fitted on a patch population."""

    mean: np.ndarray
    matrix: np.ndarray
    epsilon: float


def zca_fit(patches, epsilon=ZCA_EPSILON):
    """Fit ZCA whitening: U diag(1/sqrt(lambda+eps)) U^T of the covariance."""
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("expected a (samples, dims) matrix")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / x.shape[0]
    lam, u = np.linalg.eigh(cov)
    lam = np.maximum(lam, 0.0)
    matrix = (u / np.sqrt(lam + epsilon)) @ u.T
    matrix = (matrix + matrix.T) / 2.0
    return ZcaTransform(mean=mean, matrix=matrix, epsilon=epsilon)


def zca_apply(transform, patch):
    """Whiten one patch vector or a batch of rows."""
    arr = np.asarray(patch, dtype=np.float64)
    return (arr - transform.mean) @ transform.matrix.T


@dataclass
class StainPerturbation:
    """Parametric chroma transform in HSD space (identity by default).

    Rotation, per-axis scaling, and offset act on the (c_x, c_y) plane;
    density_gain scales the density plane.  A unit gain therefore preserves
    tissue structure exactly up to 8-bit quantisation.
    """

    rotation: float = 0.0
    scale: tuple = (1.0, 1.0)
    offset: tuple = (0.0, 0.0)
    density_gain: float = 1.0

    def __post_init__(self):
        if self.scale[0] <= 0 or self.scale[1] <= 0:
            raise ValueError("scale factors must be positive")
        if self.density_gain <= 0:
            raise ValueError("density_gain must be positive")

    def to_dict(self):
        return {
            "rotation": self.rotation,
            "scale": list(self.scale),
            "offset": list(self.offset),
            "density_gain": self.density_gain,
        }

    @classmethod
    def from_dict(cls, record):
        return cls(
            rotation=record.get("rotation", 0.0),
            scale=tuple(record.get("scale", (1.0, 1.0))),
            offset=tuple(record.get("offset", (0.0, 0.0))),
            density_gain=record.get("density_gain", 1.0),
        )


def perturb_image(image, perturbation):
    """Apply a stain perturbation to an RGB image; returns (image, clamp count)."""
    hsd = hsd_forward(rgb_to_od(image.pixels))
    cos_t = np.cos(perturbation.rotation)
    sin_t = np.sin(perturbation.rotation)
    c_x = cos_t * hsd.c_x - sin_t * hsd.c_y
    c_y = sin_t * hsd.c_x + cos_t * hsd.c_y
    c_x = c_x * perturbation.scale[0] + perturbation.offset[0]
    c_y = c_y * perturbation.scale[1] + perturbation.offset[1]
    density = hsd.density * perturbation.density_gain
    od, clamped = hsd_inverse_clamped(replace(hsd, c_x=c_x, c_y=c_y, density=density))
    return Image(od_to_rgb(od)), clamped


@dataclass
class TripletDataset:
    """Aligned images indexed by (triplet, domain)."""

    domain_ids: list
    triplets: list  # list of {domain_id: Image}
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        for i, triplet in enumerate(self.triplets):
            if set(triplet) != set(self.domain_ids):
                raise ValueError(f"triplet {i} does not cover domains {self.domain_ids}")
            shapes = {triplet[d].pixels.shape for d in self.domain_ids}
            if len(shapes) != 1:
                raise ValueError(f"triplet {i} images differ in size")

    def __len__(self):
        return len(self.triplets)


def synth_triplets(base_images, perturbations, seed, reference_domain="A"):
    """Build aligned triplets: reference domain plus one perturbed twin each.

    ``perturbations`` maps each non-reference domain id to its
    StainPerturbation.  Out-of-gamut pixels are clamped at zero OD and
    counted in the manifest.
    """
    if reference_domain in perturbations:
        raise ValueError("reference domain must not carry a perturbation")
    domain_ids = [reference_domain, *perturbations]
    triplets = []
    clamp_count = 0
    for base in base_images:
        group = {reference_domain: base}
        for domain, pert in perturbations.items():
            mapped, clamped = perturb_image(base, pert)
            clamp_count += clamped
            group[domain] = mapped
        triplets.append(group)
    manifest = {
        "domains": domain_ids,
        "generator": {
            "seed": seed,
            "perturbations": {d: p.to_dict() for d, p in perturbations.items()},
            "clamp_count": clamp_count,
        },
    }
    return TripletDataset(domain_ids=domain_ids, triplets=triplets, manifest=manifest)


def split(dataset, fraction, seed):
    """Deterministic disjoint/exhaustive train-test split of triplets."""
    if len(dataset) == 0:
        raise ValueError("cannot split an empty dataset")
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_train = int(round(len(dataset) * fraction))
    parts = []
    for role, idx in (("train", order[:n_train]), ("test", order[n_train:])):
        manifest = dict(dataset.manifest)
        manifest["split"] = {"role": role, "fraction": fraction, "seed": seed}
        parts.append(
            TripletDataset(
                domain_ids=list(dataset.domain_ids),
                triplets=[dataset.triplets[i] for i in idx],
                manifest=manifest,
            )
        )
    return parts[0], parts[1]


def save_dataset(dataset, directory):
    """Write PPM images plus a manifest.json naming them."""
    import os

    os.makedirs(directory, exist_ok=True)
    entries = []
    for i, triplet in enumerate(dataset.triplets):
        paths = {}
        for domain in dataset.domain_ids:
            name = f"triplet_{i:05d}_{domain}.ppm"
            save_image(triplet[domain], os.path.join(directory, name))
            paths[domain] = name
        entries.append({"id": i, "paths": paths})
    manifest = dict(dataset.manifest)
    manifest["domains"] = list(dataset.domain_ids)
    manifest["triplets"] = entries
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(directory):
    import os

    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    triplets = []
    for entry in manifest["triplets"]:
        triplets.append(
            {
                domain: load_image(os.path.join(directory, path))
                for domain, path in entry["paths"].items()
            }
        )
    return TripletDataset(
        domain_ids=list(manifest["domains"]), triplets=triplets, manifest=manifest
    )


def generate_base_images(count, size, seed):
    """Seeded nuclei-like blob textures on a pale eosin-toned background."""
    images = []
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for i in range(count):
        rng = np.random.default_rng(derive_seed(seed, f"base-{i}"))
        base = np.empty((size, size, 3))
        base[..., 0] = rng.uniform(195, 235)
        base[..., 1] = rng.uniform(155, 200)
        base[..., 2] = rng.uniform(175, 220)
        # slow horizontal/vertical wash so patches are not globally constant
        wash = rng.uniform(-12, 12, size=2)
        base += (wash[0] * (xx / size) + wash[1] * (yy / size))[..., None]
        for _ in range(int(rng.integers(5, 12))):
            cx, cy = rng.uniform(0, size, size=2)
            radius = rng.uniform(0.06 * size, 0.2 * size)
            colour = np.array(
                [rng.uniform(70, 140), rng.uniform(40, 90), rng.uniform(110, 180)]
            )
            d2 = (xx - cx) ** 2 + (yy - cy) ** 2
            alpha = 0.85 * np.exp(-d2 / (2.0 * (radius / 2.0) ** 2))
            base = (1.0 - alpha[..., None]) * base + alpha[..., None] * colour
        base += rng.normal(0.0, 2.5, size=base.shape)
        images.append(Image(np.clip(np.rint(base), 3, 252).astype(np.uint8)))
    return images
