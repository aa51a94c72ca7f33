"""Frozen-extractor tissue classification: patch-grid features + conv head.

An image is cut into non-overlapping 8x8 patches, each patch is encoded by
a frozen feature extractor (with its model-specific preprocessing), and the
resulting feature grid is classified by two same-padded 3x3 convolutions
(leaky-relu after each, including the last) followed by global average
pooling down to one logit per class.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from . import persist
from .dataset import Image, extract_patches, load_image, save_image
from .numerics import (
    adam_init,
    adam_step,
    conv2d_backward,
    conv2d_init,
    derive_seed,
    flatten_grads,
    param_checksum,
    _conv2d_pre,
    apply_activation,
)


def featurize(extractor, image):
    """Encode an image into its (grid_h, grid_w, feature_dim) patch grid."""
    pixels = image.pixels if isinstance(image, Image) else np.asarray(image)
    h, w = pixels.shape[:2]
    if h % 8 or w % 8:
        raise ValueError(f"image dims {h}x{w} must be divisible by 8")
    patches = extract_patches(pixels, size=8, stride=8)
    features = extractor.encode_patches(patches)
    return features.reshape(h // 8, w // 8, features.shape[1])


@dataclass
class ClassifierHead:
    conv1: object  # Conv2dLayer feature_dim -> hidden, 3x3, same padding
    conv2: object  # Conv2dLayer hidden -> n_classes
    pooling: str = "avg"

    def __post_init__(self):
        if self.pooling not in ("avg", "max"):
            raise ValueError("pooling must be 'avg' or 'max'")

    @property
    def n_classes(self):
        return self.conv2.kernels.shape[0]


def head_init(n_classes, seed, in_channels=10, hidden=32, pooling="avg"):
    rng = np.random.default_rng(derive_seed(seed, "head-init"))
    return ClassifierHead(
        conv1=conv2d_init(in_channels, hidden, 3, rng, activation="leaky_relu"),
        conv2=conv2d_init(hidden, n_classes, 3, rng, activation="leaky_relu"),
        pooling=pooling,
    )


def head_params(head):
    return [head.conv1.kernels, head.conv1.bias, head.conv2.kernels, head.conv2.bias]


def _head_forward(head, x):
    """x: (batch, channels, h, w) -> logits (batch, n_classes), with caches."""
    pre1, cols1 = _conv2d_pre(head.conv1, x)
    a1 = apply_activation(head.conv1.activation, pre1, head.conv1.leaky_slope)
    pre2, cols2 = _conv2d_pre(head.conv2, a1)
    a2 = apply_activation(head.conv2.activation, pre2, head.conv2.leaky_slope)
    if head.pooling == "avg":
        logits = a2.mean(axis=(2, 3))
    else:
        logits = a2.max(axis=(2, 3))
    return logits, (x, pre1, cols1, a1, pre2, cols2, a2)


def _head_backward(head, caches, dlogits):
    x, pre1, cols1, a1, pre2, cols2, a2 = caches
    b, _, h, w = a2.shape
    if head.pooling == "avg":
        da2 = np.broadcast_to(dlogits[:, :, None, None] / (h * w), a2.shape)
    else:
        flat = a2.reshape(b, a2.shape[1], -1)
        mask = np.zeros_like(flat)
        np.put_along_axis(mask, flat.argmax(axis=2)[:, :, None], 1.0, axis=2)
        da2 = mask.reshape(a2.shape) * dlogits[:, :, None, None]
    g2, da1 = conv2d_backward(head.conv2, a1, da2, pre=pre2, cols=cols2)
    g1, _ = conv2d_backward(head.conv1, x, da1, pre=pre1, cols=cols1)
    return flatten_grads([g1, g2])


def classify(head, features):
    """Feature grid (h, w, channels) -> logits (n_classes,)."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3:
        raise ValueError("expected a feature map of shape (h, w, channels)")
    if features.shape[2] != head.conv1.kernels.shape[1]:
        raise ValueError(
            f"feature channels {features.shape[2]} do not match head input "
            f"{head.conv1.kernels.shape[1]}"
        )
    logits, _ = _head_forward(head, features.transpose(2, 0, 1)[None])
    return logits[0]


def cross_entropy(logits, label):
    """-log softmax(logits)[label], stabilised by max subtraction."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise ValueError(f"label {label} outside the class set")
    shifted = logits - logits.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[label])


def _cross_entropy_batch(logits, labels):
    shifted = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / exps.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    losses = -np.log(probs[np.arange(n), labels])
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return float(losses.mean()), dlogits / n


@dataclass
class LabeledImageSet:
    images: list
    labels: np.ndarray
    class_names: list

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != self.labels.shape[0]:
            raise ValueError("one label per image required")
        if self.labels.size and self.labels.max() >= len(self.class_names):
            raise ValueError("label outside the class set")

    def __len__(self):
        return len(self.images)


def generate_labeled_set(n_per_class, size=32, seed=0):
    """Three synthetic texture classes with distinct colour statistics."""
    palettes = [
        # (background ranges, blob ranges) per class: reddish / purple / green-tan
        (((205, 240), (140, 175), (140, 175)), ((150, 200), (50, 100), (60, 110))),
        (((150, 185), (130, 165), (200, 240)), ((60, 100), (40, 80), (140, 190))),
        (((190, 225), (195, 235), (140, 175)), ((90, 140), (130, 180), (60, 110))),
    ]
    class_names = ["eosin_rich", "haematoxylin_rich", "counterstain"]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images, labels = [], []
    for label, (bg, blob) in enumerate(palettes):
        for i in range(n_per_class):
            rng = np.random.default_rng(derive_seed(seed, f"labeled-{label}-{i}"))
            base = np.empty((size, size, 3))
            for ch in range(3):
                base[..., ch] = rng.uniform(*bg[ch])
            for _ in range(int(rng.integers(3, 9))):
                cx, cy = rng.uniform(0, size, size=2)
                radius = rng.uniform(0.08 * size, 0.22 * size)
                colour = np.array([rng.uniform(*blob[ch]) for ch in range(3)])
                d2 = (xx - cx) ** 2 + (yy - cy) ** 2
                alpha = 0.8 * np.exp(-d2 / (2.0 * (radius / 2.0) ** 2))
                base = (1.0 - alpha[..., None]) * base + alpha[..., None] * colour
            base += rng.normal(0.0, 3.0, size=base.shape)
            images.append(Image(np.clip(np.rint(base), 2, 253).astype(np.uint8)))
            labels.append(label)
    return LabeledImageSet(images=images, labels=np.array(labels), class_names=class_names)


def split_labeled(dataset, fractions=(0.75, 0.05, 0.20), seed=0):
    """Deterministic train/validation/test split by the given fractions."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    slices = (
        order[:n_train],
        order[n_train : n_train + n_val],
        order[n_train + n_val :],
    )
    return tuple(
        LabeledImageSet(
            images=[dataset.images[i] for i in idx],
            labels=dataset.labels[idx],
            class_names=list(dataset.class_names),
        )
        for idx in slices
    )


def save_labeled_set(dataset, directory):
    os.makedirs(directory, exist_ok=True)
    items = []
    for i, (image, label) in enumerate(zip(dataset.images, dataset.labels)):
        name = f"image_{i:05d}.ppm"
        save_image(image, os.path.join(directory, name))
        items.append({"path": name, "label": int(label)})
    with open(os.path.join(directory, "labels.json"), "w") as fh:
        json.dump({"classes": list(dataset.class_names), "items": items}, fh, indent=2)
        fh.write("\n")


def load_labeled_set(directory):
    with open(os.path.join(directory, "labels.json")) as fh:
        doc = json.load(fh)
    images = [load_image(os.path.join(directory, item["path"])) for item in doc["items"]]
    labels = np.array([item["label"] for item in doc["items"]], dtype=np.int64)
    return LabeledImageSet(images=images, labels=labels, class_names=list(doc["classes"]))


@dataclass
class ClassifierTrainConfig:
    epochs: int = 100
    lr: float = 0.0002
    batch: int = 32
    seed: int = 0


def extractor_checksum(extractor):
    return param_checksum(extractor.param_arrays())


def _feature_batch(extractor, dataset):
    maps = [
        featurize(extractor, image).transpose(2, 0, 1) for image in dataset.images
    ]
    return np.stack(maps)


def _accuracy(head, features, labels):
    logits, _ = _head_forward(head, features)
    return float(np.mean(logits.argmax(axis=1) == labels))


def train_classifier(extractor, head, train_set, val_set, config):
    """Train the head on frozen features; the extractor is never touched.

    Features are computed once up front (the extractor is frozen), and the
    extractor parameter checksum is verified unchanged after training.
    Returns the head and a per-epoch log of loss and validation accuracy.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    checksum_before = extractor_checksum(extractor)
    x_train = _feature_batch(extractor, train_set)
    y_train = train_set.labels
    x_val = _feature_batch(extractor, val_set) if len(val_set) else None

    params = head_params(head)
    adam = adam_init(params, config.lr)
    n = x_train.shape[0]
    log = []
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng(
            derive_seed(config.seed, f"clf-shuffle-{epoch}")
        ).permutation(n)
        loss_sum = 0.0
        for start in range(0, n, config.batch):
            idx = order[start : start + config.batch]
            logits, caches = _head_forward(head, x_train[idx])
            loss, dlogits = _cross_entropy_batch(logits, y_train[idx])
            grads = _head_backward(head, caches, dlogits)
            adam_step(adam, params, grads)
            loss_sum += loss * len(idx)
        entry = {"epoch": epoch, "loss": loss_sum / n}
        if x_val is not None:
            entry["val_accuracy"] = _accuracy(head, x_val, val_set.labels)
        log.append(entry)
    if extractor_checksum(extractor) != checksum_before:
        raise RuntimeError("frozen extractor parameters changed during training")
    return head, log


def evaluate_classifier(extractor, head, test_set):
    """Predicted labels for a labeled set; returns (true, predicted)."""
    features = _feature_batch(extractor, test_set)
    logits, _ = _head_forward(head, features)
    return test_set.labels.copy(), logits.argmax(axis=1)


def save_head(head, path):
    persist.dump_json(
        {
            "format": "clf-head-v1",
            "pooling": head.pooling,
            "conv1": persist.conv_record(head.conv1),
            "conv2": persist.conv_record(head.conv2),
        },
        path,
    )


def load_head(path):
    doc = persist.load_json(path)
    if doc.get("format") != "clf-head-v1":
        raise ValueError(f"not a clf-head-v1 document: {doc.get('format')!r}")
    return ClassifierHead(
        conv1=persist.conv_from_record(doc["conv1"]),
        conv2=persist.conv_from_record(doc["conv2"]),
        pooling=doc["pooling"],
    )
