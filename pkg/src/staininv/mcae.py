"""The multi-channel auto-encoder: per-domain auto-encoders trained jointly.

One encoder/decoder pair per domain, trained on aligned patch groups with
three per-element-mean losses summed without weights:

  reconstruction  mean squared error between each decoder output and its
                  input patch rescaled to the decoder's (0, 1) range;
  feature         mean squared difference between every non-anchor domain's
                  features and the first (anchor) domain's features for
                  spatially corresponding patches;
  cluster         mean squared distance of every domain's features to the
                  centroid of the anchor feature's K-Means pseudo-label.

Pseudo-labels come from K-Means fitted on anchor-domain features before the
first gradient step and refitted at the end of every epoch.
"""

from dataclasses import dataclass

import numpy as np

from . import persist
from .dataset import extract_patches, scale_to_pm1
from .numerics import (
    adam_init,
    adam_step,
    dense_init,
    derive_seed,
    flatten_grads,
    mlp_backward,
    mlp_forward,
    mlp_params,
    zero_grads,
)


@dataclass
class KMeansState:
    centroids: np.ndarray  # (k, dim)

    @property
    def k(self):
        return self.centroids.shape[0]


def _pairwise_sq_dists(vectors, centroids):
    sq = (vectors * vectors).sum(axis=1)[:, None] + (centroids * centroids).sum(axis=1)
    sq -= 2.0 * vectors @ centroids.T
    return np.maximum(sq, 0.0)


def kmeans_fit(vectors, k, max_iters=100, seed=0):
    """Lloyd's algorithm with k-means++ seeding and farthest-point repair."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("expected a (samples, dims) matrix")
    m = x.shape[0]
    if k < 1:
        raise ValueError("k must be at least 1")
    if m < k:
        raise ValueError(f"need at least k={k} vectors, got {m}")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(m)]
    for i in range(1, k):
        d2 = _pairwise_sq_dists(x, centroids[:i]).min(axis=1)
        total = d2.sum()
        if total <= 0.0:
            centroids[i] = x[rng.integers(m)]
        else:
            centroids[i] = x[rng.choice(m, p=d2 / total)]

    labels = None
    for _ in range(max_iters):
        d2 = _pairwise_sq_dists(x, centroids)
        new_labels = d2.argmin(axis=1)  # ties resolve to the lowest index
        for j in range(k):
            members = new_labels == j
            if members.any():
                centroids[j] = x[members].mean(axis=0)
            else:
                # reseed a dead centroid on the farthest point; every
                # point's nearest-centroid distance can only shrink
                farthest = _pairwise_sq_dists(x, centroids).min(axis=1).argmax()
                centroids[j] = x[farthest]
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
    return KMeansState(centroids=centroids)


def kmeans_assign(state, vectors):
    """Nearest-centroid index per vector (ties to the lowest index)."""
    x = np.asarray(vectors, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None]
    labels = _pairwise_sq_dists(x, state.centroids).argmin(axis=1)
    return int(labels[0]) if single else labels


def kmeans_objective(state, vectors):
    """Sum of squared distances to the nearest centroid."""
    x = np.asarray(vectors, dtype=np.float64)
    return float(_pairwise_sq_dists(x, state.centroids).min(axis=1).sum())


@dataclass
class McaeModel:
    """Per-domain encoder/decoder stacks plus shared K-Means state."""

    domain_ids: list
    encoders: dict  # domain_id -> [DenseLayer, DenseLayer]
    decoders: dict
    kmeans: KMeansState | None = None

    @property
    def input_dim(self):
        return self.encoders[self.domain_ids[0]][0].n_in

    @property
    def feature_dim(self):
        return self.encoders[self.domain_ids[0]][-1].n_out


def mcae_init(domain_ids, seed, input_dim=192, hidden_dim=100, feature_dim=10):
    """Fresh model: tanh encoder 192-100-10, tanh/sigmoid decoder 10-100-192."""
    if len(domain_ids) < 2:
        raise ValueError("need at least two domains")
    rng = np.random.default_rng(derive_seed(seed, "mcae-init"))
    encoders, decoders = {}, {}
    for domain in domain_ids:
        encoders[domain] = [
            dense_init(input_dim, hidden_dim, "tanh", rng),
            dense_init(hidden_dim, feature_dim, "tanh", rng),
        ]
        decoders[domain] = [
            dense_init(feature_dim, hidden_dim, "tanh", rng),
            dense_init(hidden_dim, input_dim, "sigmoid", rng),
        ]
    return McaeModel(domain_ids=list(domain_ids), encoders=encoders, decoders=decoders)


def _domain_layers(model, table, domain_id):
    try:
        return table[domain_id]
    except KeyError:
        raise KeyError(f"unknown domain {domain_id!r}") from None


def encode(model, domain_id, patch):
    """Encode [-1, 1] patch vector(s) to feature vector(s) in (-1, 1)."""
    layers = _domain_layers(model, model.encoders, domain_id)
    x = np.asarray(patch, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None]
    if np.abs(x).max() > 1.0 + 1e-9:
        raise ValueError("patch values must lie in [-1, 1]")
    out = mlp_forward(layers, x)
    return out[0] if single else out


def decode(model, domain_id, feature):
    """Decode feature vector(s) back to (0, 1) patch vector(s)."""
    layers = _domain_layers(model, model.decoders, domain_id)
    x = np.asarray(feature, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None]
    out = mlp_forward(layers, x)
    return out[0] if single else out


def reconstruction_loss(original, reconstructed):
    """Mean squared error over all entries."""
    a = np.asarray(original, dtype=np.float64)
    b = np.asarray(reconstructed, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def feature_loss(z):
    """Per-element mean squared difference of non-anchor domains to domain 0."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3:
        raise ValueError("expected features of shape (domains, patches, dims)")
    if z.shape[0] < 2:
        raise ValueError("feature loss needs at least two domains")
    if z.shape[1] == 0:
        raise ValueError("no patches")
    return float(np.mean((z[1:] - z[0]) ** 2))


def cluster_loss(z, state, labels):
    """Per-element mean squared distance to the anchor pseudo-label centroid."""
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels)
    if z.ndim != 3:
        raise ValueError("expected features of shape (domains, patches, dims)")
    if labels.shape != (z.shape[1],):
        raise ValueError("need one label per patch")
    if labels.size and (labels.min() < 0 or labels.max() >= state.k):
        raise IndexError(f"label out of range for k={state.k}")
    mu = state.centroids[labels]  # (patches, dims)
    return float(np.mean((z - mu[None]) ** 2))


def mcae_params(model):
    """Stable flat parameter list across all domains (encoders then decoders)."""
    params = []
    for domain in model.domain_ids:
        params.extend(mlp_params(model.encoders[domain]))
        params.extend(mlp_params(model.decoders[domain]))
    return params


def _forward_all(model, patches):
    features, recons, caches = [], [], []
    for i, domain in enumerate(model.domain_ids):
        enc_caches, dec_caches = [], []
        z = mlp_forward(model.encoders[domain], patches[i], enc_caches)
        r = mlp_forward(model.decoders[domain], z, dec_caches)
        features.append(z)
        recons.append(r)
        caches.append((enc_caches, dec_caches))
    return np.stack(features), recons, caches


def _losses(model, patches, z, recons, labels):
    targets = (patches + 1.0) / 2.0
    rec = float(np.mean((np.stack(recons) - targets) ** 2))
    feat = feature_loss(z)
    clu = cluster_loss(z, model.kmeans, labels)
    breakdown = {"reconstruction": rec, "feature": feat, "cluster": clu}
    return rec + feat + clu, breakdown


def combined_loss(model, patches, labels=None):
    """Total loss and per-term breakdown for aligned patch groups.

    ``patches`` has shape (domains, patches, input_dim) with values in
    [-1, 1], ordered like ``model.domain_ids``.  Labels default to the
    current K-Means assignment of the anchor domain's features.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if model.kmeans is None:
        raise ValueError("K-Means state not fitted")
    z, recons, _ = _forward_all(model, patches)
    if labels is None:
        labels = kmeans_assign(model.kmeans, z[0])
    return _losses(model, patches, z, recons, labels)


def combined_loss_and_grads(model, patches, labels=None):
    """Loss, breakdown, and analytic gradients for every model parameter."""
    patches = np.asarray(patches, dtype=np.float64)
    if model.kmeans is None:
        raise ValueError("K-Means state not fitted")
    n_dom, n_patch, n_in = patches.shape
    z, recons, caches = _forward_all(model, patches)
    if labels is None:
        labels = kmeans_assign(model.kmeans, z[0])
    total, breakdown = _losses(model, patches, z, recons, labels)

    n_feat = z.shape[2]
    mu = model.kmeans.centroids[np.asarray(labels)]
    rec_scale = 2.0 / (n_dom * n_patch * n_in)
    feat_scale = 2.0 / ((n_dom - 1) * n_patch * n_feat)
    clu_scale = 2.0 / (n_dom * n_patch * n_feat)

    grads = []
    anchor_pull = (z[0] * (n_dom - 1) - z[1:].sum(axis=0)) * feat_scale
    for i, domain in enumerate(model.domain_ids):
        enc_caches, dec_caches = caches[i]
        target = (patches[i] + 1.0) / 2.0
        d_recon = (recons[i] - target) * rec_scale
        dec_grads = zero_grads(model.decoders[domain])
        _, dz = mlp_backward(model.decoders[domain], dec_caches, d_recon, dec_grads)
        dz = dz + (anchor_pull if i == 0 else (z[i] - z[0]) * feat_scale)
        dz += (z[i] - mu) * clu_scale
        enc_grads = zero_grads(model.encoders[domain])
        mlp_backward(model.encoders[domain], enc_caches, dz, enc_grads)
        grads.extend(flatten_grads(enc_grads))
        grads.extend(flatten_grads(dec_grads))
    return total, breakdown, grads


@dataclass
class McaeTrainConfig:
    epochs: int = 300
    lr: float = 0.0002
    batch: int = 64  # triplets per minibatch
    stride: int = 4  # sub-patch stride during training
    k: int = 10
    kmeans_sample: int = 10000
    seed: int = 0


def _stacked_patches(dataset, domain_ids, patch_size, stride):
    """(domains, triplets, J, dims) array of [-1, 1]-scaled sub-patches."""
    per_domain = []
    for domain in domain_ids:
        rows = [
            extract_patches(triplet[domain], patch_size, stride)
            for triplet in dataset.triplets
        ]
        per_domain.append(scale_to_pm1(np.stack(rows)))
    return np.stack(per_domain)


def _refit_kmeans(model, anchor_patches, config, epoch):
    flat = anchor_patches.reshape(-1, anchor_patches.shape[-1])
    rng = np.random.default_rng(derive_seed(config.seed, f"kmeans-sample-{epoch}"))
    n = min(config.kmeans_sample, flat.shape[0])
    sample = flat[rng.choice(flat.shape[0], size=n, replace=False)]
    features = mlp_forward(model.encoders[model.domain_ids[0]], sample)
    model.kmeans = kmeans_fit(
        features, config.k, seed=derive_seed(config.seed, f"kmeans-{epoch}")
    )


def train_mcae(model, train, config):
    """Joint training loop; returns the model and a per-epoch loss log."""
    if len(train) == 0:
        raise ValueError("empty training dataset")
    patch_size = int(round((model.input_dim / 3) ** 0.5))
    data = _stacked_patches(train, model.domain_ids, patch_size, config.stride)
    n_dom, n_trip, n_sub, n_in = data.shape

    params = mcae_params(model)
    adam = adam_init(params, config.lr)
    _refit_kmeans(model, data[0], config, epoch=0)  # before the first step

    log = []
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng(
            derive_seed(config.seed, f"shuffle-{epoch}")
        ).permutation(n_trip)
        sums = {"reconstruction": 0.0, "feature": 0.0, "cluster": 0.0}
        for start in range(0, n_trip, config.batch):
            idx = order[start : start + config.batch]
            batch = data[:, idx].reshape(n_dom, len(idx) * n_sub, n_in)
            total, breakdown, grads = combined_loss_and_grads(model, batch)
            adam_step(adam, params, grads)
            for key in sums:
                sums[key] += breakdown[key] * len(idx)
        losses = {key: value / n_trip for key, value in sums.items()}
        log.append(
            {"epoch": epoch, "losses": losses, "total": sum(losses.values())}
        )
        _refit_kmeans(model, data[0], config, epoch)
    return model, log


# --- feature extraction and persistence ---


@dataclass
class McaeFeatureExtractor:
    """Frozen encoder of one domain, with the model's [-1, 1] preprocessing."""

    domain_id: str
    layers: list

    def encode_patches(self, raw_patches):
        return mlp_forward(self.layers, scale_to_pm1(raw_patches))

    def param_arrays(self):
        return mlp_params(self.layers)

    @property
    def feature_dim(self):
        return self.layers[-1].n_out


def feature_extractor(model, domain_id):
    return McaeFeatureExtractor(
        domain_id=domain_id, layers=_domain_layers(model, model.encoders, domain_id)
    )


def save_mcae(model, path):
    layers = []
    for domain in model.domain_ids:
        for stage, table in (("encoder", model.encoders), ("decoder", model.decoders)):
            for index, layer in enumerate(table[domain]):
                record = persist.dense_record(layer)
                record.update({"domain": domain, "stage": stage, "index": index})
                layers.append(record)
    kmeans = None
    if model.kmeans is not None:
        kmeans = {
            "k": model.kmeans.k,
            "centroids": [[float(v) for v in row] for row in model.kmeans.centroids],
        }
    persist.dump_json(
        {
            "format": "mcae-v1",
            "domains": list(model.domain_ids),
            "layers": layers,
            "kmeans": kmeans,
        },
        path,
    )


def load_mcae(path):
    doc = persist.load_json(path)
    if doc.get("format") != "mcae-v1":
        raise ValueError(f"not an mcae-v1 document: {doc.get('format')!r}")
    encoders = {d: {} for d in doc["domains"]}
    decoders = {d: {} for d in doc["domains"]}
    for record in doc["layers"]:
        table = encoders if record["stage"] == "encoder" else decoders
        table[record["domain"]][record["index"]] = persist.dense_from_record(record)
    kmeans = None
    if doc.get("kmeans") is not None:
        kmeans = KMeansState(
            centroids=np.array(doc["kmeans"]["centroids"], dtype=np.float64)
        )
    return McaeModel(
        domain_ids=list(doc["domains"]),
        encoders={d: [v[i] for i in sorted(v)] for d, v in encoders.items()},
        decoders={d: [v[i] for i in sorted(v)] for d, v in decoders.items()},
        kmeans=kmeans,
    )
