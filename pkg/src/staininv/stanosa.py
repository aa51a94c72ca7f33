"""Single-domain auto-encoder baseline with GCN + ZCA preprocessing.

The architecture mirrors one channel of the multi-channel model exactly;
the only training signal is patch reconstruction, and cross-domain
normalisation is left entirely to the preprocessing (global contrast
normalisation followed by a whitening transform fitted on the training
domain).
"""

from dataclasses import dataclass

import numpy as np

from . import persist
from .dataset import ZcaTransform, gcn, zca_apply, zca_fit
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
class StanosaModel:
    zca: ZcaTransform | None
    encoder: list  # [DenseLayer, DenseLayer], identical shape to one MCAE channel
    decoder: list


def stanosa_init(seed, input_dim=192, hidden_dim=100, feature_dim=10):
    rng = np.random.default_rng(derive_seed(seed, "stanosa-init"))
    encoder = [
        dense_init(input_dim, hidden_dim, "tanh", rng),
        dense_init(hidden_dim, feature_dim, "tanh", rng),
    ]
    decoder = [
        dense_init(feature_dim, hidden_dim, "tanh", rng),
        dense_init(hidden_dim, input_dim, "sigmoid", rng),
    ]
    return StanosaModel(zca=None, encoder=encoder, decoder=decoder)


def stanosa_preprocess(patch, zca):
    """Global contrast normalisation, then whitening, in that order."""
    if zca is None:
        raise ValueError("ZCA transform not fitted")
    return zca_apply(zca, gcn(patch))


@dataclass
class StanosaTrainConfig:
    epochs: int = 300
    lr: float = 0.0002
    batch: int = 256  # patch vectors per minibatch
    zca_sample: int = 100000
    seed: int = 0


def train_stanosa(model, patches, config):
    """Reconstruction-only training on raw byte-valued patch vectors (M, 192).

    Fits the whitening transform on up to ``zca_sample`` randomly chosen
    training patches if the model does not carry one yet.  The decoder's
    sigmoid output is matched against the whitened input mapped affinely to
    [0, 1] and clipped.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2 or patches.shape[0] == 0:
        raise ValueError("expected a non-empty (patches, dims) matrix")
    if model.zca is None:
        rng = np.random.default_rng(derive_seed(config.seed, "zca-sample"))
        n = min(config.zca_sample, patches.shape[0])
        sample = patches[rng.choice(patches.shape[0], size=n, replace=False)]
        model.zca = zca_fit(gcn(sample))

    x = stanosa_preprocess(patches, model.zca)
    target = np.clip((x + 1.0) / 2.0, 0.0, 1.0)
    layers = model.encoder + model.decoder
    params = mlp_params(layers)
    adam = adam_init(params, config.lr)

    log = []
    n = x.shape[0]
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng(
            derive_seed(config.seed, f"shuffle-{epoch}")
        ).permutation(n)
        loss_sum = 0.0
        for start in range(0, n, config.batch):
            idx = order[start : start + config.batch]
            caches = []
            recon = mlp_forward(layers, x[idx], caches)
            diff = recon - target[idx]
            loss = float(np.mean(diff * diff))
            grads = zero_grads(layers)
            mlp_backward(layers, caches, 2.0 * diff / diff.size, grads)
            adam_step(adam, params, flatten_grads(grads))
            loss_sum += loss * len(idx)
        losses = {"reconstruction": loss_sum / n}
        log.append({"epoch": epoch, "losses": losses, "total": sum(losses.values())})
    return model, log


@dataclass
class StanosaFeatureExtractor:
    """Frozen encoder with the baseline's GCN + ZCA preprocessing."""

    zca: ZcaTransform
    layers: list

    def encode_patches(self, raw_patches):
        return mlp_forward(self.layers, stanosa_preprocess(raw_patches, self.zca))

    def param_arrays(self):
        return mlp_params(self.layers) + [self.zca.mean, self.zca.matrix]

    @property
    def feature_dim(self):
        return self.layers[-1].n_out


def feature_extractor(model):
    if model.zca is None:
        raise ValueError("ZCA transform not fitted")
    return StanosaFeatureExtractor(zca=model.zca, layers=model.encoder)


def save_stanosa(model, path):
    layers = []
    for stage, stack in (("encoder", model.encoder), ("decoder", model.decoder)):
        for index, layer in enumerate(stack):
            record = persist.dense_record(layer)
            record.update({"stage": stage, "index": index})
            layers.append(record)
    zca = None
    if model.zca is not None:
        zca = {
            "mean": [float(v) for v in model.zca.mean],
            "matrix": [[float(v) for v in row] for row in model.zca.matrix],
            "epsilon": model.zca.epsilon,
        }
    persist.dump_json({"format": "stanosa-v1", "layers": layers, "zca": zca}, path)


def load_stanosa(path):
    doc = persist.load_json(path)
    if doc.get("format") != "stanosa-v1":
        raise ValueError(f"not a stanosa-v1 document: {doc.get('format')!r}")
    stacks = {"encoder": {}, "decoder": {}}
    for record in doc["layers"]:
        stacks[record["stage"]][record["index"]] = persist.dense_from_record(record)
    zca = None
    if doc.get("zca") is not None:
        zca = ZcaTransform(
            mean=np.array(doc["zca"]["mean"], dtype=np.float64),
            matrix=np.array(doc["zca"]["matrix"], dtype=np.float64),
            epsilon=doc["zca"]["epsilon"],
        )
    return StanosaModel(
        zca=zca,
        encoder=[stacks["encoder"][i] for i in sorted(stacks["encoder"])],
        decoder=[stacks["decoder"][i] for i in sorted(stacks["decoder"])],
    )
