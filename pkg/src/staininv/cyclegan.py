"""Toy-scale cycle-consistent adversarial training over flattened patches.

Two MLP generators map between colour domains A and B; two MLP
discriminators score domain membership in (0, 1).  The objective combines
log-likelihood GAN terms for both directions with weighted identity and
cycle-consistency l1 penalties:

    total = gan(F) + gan(G) + lambda1 * identity + lambda2 * cycle

Training alternates a four-step generator pass (identity, cross-domain GAN
scoring, cycle-back, weighted sum + Adam) with a discriminator ascent pass.
Generators descend the non-saturating variant (-log D(fake)) by default;
the saturating form from the min-max objective is available behind a flag.
"""

from dataclasses import dataclass

import numpy as np

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

PROB_CLAMP = 1e-9  # keeps the log terms bounded


@dataclass
class ToyGenerator:
    layers: list  # DenseLayer stack, d -> d

    def __post_init__(self):
        if self.layers[0].n_in != self.layers[-1].n_out:
            raise ValueError("generator input and output dims must match")


@dataclass
class ToyDiscriminator:
    layers: list  # DenseLayer stack, d -> 1, sigmoid head

    def __post_init__(self):
        if self.layers[-1].n_out != 1 or self.layers[-1].activation != "sigmoid":
            raise ValueError("discriminator must end in a 1-unit sigmoid")


def generator_init(dim, rng, hidden=64):
    return ToyGenerator(
        layers=[dense_init(dim, hidden, "tanh", rng), dense_init(hidden, dim, "sigmoid", rng)]
    )


def discriminator_init(dim, rng, hidden=32):
    return ToyDiscriminator(
        layers=[
            dense_init(dim, hidden, "leaky_relu", rng),
            dense_init(hidden, 1, "sigmoid", rng),
        ]
    )


def generate(model, batch):
    return mlp_forward(model.layers, batch)


def discriminate(model, batch):
    return mlp_forward(model.layers, batch)[:, 0]


def _clamp(scores):
    return np.clip(scores, PROB_CLAMP, 1.0 - PROB_CLAMP)


def gan_loss(d_real_scores, d_fake_scores):
    """mean log D(real) + mean log(1 - D(fake)), scores clamped before logs."""
    real = np.asarray(d_real_scores, dtype=np.float64).reshape(-1)
    fake = np.asarray(d_fake_scores, dtype=np.float64).reshape(-1)
    for scores in (real, fake):
        if scores.size == 0:
            raise ValueError("empty score batch")
        if scores.min() < 0.0 or scores.max() > 1.0:
            raise ValueError("scores must lie in [0, 1]")
    return float(np.mean(np.log(_clamp(real))) + np.mean(np.log(1.0 - _clamp(fake))))


def _l1(diff):
    # per-sample sum over elements, then mean over the batch
    return float(np.abs(diff).sum(axis=1).mean())


def identity_loss(f, g, batch_a, batch_b):
    """l1 penalty for mapping each domain 'back to itself'."""
    a = np.asarray(batch_a, dtype=np.float64)
    b = np.asarray(batch_b, dtype=np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("empty batch")
    return _l1(generate(g, a) - a) + _l1(generate(f, b) - b)


def cycle_loss(f, g, batch_a, batch_b):
    """l1 penalty on round trips G(F(a)) vs a and F(G(b)) vs b."""
    a = np.asarray(batch_a, dtype=np.float64)
    b = np.asarray(batch_b, dtype=np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("empty batch")
    return _l1(generate(g, generate(f, a)) - a) + _l1(generate(f, generate(g, b)) - b)


def full_objective(losses, config):
    """gan_f + gan_g + lambda1 * identity + lambda2 * cycle."""
    return (
        losses["gan_f"]
        + losses["gan_g"]
        + config.lambda1 * losses["identity"]
        + config.lambda2 * losses["cycle"]
    )


@dataclass
class CycleGanConfig:
    lambda1: float = 5.0  # identity weight
    lambda2: float = 10.0  # cycle weight
    lr: float = 0.0002
    epochs: int = 200
    batch: int = 32
    seed: int = 0
    saturating: bool = False  # min-max generator objective instead of -log D(fake)
    hidden_generator: int = 64
    hidden_discriminator: int = 32

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


def _dlog_scores(scores, n):
    """d/ds of -mean(log s); zero where the clamp binds."""
    inside = (scores > PROB_CLAMP) & (scores < 1.0 - PROB_CLAMP)
    return np.where(inside, -1.0 / (n * _clamp(scores)), 0.0)


def _dlog_one_minus(scores, n):
    """d/ds of mean(log(1 - s)); zero where the clamp binds."""
    inside = (scores > PROB_CLAMP) & (scores < 1.0 - PROB_CLAMP)
    return np.where(inside, -1.0 / (n * (1.0 - _clamp(scores))), 0.0)


def _generator_pass(f, g, d_a, d_b, a, b, config):
    """Steps 1-4 for one minibatch: losses, and gradients for F and G."""
    n_a, n_b = a.shape[0], b.shape[0]
    f_grads = zero_grads(f.layers)
    g_grads = zero_grads(g.layers)

    # step 1: identity mapping back onto the source domain
    caches = []
    id_a = mlp_forward(g.layers, a, caches)
    l_identity = _l1(id_a - a)
    mlp_backward(g.layers, caches, config.lambda1 * np.sign(id_a - a) / n_a, g_grads)
    caches = []
    id_b = mlp_forward(f.layers, b, caches)
    l_identity += _l1(id_b - b)
    mlp_backward(f.layers, caches, config.lambda1 * np.sign(id_b - b) / n_b, f_grads)

    # step 2: cross-domain mapping, scored by the target discriminator
    f_caches = []
    fake_b = mlp_forward(f.layers, a, f_caches)
    db_caches = []
    fake_b_scores = mlp_forward(d_b.layers, fake_b, db_caches)
    l_gan_f = gan_loss(discriminate(d_b, b), fake_b_scores[:, 0])

    g_caches = []
    fake_a = mlp_forward(g.layers, b, g_caches)
    da_caches = []
    fake_a_scores = mlp_forward(d_a.layers, fake_a, da_caches)
    l_gan_g = gan_loss(discriminate(d_a, a), fake_a_scores[:, 0])

    if config.saturating:
        ds_fake_b = _dlog_one_minus(fake_b_scores, n_a)
        ds_fake_a = _dlog_one_minus(fake_a_scores, n_b)
    else:
        ds_fake_b = _dlog_scores(fake_b_scores, n_a)
        ds_fake_a = _dlog_scores(fake_a_scores, n_b)
    _, d_fake_b = mlp_backward(d_b.layers, db_caches, ds_fake_b)
    _, d_fake_a = mlp_backward(d_a.layers, da_caches, ds_fake_a)

    # step 3: cycle back to the source domain
    caches = []
    rec_a = mlp_forward(g.layers, fake_b, caches)
    l_cycle = _l1(rec_a - a)
    _, d_cyc_b = mlp_backward(
        g.layers, caches, config.lambda2 * np.sign(rec_a - a) / n_a, g_grads
    )
    caches = []
    rec_b = mlp_forward(f.layers, fake_a, caches)
    l_cycle += _l1(rec_b - b)
    _, d_cyc_a = mlp_backward(
        f.layers, caches, config.lambda2 * np.sign(rec_b - b) / n_b, f_grads
    )

    # step 4: weighted sum -- fold the adversarial and cycle paths back
    # through each generator
    mlp_backward(f.layers, f_caches, d_fake_b + d_cyc_b, f_grads)
    mlp_backward(g.layers, g_caches, d_fake_a + d_cyc_a, g_grads)

    losses = {
        "identity": l_identity,
        "gan_f": l_gan_f,
        "gan_g": l_gan_g,
        "cycle": l_cycle,
    }
    return losses, f_grads, g_grads


def _discriminator_pass(disc, real, fake):
    """Gradient-ascent gradients on mean log D(real) + mean log(1 - D(fake))."""
    grads = zero_grads(disc.layers)
    caches = []
    real_scores = mlp_forward(disc.layers, real, caches)
    mlp_backward(disc.layers, caches, _dlog_scores(real_scores, real.shape[0]), grads)
    caches = []
    fake_scores = mlp_forward(disc.layers, fake, caches)
    mlp_backward(
        disc.layers, caches, -_dlog_one_minus(fake_scores, fake.shape[0]), grads
    )
    value = gan_loss(real_scores[:, 0], fake_scores[:, 0])
    return value, grads


def train_cyclegan(domain_a, domain_b, config):
    """Alternating optimisation; returns (F, G, D_A, D_B, loss history).

    History rows carry, per batch: identity, the two GAN losses, cycle, the
    weighted generator total, then both discriminator losses.
    """
    a_all = np.asarray(domain_a, dtype=np.float64)
    b_all = np.asarray(domain_b, dtype=np.float64)
    if a_all.shape[0] == 0 or b_all.shape[0] == 0:
        raise ValueError("both domains must be non-empty")
    dim = a_all.shape[1]
    rng = np.random.default_rng(derive_seed(config.seed, "cyclegan-init"))
    f = generator_init(dim, rng, config.hidden_generator)
    g = generator_init(dim, rng, config.hidden_generator)
    d_a = discriminator_init(dim, rng, config.hidden_discriminator)
    d_b = discriminator_init(dim, rng, config.hidden_discriminator)

    gen_params = mlp_params(f.layers) + mlp_params(g.layers)
    disc_params = mlp_params(d_a.layers) + mlp_params(d_b.layers)
    gen_adam = adam_init(gen_params, config.lr)
    disc_adam = adam_init(disc_params, config.lr)

    batch = min(config.batch, a_all.shape[0], b_all.shape[0])
    steps = min(a_all.shape[0], b_all.shape[0]) // batch
    history = []
    for epoch in range(1, config.epochs + 1):
        order_a = np.random.default_rng(
            derive_seed(config.seed, f"shuffle-a-{epoch}")
        ).permutation(a_all.shape[0])
        order_b = np.random.default_rng(
            derive_seed(config.seed, f"shuffle-b-{epoch}")
        ).permutation(b_all.shape[0])
        for step in range(steps):
            a = a_all[order_a[step * batch : (step + 1) * batch]]
            b = b_all[order_b[step * batch : (step + 1) * batch]]

            losses, f_grads, g_grads = _generator_pass(f, g, d_a, d_b, a, b, config)
            adam_step(
                gen_adam, gen_params, flatten_grads(f_grads) + flatten_grads(g_grads)
            )

            fake_b = generate(f, a)
            fake_a = generate(g, b)
            l_disc_b, db_grads = _discriminator_pass(d_b, b, fake_b)
            l_disc_a, da_grads = _discriminator_pass(d_a, a, fake_a)
            adam_step(
                disc_adam, disc_params, flatten_grads(da_grads) + flatten_grads(db_grads)
            )

            history.append(
                {
                    "epoch": epoch,
                    "batch": step,
                    "l_identity": losses["identity"],
                    "l_gan_f": losses["gan_f"],
                    "l_gan_g": losses["gan_g"],
                    "l_cycle": losses["cycle"],
                    "l_total_gen": full_objective(losses, config),
                    "l_disc_a": l_disc_a,
                    "l_disc_b": l_disc_b,
                }
            )
    return f, g, d_a, d_b, history
