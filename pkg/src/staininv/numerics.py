"""Dense-tensor math with hand-written backward passes and the Adam optimizer.

Everything runs in 64-bit floats on numpy arrays.  Layers carry their
parameters as plain arrays; gradients are computed analytically and can be
cross-checked against ``finite_diff_grad`` (the test oracle used throughout
the suite).
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh", "sigmoid", "leaky_relu", "linear")


def tensor(values, shape=None, checked=True):
    """Build a float64, C-ordered array, rejecting NaN/Inf in checked mode."""
    arr = np.array(values, dtype=np.float64, order="C")
    if shape is not None:
        if int(np.prod(shape)) != arr.size:
            raise ValueError(
                f"shape {tuple(shape)} incompatible with {arr.size} values"
            )
        arr = arr.reshape(shape)
    if checked and not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


def derive_seed(root_seed, name):
    """Derive a named 63-bit sub-stream seed from a root seed.

    Sub-streams are independent per name, so adding a consumer never
    perturbs another consumer's random stream.
    """
    digest = hashlib.sha256(f"{root_seed}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def _check_activation(name):
    if name not in ACTIVATIONS:
        raise ValueError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


def apply_activation(name, pre, leaky_slope=0.01):
    if name == "tanh":
        return np.tanh(pre)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-pre))
    if name == "leaky_relu":
        return np.where(pre >= 0.0, pre, leaky_slope * pre)
    if name == "linear":
        return pre
    _check_activation(name)


def activation_derivative(name, pre, leaky_slope=0.01):
    """d activation / d pre-activation, elementwise."""
    if name == "tanh":
        t = np.tanh(pre)
        return 1.0 - t * t
    if name == "sigmoid":
        s = 1.0 / (1.0 + np.exp(-pre))
        return s * (1.0 - s)
    if name == "leaky_relu":
        return np.where(pre >= 0.0, 1.0, leaky_slope)
    if name == "linear":
        return np.ones_like(pre)
    _check_activation(name)


@dataclass
class DenseLayer:
    """Fully connected layer: activation(x @ W.T + b)."""

    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "linear"
    leaky_slope: float = 0.01

    def __post_init__(self):
        _check_activation(self.activation)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ValueError("weights must be 2-d and bias 1-d")
        if self.weights.shape[0] != self.bias.shape[0]:
            raise ValueError(
                f"bias length {self.bias.shape[0]} does not match "
                f"{self.weights.shape[0]} output units"
            )
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError("leaky_slope must lie in (0, 1)")

    @property
    def n_in(self):
        return self.weights.shape[1]

    @property
    def n_out(self):
        return self.weights.shape[0]


@dataclass
class LayerGrads:
    weights: np.ndarray
    bias: np.ndarray


def glorot_uniform(n_out, n_in, rng, receptive=1):
    limit = np.sqrt(6.0 / ((n_in + n_out) * receptive))
    return rng.uniform(-limit, limit, size=(n_out, n_in * receptive))


def dense_init(n_in, n_out, activation, rng, leaky_slope=0.01):
    """Glorot-uniform weights, zero bias, from the given generator."""
    weights = glorot_uniform(n_out, n_in, rng)
    return DenseLayer(weights, np.zeros(n_out), activation, leaky_slope)


def _dense_pre(layer, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a batch of row vectors, got ndim={x.ndim}")
    if x.shape[1] != layer.n_in:
        raise ValueError(
            f"input dimension {x.shape[1]} does not match layer input {layer.n_in}"
        )
    return x @ layer.weights.T + layer.bias


def dense_forward(layer, x):
    """Forward map for a batch (batch, in) -> (batch, out)."""
    return apply_activation(layer.activation, _dense_pre(layer, x), layer.leaky_slope)


def dense_backward(layer, x, upstream, pre=None):
    """Analytic gradients of ``dense_forward`` w.r.t. parameters and input.

    ``upstream`` is dLoss/dOutput with the forward output's shape.  Passing
    the cached pre-activation avoids recomputing the forward matmul.
    """
    x = np.asarray(x, dtype=np.float64)
    if pre is None:
        pre = _dense_pre(layer, x)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != pre.shape:
        raise ValueError(
            f"upstream gradient shape {upstream.shape} does not match output {pre.shape}"
        )
    dpre = upstream * activation_derivative(layer.activation, pre, layer.leaky_slope)
    grads = LayerGrads(weights=dpre.T @ x, bias=dpre.sum(axis=0))
    return grads, dpre @ layer.weights


@dataclass
class Conv2dLayer:
    """2-d cross-correlation layer over (batch, channels, H, W) maps."""

    kernels: np.ndarray  # (out_ch, in_ch, k, k)
    bias: np.ndarray  # (out_ch,)
    padding: int = 0
    activation: str = "linear"
    leaky_slope: float = 0.01

    def __post_init__(self):
        _check_activation(self.activation)
        if self.kernels.ndim != 4 or self.kernels.shape[2] != self.kernels.shape[3]:
            raise ValueError("kernels must have shape (out_ch, in_ch, k, k)")
        if self.kernels.shape[2] % 2 != 1:
            raise ValueError("kernel size must be odd")
        if self.bias.shape != (self.kernels.shape[0],):
            raise ValueError("bias length must equal out_ch")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError("leaky_slope must lie in (0, 1)")

    @property
    def k(self):
        return self.kernels.shape[2]


def conv2d_init(in_ch, out_ch, k, rng, padding=None, activation="linear", leaky_slope=0.01):
    """Glorot-initialised convolution; padding defaults to 'same' ((k-1)/2)."""
    if padding is None:
        padding = (k - 1) // 2
    kernels = glorot_uniform(out_ch, in_ch, rng, receptive=k * k).reshape(
        out_ch, in_ch, k, k
    )
    return Conv2dLayer(kernels, np.zeros(out_ch), padding, activation, leaky_slope)


def _im2col(x, k, padding):
    # x: (B, C, H, W) -> columns (B, H'*W', C*k*k) with H' = H+2p-k+1
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    b, c, out_h, out_w = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, out_h * out_w, c * k * k)
    return np.ascontiguousarray(cols), out_h, out_w


def _col2im(dcols, x_shape, k, padding):
    b, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    out_h, out_w = hp - k + 1, wp - k + 1
    dx = np.zeros((b, c, hp, wp))
    d6 = dcols.reshape(b, out_h, out_w, c, k, k)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + out_h, j : j + out_w] += d6[:, :, :, :, i, j].transpose(
                0, 3, 1, 2
            )
    return dx[:, :, padding : padding + h, padding : padding + w]


def _conv2d_pre(layer, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError("expected input of shape (batch, channels, H, W)")
    out_ch, in_ch, k, _ = layer.kernels.shape
    if x.shape[1] != in_ch:
        raise ValueError(f"input has {x.shape[1]} channels, layer expects {in_ch}")
    if x.shape[2] + 2 * layer.padding < k or x.shape[3] + 2 * layer.padding < k:
        raise ValueError("spatial dims (after padding) smaller than the kernel")
    cols, out_h, out_w = _im2col(x, k, layer.padding)
    pre = cols @ layer.kernels.reshape(out_ch, -1).T + layer.bias
    pre = pre.transpose(0, 2, 1).reshape(x.shape[0], out_ch, out_h, out_w)
    return pre, cols


def conv2d_forward(layer, x):
    """Cross-correlation with the layer's padding, then activation."""
    pre, _ = _conv2d_pre(layer, x)
    return apply_activation(layer.activation, pre, layer.leaky_slope)


def conv2d_backward(layer, x, upstream, pre=None, cols=None):
    """Analytic gradients of ``conv2d_forward``."""
    x = np.asarray(x, dtype=np.float64)
    if pre is None or cols is None:
        pre, cols = _conv2d_pre(layer, x)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != pre.shape:
        raise ValueError(
            f"upstream gradient shape {upstream.shape} does not match output {pre.shape}"
        )
    out_ch, in_ch, k, _ = layer.kernels.shape
    dpre = upstream * activation_derivative(layer.activation, pre, layer.leaky_slope)
    b = x.shape[0]
    dpre_cols = dpre.reshape(b, out_ch, -1).transpose(0, 2, 1)  # (B, H'W', out_ch)
    dkern = np.einsum("bpo,bpc->oc", dpre_cols, cols).reshape(layer.kernels.shape)
    dbias = dpre_cols.sum(axis=(0, 1))
    dcols = dpre_cols @ layer.kernels.reshape(out_ch, -1)
    dx = _col2im(dcols, x.shape, k, layer.padding)
    return LayerGrads(weights=dkern, bias=dbias), dx


@dataclass
class AdamState:
    """Adam optimizer state for an ordered list of parameter arrays."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epsilon <= 0:
            raise ValueError("learning_rate and epsilon must be positive")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta coefficients must lie in (0, 1)")


def adam_init(params, learning_rate, beta1=0.9, beta2=0.999, epsilon=1e-8):
    params = _as_param_list(params)
    state = AdamState(learning_rate, beta1, beta2, epsilon)
    state.first_moment = [np.zeros_like(p) for p in params]
    state.second_moment = [np.zeros_like(p) for p in params]
    return state


def _as_param_list(params):
    if isinstance(params, np.ndarray):
        return [params]
    return list(params)


def adam_step(state, params, grads):
    """One Adam update with bias correction; parameters updated in place."""
    single = isinstance(params, np.ndarray)
    params = _as_param_list(params)
    grads = _as_param_list(grads)
    if len(params) != len(grads):
        raise ValueError("params and grads must pair up")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return (params[0] if single else params), state


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of a scalar function: the test oracle."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError("function not finite at perturbed point")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(analytic, numeric, atol=1e-6):
    """max |a - n| / max(atol, |a|, |n|) over all elements."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(atol, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


# --- small MLP helpers shared by the auto-encoder and GAN modules ---


def mlp_forward(layers, x, caches=None):
    """Run a DenseLayer stack; optionally collect (input, pre) caches."""
    out = np.asarray(x, dtype=np.float64)
    for layer in layers:
        pre = _dense_pre(layer, out)
        if caches is not None:
            caches.append((out, pre))
        out = apply_activation(layer.activation, pre, layer.leaky_slope)
    return out


def mlp_backward(layers, caches, upstream, grads_out=None):
    """Backprop through a DenseLayer stack given forward caches.

    Returns (per-layer LayerGrads list, input gradient).  When ``grads_out``
    is given, parameter gradients are accumulated into it instead.
    """
    collected = [] if grads_out is None else None
    d = upstream
    for idx in range(len(layers) - 1, -1, -1):
        x, pre = caches[idx]
        grads, d = dense_backward(layers[idx], x, d, pre=pre)
        if grads_out is None:
            collected.append(grads)
        else:
            grads_out[idx].weights += grads.weights
            grads_out[idx].bias += grads.bias
    if collected is not None:
        collected.reverse()
    return collected, d


def mlp_params(layers):
    """Flat parameter list [W0, b0, W1, b1, ...] for optimizer plumbing."""
    out = []
    for layer in layers:
        out.append(layer.weights)
        out.append(layer.bias)
    return out


def zero_grads(layers):
    return [LayerGrads(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in layers]


def flatten_grads(grads_lists):
    out = []
    for grads in grads_lists:
        out.append(grads.weights)
        out.append(grads.bias)
    return out


def param_checksum(arrays):
    """SHA-256 over the raw bytes of an ordered list of arrays."""
    digest = hashlib.sha256()
    for arr in arrays:
        digest.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return digest.hexdigest()
