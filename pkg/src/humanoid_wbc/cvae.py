"""Conditional VAE student policy with hand-written backpropagation.

Linear layers use the row-vector convention ``y = x @ W + b`` with ``W`` of
shape (fan_in, fan_out); every function accepts a single sample (1-D) or a
batch (2-D, samples along axis 0).

Encoder input layout: the observation history flattened time-major, oldest
step first, each step ``[o_k, a_{k-1}]`` (the action part only when
``include_past_actions``), followed by the text embedding. Decoder input is
``[z, o_t]``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import formats
from ._validation import InputError, NumericalError

ACTIVATIONS = ("elu", "identity", "tanh")


@dataclass(frozen=True)
class CVAEConfig:
    obs_dim: int
    action_dim: int
    history_len: int = 20
    text_dim: int = 512
    latent_dim: int = 128
    encoder_hidden: tuple = (2048, 1024, 512)
    decoder_hidden: tuple = (512, 1024, 2048)
    kl_weight: float = 1e-3
    logstd_min: float = -5.0
    logstd_max: float = 2.0
    include_past_actions: bool = True
    activation: str = "elu"

    def __post_init__(self):
        object.__setattr__(self, "encoder_hidden", tuple(int(h) for h in self.encoder_hidden))
        object.__setattr__(self, "decoder_hidden", tuple(int(h) for h in self.decoder_hidden))
        for name in ("obs_dim", "action_dim", "history_len", "text_dim", "latent_dim"):
            if int(getattr(self, name)) < 1:
                raise InputError(f"{name} must be at least 1")
        if any(h < 1 for h in self.encoder_hidden + self.decoder_hidden):
            raise InputError("hidden sizes must be positive")
        if not self.kl_weight >= 0:
            raise InputError("kl_weight must be non-negative")
        if not self.logstd_min < self.logstd_max:
            raise InputError("logstd bounds must satisfy min < max")
        if self.activation not in ACTIVATIONS:
            raise InputError(f"activation must be one of {ACTIVATIONS}")

    @property
    def step_dim(self):
        return self.obs_dim + (self.action_dim if self.include_past_actions else 0)

    @property
    def history_dim(self):
        return self.history_len * self.step_dim

    @property
    def encoder_input_dim(self):
        return self.history_dim + self.text_dim

    @property
    def decoder_input_dim(self):
        return self.latent_dim + self.obs_dim

    @property
    def input_dim(self):
        """Width of the flat ``[history, text, o_t]`` rows the estimators consume."""
        return self.history_dim + self.text_dim + self.obs_dim

    def to_dict(self):
        d = asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        d["decoder_hidden"] = list(self.decoder_hidden)
        return d

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(**data)
        except TypeError as exc:
            raise InputError(f"bad CVAE config: {exc}") from exc


# -- activations ------------------------------------------------------------

def _act(x, kind):
    if kind == "elu":
        return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))
    if kind == "tanh":
        return np.tanh(x)
    return x


def _act_grad(x, y, kind):
    """Derivative given pre-activation ``x`` and output ``y``."""
    if kind == "elu":
        return np.where(x > 0, 1.0, y + 1.0)
    if kind == "tanh":
        return 1.0 - y * y
    return np.ones_like(x)


# -- plain MLP blocks ---------------------------------------------------------

def init_mlp(rng, sizes, prefix, params):
    """Fan-in scaled uniform weights, zero biases."""
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(a)
        params[f"{prefix}.{i}.W"] = rng.uniform(-bound, bound, size=(a, b))
        params[f"{prefix}.{i}.b"] = np.zeros(b)
    return params


def mlp_forward(params, prefix, n_layers, x, activation, final_activation=False):
    """Returns output and the cache needed by :func:`mlp_backward`."""
    cache = []
    h = x
    for i in range(n_layers):
        pre = h @ params[f"{prefix}.{i}.W"] + params[f"{prefix}.{i}.b"]
        last = i == n_layers - 1
        out = _act(pre, activation) if (final_activation or not last) else pre
        cache.append((h, pre, out))
        h = out
    return h, cache


def mlp_backward(params, prefix, n_layers, cache, g_out, activation, grads, final_activation=False,
                 input_grad=True):
    """Accumulate parameter gradients into ``grads``; returns the input gradient (None if not requested)."""
    g = g_out
    for i in reversed(range(n_layers)):
        h_in, pre, out = cache[i]
        last = i == n_layers - 1
        if final_activation or not last:
            g = g * _act_grad(pre, out, activation)
        grads[f"{prefix}.{i}.W"] = grads.get(f"{prefix}.{i}.W", 0.0) + h_in.T @ g
        grads[f"{prefix}.{i}.b"] = grads.get(f"{prefix}.{i}.b", 0.0) + g.sum(axis=0)
        if i == 0 and not input_grad:
            return None
        g = g @ params[f"{prefix}.{i}.W"].T
    return g


def param_count(params):
    return int(sum(v.size for v in params.values()))


# -- CVAE ---------------------------------------------------------------------

@dataclass
class CVAEParams:
    config: CVAEConfig
    tensors: dict = field(default_factory=dict)

    def copy(self):
        return CVAEParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def check(self):
        expected = _param_shapes(self.config)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) ^ set(self.tensors))
            raise InputError(f"parameter names do not match the config: {missing[:4]}")
        for k, shape in expected.items():
            t = self.tensors[k]
            if t.shape != shape:
                raise InputError(f"parameter {k} has shape {t.shape}, expected {shape}")
            if not np.all(np.isfinite(t)):
                raise NumericalError(f"parameter {k} is not finite")
        return self


def _param_shapes(config):
    shapes = {}
    enc = (config.encoder_input_dim,) + config.encoder_hidden
    for i, (a, b) in enumerate(zip(enc[:-1], enc[1:])):
        shapes[f"enc.{i}.W"], shapes[f"enc.{i}.b"] = (a, b), (b,)
    for head in ("mu", "logstd"):
        shapes[f"{head}.0.W"], shapes[f"{head}.0.b"] = (enc[-1], config.latent_dim), (config.latent_dim,)
    dec = (config.decoder_input_dim,) + config.decoder_hidden + (config.action_dim,)
    for i, (a, b) in enumerate(zip(dec[:-1], dec[1:])):
        shapes[f"dec.{i}.W"], shapes[f"dec.{i}.b"] = (a, b), (b,)
    return shapes


def init_params(config, rng=None):
    rng = np.random.default_rng(rng)
    t = {}
    enc = (config.encoder_input_dim,) + config.encoder_hidden
    init_mlp(rng, enc, "enc", t)
    init_mlp(rng, (enc[-1], config.latent_dim), "mu", t)
    init_mlp(rng, (enc[-1], config.latent_dim), "logstd", t)
    init_mlp(rng, (config.decoder_input_dim,) + config.decoder_hidden + (config.action_dim,), "dec", t)
    return CVAEParams(config, t)


def zero_params(config):
    return CVAEParams(config, {k: np.zeros(s) for k, s in _param_shapes(config).items()})


@dataclass
class EncoderOutput:
    mu: np.ndarray
    sigma: np.ndarray
    logstd: np.ndarray


def _as_batch(x, width, name):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = x[None] if single else x
    if x2.ndim != 2 or x2.shape[1] != width:
        raise InputError(f"{name} must have trailing dimension {width}, got shape {x.shape}")
    return x2, single


def _encode_full(params, obs_history, text):
    cfg = params.config
    H, single = _as_batch(obs_history, cfg.history_dim, "obs_history")
    V, single_t = _as_batch(text, cfg.text_dim, "text")
    if V.shape[0] != H.shape[0]:
        if V.shape[0] == 1:
            V = np.broadcast_to(V, (H.shape[0], cfg.text_dim))
        else:
            raise InputError("history and text batch sizes differ")
    x = np.hstack([H, V])
    nl = len(cfg.encoder_hidden)
    if nl:
        h, trunk = mlp_forward(params.tensors, "enc", nl, x, cfg.activation, final_activation=True)
    else:
        h, trunk = x, []
    mu = h @ params.tensors["mu.0.W"] + params.tensors["mu.0.b"]
    raw = h @ params.tensors["logstd.0.W"] + params.tensors["logstd.0.b"]
    logstd = np.clip(raw, cfg.logstd_min, cfg.logstd_max)
    sigma = np.exp(logstd)
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
        raise NumericalError("non-finite encoder activations")
    return EncoderOutput(mu, sigma, logstd), (trunk, h, raw), single and single_t


def _squeeze(out, single):
    if single:
        return EncoderOutput(out.mu[0], out.sigma[0], out.logstd[0])
    return out


def encode(params, obs_history, text):
    out, _, single = _encode_full(params, obs_history, text)
    return _squeeze(out, single)


def reparameterize(out, eps):
    eps = np.asarray(eps, dtype=float)
    if eps.shape != np.shape(out.mu):
        raise InputError(f"eps shape {eps.shape} does not match latent shape {np.shape(out.mu)}")
    return out.mu + out.sigma * eps


def _decode_full(params, z, obs):
    cfg = params.config
    Z, single = _as_batch(z, cfg.latent_dim, "z")
    O, _ = _as_batch(obs, cfg.obs_dim, "obs")
    if O.shape[0] != Z.shape[0]:
        raise InputError("latent and observation batch sizes differ")
    x = np.hstack([Z, O])
    a, cache = mlp_forward(params.tensors, "dec", len(cfg.decoder_hidden) + 1, x, cfg.activation)
    return a, cache, single


def decode(params, z, obs):
    a, _, single = _decode_full(params, z, obs)
    if not np.all(np.isfinite(a)):
        raise NumericalError("non-finite decoder output")
    return a[0] if single else a


def kl_divergence(out):
    """KL(N(mu, sigma^2) || N(0, I)) summed over latent dims (per sample for batches)."""
    mu = np.asarray(out.mu, dtype=float)
    sigma = np.asarray(out.sigma, dtype=float)
    if np.any(sigma <= 0):
        raise InputError("sigma must be positive")
    logs = np.log(sigma)
    kl = 0.5 * np.sum(mu * mu + sigma * sigma - 1.0 - 2.0 * logs, axis=-1)
    return kl if kl.ndim else float(kl)


def inference_act(params, obs_history, text, obs):
    return decode(params, encode(params, obs_history, text).mu, obs)


@dataclass
class Batch:
    history: np.ndarray
    text: np.ndarray
    obs: np.ndarray
    action: np.ndarray

    def __len__(self):
        return np.asarray(self.action).reshape(-1, np.shape(self.action)[-1]).shape[0]


def split_inputs(X, config):
    """Split flat ``[history, text, o_t]`` rows into their parts."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != config.input_dim:
        raise InputError(f"inputs must be (N, {config.input_dim}), got {X.shape}")
    h, t = config.history_dim, config.text_dim
    return X[:, :h], X[:, h:h + t], X[:, h + t:]


def loss_and_gradients(params, batch, eps, kl_weight=None):
    """Batch-mean of ``||a_T - a_S||^2 + kl_weight * KL`` and its exact gradient.

    Returns ``(loss, grads, info)``; ``info`` holds the mean reconstruction and
    KL terms.
    """
    cfg = params.config
    lam = cfg.kl_weight if kl_weight is None else float(kl_weight)
    A, _ = _as_batch(batch.action, cfg.action_dim, "action")
    B = A.shape[0]
    if B == 0:
        raise InputError("empty batch")
    out, (trunk, h, raw), _ = _encode_full(params, batch.history, batch.text)
    E, _ = _as_batch(eps, cfg.latent_dim, "eps")
    if E.shape[0] != B or out.mu.shape[0] != B:
        raise InputError("batch components disagree on size")
    z = out.mu + out.sigma * E
    a_s, dec_cache, _ = _decode_full(params, z, batch.obs)
    diff = a_s - A
    recon = np.sum(diff * diff, axis=1)
    kl = 0.5 * np.sum(out.mu**2 + out.sigma**2 - 1.0 - 2.0 * out.logstd, axis=1)
    per_sample = recon + lam * kl
    bad = np.nonzero(~np.isfinite(per_sample))[0]
    if bad.size:
        raise NumericalError(f"non-finite loss at sample {int(bad[0])}")
    loss = float(np.mean(per_sample))

    grads = {}
    g_a = 2.0 * diff / B
    g_in = mlp_backward(params.tensors, "dec", len(cfg.decoder_hidden) + 1, dec_cache, g_a, cfg.activation, grads)
    g_z = g_in[:, : cfg.latent_dim]
    g_mu = g_z + lam * out.mu / B
    g_logstd = g_z * out.sigma * E + lam * (out.sigma**2 - 1.0) / B
    # clamp passes gradient only strictly inside the bounds
    g_raw = g_logstd * ((raw > cfg.logstd_min) & (raw < cfg.logstd_max))
    grads["mu.0.W"] = h.T @ g_mu
    grads["mu.0.b"] = g_mu.sum(axis=0)
    grads["logstd.0.W"] = h.T @ g_raw
    grads["logstd.0.b"] = g_raw.sum(axis=0)
    nl = len(cfg.encoder_hidden)
    if nl:
        g_h = g_mu @ params.tensors["mu.0.W"].T + g_raw @ params.tensors["logstd.0.W"].T
        mlp_backward(params.tensors, "enc", nl, trunk, g_h, cfg.activation, grads, final_activation=True,
                     input_grad=False)
    info = {"recon": float(np.mean(recon)), "kl": float(np.mean(kl))}
    return loss, grads, info


# -- optimiser ----------------------------------------------------------------

class Adam:
    def __init__(self, lr=1e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        if not lr > 0:
            raise InputError("learning rate must be positive")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, tensors, grads):
        """In-place update of ``tensors`` (a name -> array dict)."""
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k in sorted(grads):
            g = grads[k]
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            tensors[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t,
                "m": {k: v.tolist() for k, v in self.m.items()}, "v": {k: v.tolist() for k, v in self.v.items()}}


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, params, extra=None):
    data = {
        "config": params.config.to_dict(),
        "tensors": _tensor_dict(params.tensors),
    }
    if extra:
        data["extra"] = extra
    formats.write_json(path, data, kind="cvae_checkpoint")


def load_checkpoint(path):
    data = formats.read_json(path, kind="cvae_checkpoint")
    return checkpoint_from_dict(data)


def checkpoint_from_dict(data):
    try:
        config = CVAEConfig.from_dict(data["config"])
        tensors = {k: np.asarray(v["data"], dtype=float).reshape(v["shape"]) for k, v in data["tensors"].items()}
    except (KeyError, ValueError, TypeError) as exc:
        raise InputError(f"malformed checkpoint: {exc}") from exc
    return CVAEParams(config, tensors).check()


# -- estimators ---------------------------------------------------------------

class CVAEStudent(RegressorMixin, TransformerMixin, BaseEstimator):
    """Estimator wrapper; rows of ``X`` are flat ``[history, text, o_t]`` vectors.

    ``fit`` runs ``n_iter`` minibatch Adam steps; ``partial_fit`` runs one step
    per call on the rows given; ``predict`` uses the latent mean; ``transform``
    returns the latent mean.
    """

    def __init__(self, obs_dim=1, action_dim=1, history_len=20, text_dim=512, latent_dim=128,
                 encoder_hidden=(2048, 1024, 512), decoder_hidden=(512, 1024, 2048), kl_weight=1e-3,
                 learning_rate=1e-5, n_iter=100, batch_size=256, include_past_actions=True,
                 activation="elu", random_state=0):
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.history_len = history_len
        self.text_dim = text_dim
        self.latent_dim = latent_dim
        self.encoder_hidden = encoder_hidden
        self.decoder_hidden = decoder_hidden
        self.kl_weight = kl_weight
        self.learning_rate = learning_rate
        self.n_iter = n_iter
        self.batch_size = batch_size
        self.include_past_actions = include_past_actions
        self.activation = activation
        self.random_state = random_state

    def make_config(self):
        return CVAEConfig(self.obs_dim, self.action_dim, self.history_len, self.text_dim, self.latent_dim,
                          tuple(self.encoder_hidden), tuple(self.decoder_hidden), self.kl_weight,
                          include_past_actions=self.include_past_actions, activation=self.activation)

    def initialize(self):
        config = self.make_config()
        self.rng_ = np.random.default_rng(self.random_state)
        self.params_ = init_params(config, self.rng_)
        self.optimizer_ = Adam(self.learning_rate)
        self.loss_curve_ = []
        self.n_features_in_ = config.input_dim

    def _step(self, X, y):
        cfg = self.params_.config
        H, T, O = split_inputs(X, cfg)
        eps = self.rng_.standard_normal((X.shape[0], cfg.latent_dim))
        loss, grads, info = loss_and_gradients(self.params_, Batch(H, T, O, y), eps)
        self.optimizer_.step(self.params_.tensors, grads)
        self.loss_curve_.append(loss)
        return loss, info

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        self.initialize()
        y = y.reshape(X.shape[0], -1)
        for _ in range(self.n_iter):
            idx = self.rng_.integers(0, X.shape[0], size=min(self.batch_size, X.shape[0]))
            self._step(X[idx], y[idx])
        return self

    def partial_fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        if not hasattr(self, "params_"):
            self.initialize()
        return self._step(X, y.reshape(X.shape[0], -1))

    def predict(self, X):
        check_is_fitted(self, "params_")
        H, T, O = split_inputs(check_array(X), self.params_.config)
        return inference_act(self.params_, H, T, O)

    def transform(self, X):
        check_is_fitted(self, "params_")
        H, T, _ = split_inputs(check_array(X), self.params_.config)
        return encode(self.params_, H, T).mu

    def imitation_mse(self, X, y):
        """Mean squared action error per sample (summed over action dims)."""
        a = self.predict(X)
        return float(np.mean(np.sum((a - np.asarray(y).reshape(a.shape)) ** 2, axis=1)))


class MLPStudent(RegressorMixin, BaseEstimator):
    """Plain MLP regressor on the same flat inputs, trained with squared error."""

    def __init__(self, input_dim=1, action_dim=1, hidden=(256, 256), learning_rate=1e-5, n_iter=100,
                 batch_size=256, activation="elu", random_state=0, history_len=20, include_past_actions=True):
        self.input_dim = input_dim
        self.action_dim = action_dim
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.n_iter = n_iter
        self.batch_size = batch_size
        self.activation = activation
        self.random_state = random_state
        # input layout metadata, used when deploying the policy
        self.history_len = history_len
        self.include_past_actions = include_past_actions

    def initialize(self):
        if self.activation not in ACTIVATIONS:
            raise InputError(f"activation must be one of {ACTIVATIONS}")
        self.rng_ = np.random.default_rng(self.random_state)
        self.sizes_ = (self.input_dim,) + tuple(self.hidden) + (self.action_dim,)
        self.tensors_ = init_mlp(self.rng_, self.sizes_, "mlp", {})
        self.optimizer_ = Adam(self.learning_rate)
        self.loss_curve_ = []
        self.n_features_in_ = self.input_dim

    def loss_and_gradients(self, X, y):
        n_layers = len(self.sizes_) - 1
        a, cache = mlp_forward(self.tensors_, "mlp", n_layers, X, self.activation)
        diff = a - y
        per_sample = np.sum(diff * diff, axis=1)
        bad = np.nonzero(~np.isfinite(per_sample))[0]
        if bad.size:
            raise NumericalError(f"non-finite loss at sample {int(bad[0])}")
        grads = {}
        mlp_backward(self.tensors_, "mlp", n_layers, cache, 2.0 * diff / X.shape[0], self.activation, grads,
                     input_grad=False)
        return float(np.mean(per_sample)), grads

    def _step(self, X, y):
        loss, grads = self.loss_and_gradients(X, y)
        self.optimizer_.step(self.tensors_, grads)
        self.loss_curve_.append(loss)
        return loss, {"recon": loss, "kl": 0.0}

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        self.initialize()
        y = y.reshape(X.shape[0], -1)
        for _ in range(self.n_iter):
            idx = self.rng_.integers(0, X.shape[0], size=min(self.batch_size, X.shape[0]))
            self._step(X[idx], y[idx])
        return self

    def partial_fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        if not hasattr(self, "tensors_"):
            self.initialize()
        return self._step(X, y.reshape(X.shape[0], -1))

    def predict(self, X):
        check_is_fitted(self, "tensors_")
        X = check_array(X)
        if X.shape[1] != self.input_dim:
            raise InputError(f"expected {self.input_dim} features, got {X.shape[1]}")
        a, _ = mlp_forward(self.tensors_, "mlp", len(self.sizes_) - 1, X, self.activation)
        return a

    def imitation_mse(self, X, y):
        a = self.predict(X)
        return float(np.mean(np.sum((a - np.asarray(y).reshape(a.shape)) ** 2, axis=1)))


def mlp_param_count(sizes):
    return int(sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:])))


def budget_matched_hidden(config):
    """Hidden widths for an MLP with about the CVAE's parameter count.

    Uses the CVAE's layer pattern (encoder widths, latent width, decoder widths)
    scaled by a common factor found by bisection.
    """
    target = param_count(zero_params(config).tensors)
    pattern = np.array(config.encoder_hidden + (config.latent_dim,) + config.decoder_hidden, dtype=float)

    def count(scale):
        hidden = tuple(max(1, int(round(w * scale))) for w in pattern)
        return mlp_param_count((config.input_dim,) + hidden + (config.action_dim,)), hidden

    lo, hi = 0.01, 4.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if count(mid)[0] < target:
            lo = mid
        else:
            hi = mid
    return count(hi)[1]


def _tensor_dict(tensors):
    return {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in sorted(tensors.items())}


def save_student(path, student):
    """Checkpoint a fitted CVAEStudent or MLPStudent, including its constructor params."""
    params = {k: (list(v) if isinstance(v, tuple) else v) for k, v in student.get_params().items()}
    if isinstance(student, CVAEStudent):
        check_is_fitted(student, "params_")
        save_checkpoint(path, student.params_, extra={"estimator": "CVAEStudent", "params": params})
    elif isinstance(student, MLPStudent):
        check_is_fitted(student, "tensors_")
        formats.write_json(path, {"estimator": "MLPStudent", "params": params,
                                  "tensors": _tensor_dict(student.tensors_)}, kind="mlp_checkpoint")
    else:
        raise InputError(f"cannot checkpoint {type(student).__name__}")


def load_student(path):
    data = formats.read_json(path)
    kind = data.get("kind")
    try:
        if kind == "cvae_checkpoint":
            params = checkpoint_from_dict(data)
            est = CVAEStudent(**data.get("extra", {}).get("params", {}))
            est.initialize()
            if est.make_config() != params.config:
                raise InputError("checkpoint config disagrees with estimator params")
            est.params_ = params
            return est
        if kind == "mlp_checkpoint":
            est = MLPStudent(**data["params"])
            est.initialize()
            tensors = {k: np.asarray(v["data"], dtype=float).reshape(v["shape"]) for k, v in data["tensors"].items()}
            if set(tensors) != set(est.tensors_) or any(tensors[k].shape != est.tensors_[k].shape for k in tensors):
                raise InputError("checkpoint tensors do not match the MLP layout")
            est.tensors_ = tensors
            return est
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed student checkpoint: {exc}") from exc
    raise InputError(f"{path}: not a student checkpoint (kind={kind!r})")
