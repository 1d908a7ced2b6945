"""Dense policy/value networks, the Gaussian head, and Adam — as plain array math.

Everything is float64 numpy so analytic gradients can be checked against
central differences tightly.  Parameters live in per-layer arrays; the
optimizer and checkpoints see them through pack/unpack as one flat vector.
"""
from __future__ import annotations

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_LOG_2PI = np.log(2.0 * np.pi)


def orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((rows, cols))
    u, _, vt = np.linalg.svd(a, full_matrices=False)
    q = u if u.shape == (rows, cols) else vt
    return gain * q


class MLP:
    """Plain tanh MLP; final layer linear.  Forward caches for backward."""

    def __init__(self, sizes, rng: np.random.Generator, out_gain: float = 0.01):
        self.sizes = tuple(int(s) for s in sizes)
        self.weights = []
        self.biases = []
        last = len(self.sizes) - 2
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            gain = out_gain if i == last else np.sqrt(2.0)
            self.weights.append(orthogonal(rng, n_in, n_out, gain))
            self.biases.append(np.zeros(n_out))
        self._cache = None

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def forward(self, x: np.ndarray) -> np.ndarray:
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i != last:
                h = np.tanh(h)
            acts.append(h)
        self._cache = acts
        return h

    def backward(self, dout: np.ndarray):
        """Gradients of a scalar loss given d(loss)/d(output); uses the last
        forward's cache.  Returns ([dW...], [db...])."""
        acts = self._cache
        dws = [None] * len(self.weights)
        dbs = [None] * len(self.biases)
        delta = dout
        for i in range(len(self.weights) - 1, -1, -1):
            dws[i] = acts[i].T @ delta
            dbs[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (1.0 - acts[i] ** 2)
        return dws, dbs

    def pack(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases)
                               for a in pair])

    def unpack(self, flat: np.ndarray) -> None:
        k = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = flat[k:k + w.size].reshape(w.shape).copy()
            k += w.size
            self.biases[i] = flat[k:k + b.size].copy()
            k += b.size
        assert k == flat.size


class GaussianPolicy:
    """Diagonal Gaussian over joint deltas: MLP mean + state-independent log-std."""

    def __init__(self, obs_dim: int, act_dim: int, hidden, rng: np.random.Generator,
                 log_std_init: float = -1.0):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.trunk = MLP((obs_dim, *hidden, act_dim), rng, out_gain=0.01)
        self.log_std = np.full(act_dim, float(log_std_init))

    @property
    def n_params(self) -> int:
        return self.trunk.n_params + self.log_std.size

    def clamped_log_std(self) -> np.ndarray:
        return np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)

    def mean(self, obs: np.ndarray) -> np.ndarray:
        return self.trunk.forward(obs)

    def sample(self, obs: np.ndarray, rng: np.random.Generator):
        """Returns (actions, log-probs); obs is (N, obs_dim)."""
        mu = self.mean(obs)
        std = np.exp(self.clamped_log_std())
        actions = mu + std * rng.standard_normal(mu.shape)
        return actions, self.log_prob_given_mean(mu, actions)

    def log_prob_given_mean(self, mu: np.ndarray, actions: np.ndarray) -> np.ndarray:
        ls = self.clamped_log_std()
        z = (actions - mu) / np.exp(ls)
        return -0.5 * (z ** 2 + _LOG_2PI).sum(axis=-1) - ls.sum()

    def log_prob(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return self.log_prob_given_mean(self.mean(obs), actions)

    def entropy(self) -> float:
        ls = self.clamped_log_std()
        return float(ls.sum() + 0.5 * self.act_dim * (1.0 + _LOG_2PI))

    def pack(self) -> np.ndarray:
        return np.concatenate([self.trunk.pack(), self.log_std])

    def unpack(self, flat: np.ndarray) -> None:
        n = self.trunk.n_params
        self.trunk.unpack(flat[:n])
        self.log_std = flat[n:].copy()
        assert self.log_std.size == self.act_dim


class ValueNet:
    def __init__(self, obs_dim: int, hidden, rng: np.random.Generator):
        self.trunk = MLP((obs_dim, *hidden, 1), rng, out_gain=1.0)

    @property
    def n_params(self) -> int:
        return self.trunk.n_params

    def forward(self, obs: np.ndarray) -> np.ndarray:
        return self.trunk.forward(obs)[:, 0]

    def pack(self) -> np.ndarray:
        return self.trunk.pack()

    def unpack(self, flat: np.ndarray) -> None:
        self.trunk.unpack(flat)


class RunningNorm:
    """Streaming mean/variance (Welford, batch form) for observation scaling."""

    def __init__(self, dim: int, eps: float = 1e-8):
        self.count = 0.0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)
        self.eps = eps

    def update(self, batch: np.ndarray) -> None:
        batch = batch.reshape(-1, self.mean.size)
        n = batch.shape[0]
        if n == 0:
            return
        b_mean = batch.mean(axis=0)
        b_m2 = ((batch - b_mean) ** 2).sum(axis=0)
        delta = b_mean - self.mean
        tot = self.count + n
        self.mean = self.mean + delta * (n / tot)
        self.m2 = self.m2 + b_m2 + delta ** 2 * (self.count * n / tot)
        self.count = tot

    def var(self) -> np.ndarray:
        if self.count < 2:
            return np.ones_like(self.m2)
        return self.m2 / self.count

    def normalize(self, obs: np.ndarray) -> np.ndarray:
        if self.count < 2:
            return obs
        return (obs - self.mean) / np.sqrt(self.var() + self.eps)

    def state(self) -> dict:
        return {"count": self.count, "mean": self.mean.tolist(),
                "m2": self.m2.tolist()}

    @classmethod
    def from_state(cls, d: dict) -> "RunningNorm":
        rn = cls(len(d["mean"]))
        rn.count = float(d["count"])
        rn.mean = np.asarray(d["mean"], dtype=np.float64)
        rn.m2 = np.asarray(d["m2"], dtype=np.float64)
        return rn


class Adam:
    """First-order adaptive-moment optimizer over one flat parameter vector."""

    def __init__(self, n_params: int, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad ** 2
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def global_norm(grad: np.ndarray) -> float:
    return float(np.sqrt(np.sum(grad ** 2)))


def clip_global_norm(grad: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    norm = global_norm(grad)
    if norm > max_norm and norm > 0.0:
        return grad * (max_norm / norm), norm
    return grad, norm
