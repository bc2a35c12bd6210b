"""A small conditional velocity MLP trained with the flow-matching objective.

Forward and backward passes are written out by hand in numpy so the
gradient can be checked against finite differences layer by layer.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .gmm import GaussianMixture, sample_with

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
N_FREQUENCIES = 4


class TrainingError(RuntimeError):
    pass


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def silu(a):
    return a * _sigmoid(a)


def silu_grad(a):
    s = _sigmoid(a)
    return s * (1.0 + a * (1.0 - s))


def time_features(t):
    """Raw time plus sin/cos of ``pi * k * t`` for k = 1..4; shape (n, 9)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    k = np.arange(1, N_FREQUENCIES + 1, dtype=np.float64)[None, :]
    return np.concatenate([t, np.sin(np.pi * k * t), np.cos(np.pi * k * t)], axis=1)


class VelocityNet:
    """MLP ``(z, t, condition) -> velocity`` with SiLU hidden layers.

    Coordinates are multiplied by ``coord_scale`` on the way in and the
    output by ``out_scale`` on the way out; both are fixed constants of the
    architecture, not trained.
    """

    def __init__(self, dim, conditions, hidden=(64, 64, 64), coord_scale=1.0,
                 out_scale=1.0, seed=0):
        self.dim = int(dim)
        self.conditions = tuple(conditions)
        if len(set(self.conditions)) != len(self.conditions) or not self.conditions:
            raise ValueError("conditions must be unique and nonempty")
        self.hidden = tuple(int(h) for h in hidden)
        self.coord_scale = float(coord_scale)
        self.out_scale = float(out_scale)
        sizes = [self.in_dim, *self.hidden, self.dim]
        self.params = []
        for j, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if j == len(sizes) - 2:
                w = np.zeros((fan_in, fan_out))
                b = np.zeros(fan_out)
            else:
                bound = 1.0 / np.sqrt(fan_in)
                u = rng.uniforms(seed, f"init/{j}", np.arange(fan_in), width=fan_out + 1)[0]
                w = bound * (2.0 * u[:, :fan_out] - 1.0)
                ub = rng.uniforms(seed, f"init/{j}/bias", np.arange(fan_out))[0, :, 0]
                b = bound * (2.0 * ub - 1.0)
            self.params.extend([w, b])

    @property
    def in_dim(self) -> int:
        return self.dim + 1 + 2 * N_FREQUENCIES + len(self.conditions)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def condition_index(self, condition) -> np.ndarray:
        if isinstance(condition, str):
            try:
                return np.array([self.conditions.index(condition)])
            except ValueError:
                from .field import ConfigurationError

                raise ConfigurationError(f"condition {condition!r} is not known to the network") from None
        return np.asarray(condition, dtype=np.int64)

    def features(self, z, t, condition):
        z = np.asarray(z, dtype=np.float64)
        n = z.shape[0]
        tf = time_features(np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)))
        idx = np.broadcast_to(self.condition_index(condition), (n,))
        onehot = np.zeros((n, len(self.conditions)))
        onehot[np.arange(n), idx] = 1.0
        return np.concatenate([z * self.coord_scale, tf, onehot], axis=1)

    def _run(self, feats):
        pre = []
        acts = [feats]
        h = feats
        n_layers = len(self.params) // 2
        for j in range(n_layers - 1):
            a = h @ self.params[2 * j] + self.params[2 * j + 1]
            pre.append(a)
            h = silu(a)
            acts.append(h)
        out = (h @ self.params[-2] + self.params[-1]) * self.out_scale
        return out, pre, acts

    def forward(self, z, t, condition):
        """Velocity for a batch ``z`` of shape (n, d) at time ``t``."""
        out, _, _ = self._run(self.features(z, t, condition))
        return out

    def loss_and_grad(self, feats, target):
        """Mean squared-norm error and its exact gradient (flat vector)."""
        out, pre, acts = self._run(feats)
        n = feats.shape[0]
        resid = out - target
        loss = float(np.sum(resid**2) / n)
        g = (2.0 / n) * resid * self.out_scale
        grads = [None] * len(self.params)
        grads[-2] = acts[-1].T @ g
        grads[-1] = g.sum(axis=0)
        g = g @ self.params[-2].T
        for j in range(len(pre) - 1, -1, -1):
            g = g * silu_grad(pre[j])
            grads[2 * j] = acts[j].T @ g
            grads[2 * j + 1] = g.sum(axis=0)
            if j:
                g = g @ self.params[2 * j].T
        return loss, np.concatenate([x.ravel() for x in grads])

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ValueError("parameter vector has the wrong length")
        pos = 0
        for j, p in enumerate(self.params):
            self.params[j] = flat[pos:pos + p.size].reshape(p.shape).copy()
            pos += p.size

    def copy(self) -> "VelocityNet":
        other = VelocityNet.__new__(VelocityNet)
        other.__dict__.update(self.__dict__)
        other.params = [p.copy() for p in self.params]
        return other

    def manifest(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "dim": self.dim,
            "conditions": list(self.conditions),
            "hidden": list(self.hidden),
            "coord_scale": self.coord_scale,
            "out_scale": self.out_scale,
            "shapes": [list(p.shape) for p in self.params],
        }

    def save(self, path):
        """Write an ``.npz`` checkpoint with a JSON shape manifest."""
        path = Path(path)
        arrays = {f"p{j}": p for j, p in enumerate(self.params)}
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            np.savez(fh, manifest=np.array(json.dumps(self.manifest())), **arrays)
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "VelocityNet":
        with np.load(path, allow_pickle=False) as data:
            man = json.loads(str(data["manifest"]))
            if man.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {man.get('version')}")
            net = cls(man["dim"], man["conditions"], man["hidden"], man["coord_scale"],
                      man["out_scale"])
            params = [data[f"p{j}"] for j in range(len(man["shapes"]))]
        expected = [list(p.shape) for p in net.params]
        if [list(p.shape) for p in params] != expected or man["shapes"] != expected:
            raise ValueError("checkpoint shapes do not match the manifest")
        net.params = [np.array(p, dtype=np.float64) for p in params]
        return net


def net_for(mixtures: dict, hidden=(64, 64, 64), seed=0) -> VelocityNet:
    """Network sized and scaled for the given condition -> mixture map."""
    gmms = list(mixtures.values())
    dim = gmms[0].dim
    second = max(
        float(np.sum(g.weights * (np.sum(g.means**2, axis=1) + np.trace(g.covs, axis1=1, axis2=2))))
        for g in gmms
    ) / dim
    scale = float(np.sqrt(second + 1.0))
    return VelocityNet(dim, list(mixtures), hidden, coord_scale=1.0 / scale,
                       out_scale=scale, seed=seed)


def flow_matching_batch(mixtures: dict, batch_size: int, seed: int, step: int = 0):
    """Draw ``(z, t, condition_index, target)`` for one flow-matching batch.

    ``z = (1 - t) x0 + t x1`` with ``x0`` from the condition's mixture,
    ``x1 ~ N(0, I)``, ``t ~ U(0, 1]`` and target ``x1 - x0``.
    """
    labels = list(mixtures)
    gmms = [mixtures[c] for c in labels]
    dim = gmms[0].dim
    rows = np.arange(batch_size)
    u = rng.uniforms(seed, "fm/uniform", rows, step, width=3)[0]
    cond = np.minimum((u[:, 0] * len(labels)).astype(np.int64), len(labels) - 1)
    t = u[:, 1]
    eps = rng.normals(seed, "fm/x0", rows, step, dim=dim)[0]
    x1 = rng.normals(seed, "fm/x1", rows, step, dim=dim)[0]
    x0 = np.empty((batch_size, dim))
    for j, g in enumerate(gmms):
        sel = cond == j
        if np.any(sel):
            x0[sel] = sample_with(g, u[sel, 2], eps[sel])
    z = (1.0 - t)[:, None] * x0 + t[:, None] * x1
    return z, t, cond, x1 - x0


def flow_matching_loss(net: VelocityNet, mixtures: dict, batch_size: int, seed: int, step: int = 0):
    """Loss ``mean ||net(z, t, c) - (x1 - x0)||^2`` and its gradient."""
    if list(mixtures) != list(net.conditions):
        raise ValueError("network conditions and training mixtures do not match")
    z, t, cond, target = flow_matching_batch(mixtures, batch_size, seed, step)
    loss, grad = net.loss_and_grad(net.features(z, t, cond), target)
    if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        raise TrainingError(f"non-finite loss or gradient at step {step}")
    return loss, grad


@dataclass
class TrainConfig:
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iterations: int = 20000
    seed: int = 0
    log_every: int = 100
    lr_schedule: str = "cosine"
    final_lr_fraction: float = 0.01
    eval_batch_size: int = 4096
    divergence_factor: float = 10.0
    divergence_patience: int = 500

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be at least 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")

    def lr_at(self, it: int) -> float:
        if self.lr_schedule == "constant":
            return self.learning_rate
        frac = (it - 1) / max(1, self.iterations - 1)
        low = self.final_lr_fraction
        return self.learning_rate * (low + (1.0 - low) * 0.5 * (1.0 + np.cos(np.pi * frac)))

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    net: VelocityNet
    loss_curve: list = field(default_factory=list)
    eval_curve: list = field(default_factory=list)
    initial_loss: float = float("nan")
    loss_stderr: list = field(default_factory=list)

    def significant_increases(self, z: float = 3.0) -> list:
        """Window indices where the mean loss rose by more than ``z`` combined standard errors."""
        out = []
        for j in range(1, len(self.loss_curve)):
            rise = self.loss_curve[j] - self.loss_curve[j - 1]
            se = float(np.hypot(self.loss_stderr[j], self.loss_stderr[j - 1]))
            if rise > z * se:
                out.append(j)
        return out


def train(net: VelocityNet, config: TrainConfig, mixtures: dict) -> TrainResult:
    """Adam on the flow-matching loss.

    Every ``log_every`` iterations the mean training loss of the window is
    appended to ``loss_curve`` and the loss on one fixed held-out batch to
    ``eval_curve``; the window's standard error goes to ``loss_stderr``.
    """
    net = net.copy()
    eval_z, eval_t, eval_c, eval_target = flow_matching_batch(
        mixtures, config.eval_batch_size, config.seed + 1, 0)
    eval_feats = net.features(eval_z, eval_t, eval_c)
    evals = []
    theta = net.get_flat()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    curve = []
    stderr = []
    window = []
    initial = None
    above = 0
    for it in range(1, config.iterations + 1):
        loss, grad = flow_matching_loss(net, mixtures, config.batch_size, config.seed, it)
        if initial is None:
            initial = loss
        above = above + 1 if loss > config.divergence_factor * initial else 0
        if above >= config.divergence_patience:
            raise TrainingError(f"training diverged at iteration {it} (loss {loss:.4g})")
        m = config.beta1 * m + (1.0 - config.beta1) * grad
        v = config.beta2 * v + (1.0 - config.beta2) * grad**2
        m_hat = m / (1.0 - config.beta1**it)
        v_hat = v / (1.0 - config.beta2**it)
        theta = theta - config.lr_at(it) * m_hat / (np.sqrt(v_hat) + config.eps)
        net.set_flat(theta)
        window.append(loss)
        if it % config.log_every == 0:
            curve.append(float(np.mean(window)))
            stderr.append(float(np.std(window, ddof=1) / np.sqrt(len(window))) if len(window) > 1 else 0.0)
            window = []
            evals.append(net.loss_and_grad(eval_feats, eval_target)[0])
            if it % (config.log_every * 20) == 0:
                log.info("iter %d loss %.4f", it, curve[-1])
    return TrainResult(net, curve, evals, float(initial), stderr)
