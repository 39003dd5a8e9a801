"""Attention-pooling MIL head in float64 numpy with hand-written backprop.

Shapes: a bag is ``V`` (k x d).  Instances are standardized, embedded by an
affine + ReLU layer (k x d_e), scored by ``tanh`` attention (k x h -> k x a,
with a = n_classes for per-class branches or 1), softmax-normalized over the
k instances, pooled into an a x d_e bag representation, flattened and fed to
an affine classifier with a softmax on top.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ConfigError, FormatError, InputError

PARAM_ORDER = ("W_emb", "b_emb", "W_att1", "b_att1", "W_att2", "b_att2", "W_cls", "b_cls")
POOLINGS = ("attention", "mean", "max")
LOG_FLOOR = 1e-12
CKPT_FORMAT = "mrmil-ckpt-v1"


@dataclass
class MilModel:
    params: dict[str, np.ndarray]
    feat_mean: np.ndarray
    feat_std: np.ndarray
    n_classes: int
    class_weights: np.ndarray
    pooling: str = "attention"
    embed_dropout: float = 0.0
    attn_dropout: float = 0.0
    class_names: tuple[str, ...] = ()
    schema_id: str = ""
    seed: int = 0

    @property
    def d(self) -> int:
        return self.params["W_emb"].shape[0]

    @property
    def d_e(self) -> int:
        return self.params["W_emb"].shape[1]

    @property
    def h(self) -> int:
        return self.params["W_att1"].shape[1]

    @property
    def n_att(self) -> int:
        return self.params["W_att2"].shape[1]

    def copy(self) -> "MilModel":
        return copy.deepcopy(self)


@dataclass
class AttentionResult:
    alpha: np.ndarray       # k x a, columns sum to 1 (None for mean/max pooling)
    bag_repr: np.ndarray    # a x d_e
    logits: np.ndarray      # n
    probs: np.ndarray       # n
    embeddings: np.ndarray  # k x d_e instance embeddings after ReLU


@dataclass
class Bag:
    slide_id: str
    V: np.ndarray
    label: int
    refs: list = field(default_factory=list)
    instance_labels: np.ndarray | None = None

    def __post_init__(self):
        if self.V.ndim != 2 or self.V.shape[0] < 1:
            raise InputError(f"bag {self.slide_id} must hold at least one instance")


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def init_model(d: int, n_classes: int, d_e: int = 256, h: int = 128, *,
               per_class_attention: bool = True, pooling: str = "attention",
               embed_dropout: float = 0.0, attn_dropout: float = 0.0, seed: int = 0,
               feat_mean=None, feat_std=None, class_weights=None,
               class_names=(), schema_id: str = "") -> MilModel:
    if n_classes < 2:
        raise ConfigError("a classifier needs at least 2 classes")
    if pooling not in POOLINGS:
        raise ConfigError(f"pooling must be one of {POOLINGS}")
    rng = np.random.default_rng(seed)
    a = n_classes if (per_class_attention and pooling == "attention") else 1
    params = {
        "W_emb": glorot(rng, d, d_e), "b_emb": np.zeros(d_e),
        "W_att1": glorot(rng, d_e, h), "b_att1": np.zeros(h),
        "W_att2": glorot(rng, h, a), "b_att2": np.zeros(a),
        "W_cls": glorot(rng, a * d_e, n_classes), "b_cls": np.zeros(n_classes),
    }
    if class_weights is None:
        class_weights = np.ones(n_classes)
    return MilModel(
        params=params,
        feat_mean=np.zeros(d) if feat_mean is None else np.asarray(feat_mean, dtype=np.float64),
        feat_std=np.ones(d) if feat_std is None else np.asarray(feat_std, dtype=np.float64),
        n_classes=n_classes,
        class_weights=np.asarray(class_weights, dtype=np.float64),
        pooling=pooling, embed_dropout=embed_dropout, attn_dropout=attn_dropout,
        class_names=tuple(class_names), schema_id=schema_id, seed=seed,
    )


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _dropout_mask(rng, shape, p):
    if p <= 0.0:
        return None
    if rng is None:
        raise InputError("train mode with dropout needs an rng")
    return (rng.random(shape) >= p) / (1.0 - p)


def _forward(model: MilModel, V: np.ndarray, train: bool, rng):
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2 or V.shape[0] < 1:
        raise InputError("forward needs a non-empty k x d instance matrix")
    if V.shape[1] != model.d:
        raise InputError(f"instance dimension {V.shape[1]} does not match model d={model.d}")
    if not np.all(np.isfinite(V)):
        raise InputError("instance matrix contains NaN or inf")
    p = model.params
    k = V.shape[0]
    X = (V - model.feat_mean) / model.feat_std
    Z = X @ p["W_emb"] + p["b_emb"]
    E = np.maximum(Z, 0.0)
    m_e = _dropout_mask(rng, E.shape, model.embed_dropout) if train else None
    Ed = E * m_e if m_e is not None else E
    cache = {"X": X, "Z": Z, "Ed": Ed, "m_e": m_e}
    if model.pooling == "attention":
        H = np.tanh(Ed @ p["W_att1"] + p["b_att1"])
        m_h = _dropout_mask(rng, H.shape, model.attn_dropout) if train else None
        Hd = H * m_h if m_h is not None else H
        S = Hd @ p["W_att2"] + p["b_att2"]
        alpha = softmax(S, axis=0)
        R = alpha.T @ Ed
        cache.update(H=H, m_h=m_h, Hd=Hd, alpha=alpha)
    elif model.pooling == "mean":
        alpha = None
        R = Ed.mean(axis=0, keepdims=True)
    else:
        alpha = None
        idx = Ed.argmax(axis=0)
        R = Ed[idx, np.arange(Ed.shape[1])][None, :]
        cache["argmax"] = idx
    r = R.reshape(-1)
    logits = r @ p["W_cls"] + p["b_cls"]
    probs = softmax(logits)
    cache.update(r=r, k=k)
    return AttentionResult(alpha, R, logits, probs, E), cache


def forward(model: MilModel, V: np.ndarray, mode: str = "eval", rng=None) -> AttentionResult:
    if mode not in ("train", "eval"):
        raise InputError(f"mode must be 'train' or 'eval', got {mode!r}")
    return _forward(model, V, mode == "train", rng)[0]


def loss(result: AttentionResult, label: int, class_weights, flags: list | None = None) -> float:
    """Class-weighted negative log-likelihood of ``label``."""
    pr = float(result.probs[label])
    if pr < LOG_FLOOR:
        pr = LOG_FLOOR
        if flags is not None:
            flags.append("prob_clamped")
    return -float(class_weights[label]) * float(np.log(pr))


def _backward(model: MilModel, res: AttentionResult, cache: dict, label: int) -> dict:
    p = model.params
    g = {}
    w = model.class_weights[label]
    if res.probs[label] < LOG_FLOOR:
        w = 0.0  # clamped loss is locally constant
    dlogits = w * res.probs.copy()
    dlogits[label] -= w
    r = cache["r"]
    g["W_cls"] = np.outer(r, dlogits)
    g["b_cls"] = dlogits
    dR = (p["W_cls"] @ dlogits).reshape(res.bag_repr.shape)
    Ed = cache["Ed"]
    if model.pooling == "attention":
        alpha, Hd, H = cache["alpha"], cache["Hd"], cache["H"]
        dalpha = Ed @ dR.T
        dS = alpha * (dalpha - np.sum(alpha * dalpha, axis=0, keepdims=True))
        g["W_att2"] = Hd.T @ dS
        g["b_att2"] = dS.sum(axis=0)
        dH = dS @ p["W_att2"].T
        if cache["m_h"] is not None:
            dH = dH * cache["m_h"]
        dpre = dH * (1.0 - H * H)
        g["W_att1"] = Ed.T @ dpre
        g["b_att1"] = dpre.sum(axis=0)
        dEd = alpha @ dR + dpre @ p["W_att1"].T
    else:
        for name in ("W_att1", "b_att1", "W_att2", "b_att2"):
            g[name] = np.zeros_like(p[name])
        if model.pooling == "mean":
            dEd = np.repeat(dR / cache["k"], cache["k"], axis=0)
        else:
            dEd = np.zeros_like(Ed)
            dEd[cache["argmax"], np.arange(Ed.shape[1])] = dR[0]
    if cache["m_e"] is not None:
        dEd = dEd * cache["m_e"]
    dZ = dEd * (cache["Z"] > 0)
    g["W_emb"] = cache["X"].T @ dZ
    g["b_emb"] = dZ.sum(axis=0)
    return g


def loss_and_grad(model: MilModel, V: np.ndarray, label: int, mode: str = "eval", rng=None):
    res, cache = _forward(model, V, mode == "train", rng)
    return loss(res, label, model.class_weights), _backward(model, res, cache, label), res


def backward(model: MilModel, V: np.ndarray, label: int, mode: str = "eval", rng=None) -> dict:
    """Analytic gradients of the weighted loss w.r.t. every entry of ``model.params``."""
    return loss_and_grad(model, V, label, mode, rng)[1]


def aggregate_baseline(V: np.ndarray, method: str, model: MilModel) -> np.ndarray:
    """Logits from mean/max pooling of the instance embeddings."""
    if method not in ("mean", "max"):
        raise ConfigError(f"baseline method must be mean or max, got {method!r}")
    if model.pooling != method:
        model = copy.copy(model)
        model.pooling = method
    if model.params["W_cls"].shape[0] != model.d_e:
        raise ConfigError("baseline pooling needs a classifier over d_e inputs")
    return _forward(model, V, False, None)[0].logits


def instance_dropout(V: np.ndarray, p: float, replacement: np.ndarray, rng) -> np.ndarray:
    """Replace each row independently with ``replacement`` with probability ``p``."""
    if not 0.0 <= p < 1.0:
        raise ConfigError("instance dropout probability must lie in [0, 1)")
    if p == 0.0:
        return V
    drop = rng.random(V.shape[0]) < p
    if not drop.any():
        return V
    out = np.array(V, dtype=np.float64, copy=True)
    out[drop] = replacement
    return out


def class_weights_from_labels(labels, n_classes: int) -> np.ndarray:
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes).astype(np.float64)
    if np.count_nonzero(counts) < 2:
        raise ConfigError("training labels must contain at least 2 classes")
    if np.any(counts == 0):
        missing = [int(c) for c in np.flatnonzero(counts == 0)]
        raise ConfigError(f"classes {missing} have no training bags")
    w = counts.sum() / counts
    return w / w.mean()


# -- training -----------------------------------------------------------------

@dataclass
class TrainConfig:
    lr_head: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 100
    plateau_patience: int = 10
    plateau_factor: float = 0.1
    instance_dropout_p: float = 0.5
    embed_dim: int = 256
    hidden_dim: int = 128
    embed_dropout: float = 0.25
    attn_dropout: float = 0.25
    per_class_attention: bool = True
    pooling: str = "attention"
    seed: int = 0

    def validate(self) -> None:
        if self.lr_head <= 0:
            raise ConfigError("learning rate must be > 0")
        if not 0.0 <= self.instance_dropout_p < 1.0:
            raise ConfigError("instance_dropout_p must lie in [0, 1)")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"pooling must be one of {POOLINGS}")


class PlateauScheduler:
    """Multiply the lr by ``factor`` once the monitored loss has failed to
    improve for ``patience`` consecutive epochs."""

    def __init__(self, lr: float, patience: int = 10, factor: float = 0.1, rel_threshold: float = 1e-4):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.rel_threshold = rel_threshold
        self.best = np.inf
        self.bad_epochs = 0

    def step(self, value: float) -> float:
        improved = not np.isfinite(self.best) or value < self.best - self.rel_threshold * abs(self.best)
        if improved:
            self.best = value
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


class Adam:
    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainLogRow:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainResult:
    model: MilModel
    log: list[TrainLogRow]
    best_epoch: int


def feature_standardizer(bags) -> tuple[np.ndarray, np.ndarray]:
    allv = np.concatenate([np.asarray(b.V, dtype=np.float64) for b in bags])
    mean = allv.mean(axis=0)
    std = allv.std(axis=0)
    return mean, np.where(std > 1e-8, std, 1.0)


def mean_loss(model: MilModel, bags) -> float:
    if not bags:
        return float("nan")
    return float(np.mean([loss(forward(model, b.V), b.label, model.class_weights) for b in bags]))


def train(bags: list[Bag], config: TrainConfig, n_classes: int, replacement: np.ndarray | None = None,
          val_bags: list[Bag] | None = None, class_names=(), schema_id: str = "") -> TrainResult:
    """Adam, one bag per step, reshuffled each epoch; keeps the best-validation checkpoint."""
    config.validate()
    if not bags:
        raise ConfigError("no training bags")
    labels = [b.label for b in bags]
    if any(not 0 <= y < n_classes for y in labels):
        raise ConfigError(f"bag labels must lie in [0, {n_classes})")
    weights = class_weights_from_labels(labels, n_classes)
    mean, std = feature_standardizer(bags)
    model = init_model(
        bags[0].V.shape[1], n_classes, config.embed_dim, config.hidden_dim,
        per_class_attention=config.per_class_attention, pooling=config.pooling,
        embed_dropout=config.embed_dropout, attn_dropout=config.attn_dropout, seed=config.seed,
        feat_mean=mean, feat_std=std, class_weights=weights,
        class_names=class_names, schema_id=schema_id)
    if replacement is None:
        replacement = mean
    replacement = np.asarray(replacement, dtype=np.float64)
    rng = np.random.default_rng([config.seed, 1])
    opt = Adam(model.params, config.lr_head, config.beta1, config.beta2, config.eps)
    sched = PlateauScheduler(config.lr_head, config.plateau_patience, config.plateau_factor)
    val_bags = val_bags or []
    best_model, best_val, best_epoch = model.copy(), np.inf, 0
    log = []
    for epoch in range(1, config.epochs + 1):
        losses = []
        for i in rng.permutation(len(bags)):
            b = bags[i]
            V = instance_dropout(b.V, config.instance_dropout_p, replacement, rng)
            val, grads, _ = loss_and_grad(model, V, b.label, "train", rng)
            opt.step(model.params, grads)
            losses.append(val)
        train_loss = float(np.mean(losses))
        monitor = mean_loss(model, val_bags) if val_bags else mean_loss(model, bags)
        log.append(TrainLogRow(epoch, train_loss, monitor, opt.lr))
        if monitor < best_val:
            best_val, best_model, best_epoch = monitor, model.copy(), epoch
        opt.lr = sched.step(monitor)
    return TrainResult(best_model, log, best_epoch)


def log_to_csv(log: list[TrainLogRow]) -> str:
    lines = ["epoch,train_loss,val_loss,lr"]
    lines += [f"{r.epoch},{r.train_loss:.10g},{r.val_loss:.10g},{r.lr:.10g}" for r in log]
    return "\n".join(lines) + "\n"


def predict(model: MilModel, bags) -> np.ndarray:
    return np.stack([forward(model, b.V).probs for b in bags]) if bags else np.zeros((0, model.n_classes))


# -- gradient check -------------------------------------------------------------

@dataclass
class GradcheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    passed: bool
    dims: dict
    seed: int
    tolerance: float


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """max_i |a_i - n_i| / max(|a_i| + |n_i|, floor); the floor keeps entries
    whose true gradient is ~0 from turning round-off into relative error."""
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)))


def numeric_grad(model: MilModel, V, label, mode="eval", rng_seed=0, step: float = 1e-5) -> dict:
    def f():
        rng = np.random.default_rng(rng_seed) if mode == "train" else None
        res = _forward(model, V, mode == "train", rng)[0]
        return loss(res, label, model.class_weights)

    out = {}
    for name in PARAM_ORDER:
        arr = model.params[name]
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + step
            fp = f()
            arr[idx] = orig - step
            fm = f()
            arr[idx] = orig
            g[idx] = (fp - fm) / (2.0 * step)
        out[name] = g
    return out


DEFAULT_GRADCHECK_DIMS = {"k": 6, "d": 8, "d_e": 12, "h": 6, "n": 3}


def random_problem(dims: dict, seed: int, pooling: str = "attention", per_class_attention: bool = True,
                   dropout: float = 0.0):
    """A random model (non-zero biases, random weights) plus a random bag."""
    rng = np.random.default_rng([seed, 99])
    d, n = dims["d"], dims["n"]
    model = init_model(d, n, dims["d_e"], dims["h"], per_class_attention=per_class_attention,
                       pooling=pooling, embed_dropout=dropout, attn_dropout=dropout, seed=seed,
                       feat_mean=rng.normal(size=d), feat_std=rng.uniform(0.5, 2.0, size=d),
                       class_weights=rng.uniform(0.5, 2.0, size=n))
    for name in PARAM_ORDER:
        model.params[name] = model.params[name] + 0.1 * rng.normal(size=model.params[name].shape)
    V = model.feat_mean + model.feat_std * rng.normal(size=(dims["k"], d))
    label = int(rng.integers(n))
    return model, V, label


def gradcheck(dims: dict | None = None, seed: int = 0, tolerance: float = 1e-5, *,
              pooling: str = "attention", per_class_attention: bool = True, mode: str = "eval",
              grad_fn=None) -> GradcheckReport:
    """Central finite differences against the analytic gradients.

    ``grad_fn(model, V, label)`` overrides the analytic path (negative controls).
    """
    dims = dict(DEFAULT_GRADCHECK_DIMS if dims is None else dims)
    if dims["n"] < 2:
        raise ConfigError("gradcheck needs n >= 2 classes: softmax over one class is constant")
    dropout = 0.3 if mode == "train" else 0.0
    model, V, label = random_problem(dims, seed, pooling, per_class_attention, dropout)
    if grad_fn is None:
        analytic = backward(model, V, label, mode, np.random.default_rng(seed) if mode == "train" else None)
    else:
        analytic = grad_fn(model, V, label)
    numeric = numeric_grad(model, V, label, mode, rng_seed=seed)
    per = {name: relative_error(analytic[name], numeric[name]) for name in PARAM_ORDER}
    worst = max(per.values())
    return GradcheckReport(worst, per, worst < tolerance, dims, seed, tolerance)


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(model: MilModel, path: str | Path) -> None:
    header = {
        "format": CKPT_FORMAT,
        "dims": {"d": model.d, "d_e": model.d_e, "h": model.h, "n": model.n_classes, "n_att": model.n_att},
        "schema_id": model.schema_id,
        "class_names": list(model.class_names),
        "seed": model.seed,
        "pooling": model.pooling,
        "embed_dropout": model.embed_dropout,
        "attn_dropout": model.attn_dropout,
        "class_weights": [float(w) for w in model.class_weights],
        "payload_order": ["feat_mean", "feat_std", *PARAM_ORDER],
    }
    parts = [model.feat_mean, model.feat_std] + [model.params[n] for n in PARAM_ORDER]
    payload = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in parts)
    Path(path).write_bytes((json.dumps(header, sort_keys=True) + "\n").encode("utf-8") + payload)


def load_checkpoint(path: str | Path) -> MilModel:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError(f"checkpoint {path}: header has no newline terminator")
    try:
        h = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint {path}: malformed header: {exc}") from exc
    if h.get("format") != CKPT_FORMAT:
        raise FormatError(f"checkpoint {path}: unknown format {h.get('format')!r}")
    dm = h["dims"]
    d, de, hh, n, a = dm["d"], dm["d_e"], dm["h"], dm["n"], dm["n_att"]
    cls_in = de if h["pooling"] != "attention" else a * de
    shapes = {"feat_mean": (d,), "feat_std": (d,), "W_emb": (d, de), "b_emb": (de,),
              "W_att1": (de, hh), "b_att1": (hh,), "W_att2": (hh, a), "b_att2": (a,),
              "W_cls": (cls_in, n), "b_cls": (n,)}
    total = sum(int(np.prod(shapes[k])) for k in h["payload_order"])
    payload = data[nl + 1:]
    if len(payload) != 8 * total:
        raise FormatError(f"checkpoint payload at byte {nl + 1}: expected {8 * total} bytes, got {len(payload)}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    arrays, off = {}, 0
    for key in h["payload_order"]:
        size = int(np.prod(shapes[key]))
        arrays[key] = flat[off:off + size].reshape(shapes[key]).copy()
        off += size
    return MilModel(
        params={k: arrays[k] for k in PARAM_ORDER},
        feat_mean=arrays["feat_mean"], feat_std=arrays["feat_std"], n_classes=n,
        class_weights=np.asarray(h["class_weights"]), pooling=h["pooling"],
        embed_dropout=h["embed_dropout"], attn_dropout=h["attn_dropout"],
        class_names=tuple(h["class_names"]), schema_id=h["schema_id"], seed=h["seed"])


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
