"""CaLoNet assembly: encoder -> GIN over the causal graph -> MLP head."""

from __future__ import annotations

import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .causal import CausalConfig, CausalMatrix, build_matrices
from .dataset import Dataset, NormalizationStats, TimeSeriesSample, batches
from .encoder import EncoderConfig, encode, init_encoder
from .gnn import GinConfig, aggregation_matrix, gin_stack, init_gin, readout
from .tensor import Adam, Tape, Tensor

log = logging.getLogger(__name__)

MODEL_FORMAT = "calonet-model"
MODEL_VERSION = 1


class CorruptModelError(ValueError):
    pass


class ModelVersionError(ValueError):
    def __init__(self, found, expected):
        self.found = found
        self.expected = expected
        super().__init__(f"model file version {found} is not supported (expected {expected})")


@dataclass
class ModelConfig:
    n_dims: int
    length: int
    n_classes: int
    class_names: list[str] = field(default_factory=list)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    gin: GinConfig = field(default_factory=GinConfig)
    causal: CausalConfig = field(default_factory=CausalConfig)

    def __post_init__(self):
        self.encoder = self.encoder.resolved(self.n_dims)
        self.gin.validate()
        if self.gin.node_dim != self.encoder.node_dim:
            raise ValueError(
                f"GIN node_dim {self.gin.node_dim} differs from encoder node_dim {self.encoder.node_dim}"
            )
        if not self.class_names:
            self.class_names = [str(i) for i in range(self.n_classes)]

    def to_dict(self) -> dict:
        return {
            "n_dims": self.n_dims,
            "length": self.length,
            "n_classes": self.n_classes,
            "class_names": list(self.class_names),
            "encoder": self.encoder.to_dict(),
            "gin": self.gin.to_dict(),
            "causal": self.causal.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            n_dims=int(d["n_dims"]),
            length=int(d["length"]),
            n_classes=int(d["n_classes"]),
            class_names=list(d.get("class_names", [])),
            encoder=EncoderConfig(**d.get("encoder", {})),
            gin=GinConfig(**d.get("gin", {})),
            causal=CausalConfig(**d.get("causal", {})),
        )


@dataclass
class CaLoNetModel:
    config: ModelConfig
    params: dict[str, Tensor]
    normalization: NormalizationStats | None = None
    shared_matrix: CausalMatrix | None = None  # set when causal.scope == "dataset-mean"

    def adjacency(self, matrices) -> np.ndarray:
        g = self.config.gin
        return np.stack([aggregation_matrix(m, g.direction, g.weighted) for m in matrices])

    def matrices_for(self, samples) -> list[CausalMatrix]:
        if self.shared_matrix is not None:
            return [self.shared_matrix] * len(samples)
        return build_matrices(samples, self.config.causal)


def init_model(config: ModelConfig, seed: int = 0) -> CaLoNetModel:
    rng = np.random.default_rng(seed)
    params = init_encoder(config.encoder, config.n_dims, rng)
    params.update(init_gin(config.gin, rng))
    d = config.encoder.node_dim
    params["head.w1"] = T.uniform_init(rng, (d, d), d)
    params["head.b1"] = T.uniform_init(rng, (d,), d)
    params["head.w2"] = T.uniform_init(rng, (d, config.n_classes), d)
    params["head.b2"] = T.uniform_init(rng, (config.n_classes,), d)
    return CaLoNetModel(config, params)


def forward_batch(model: CaLoNetModel, x, adjacency: np.ndarray) -> Tensor:
    """Logits (N, M) for samples x (N, D, L) and aggregation matrices (N, D, D)."""
    cfg, p = model.config, model.params
    x = T.as_tensor(x)
    if x.ndim != 3 or x.shape[1] != cfg.n_dims:
        raise T.ShapeError(f"forward: expected (N, {cfg.n_dims}, L) input, got {x.shape}")
    H = encode(x, p, cfg.encoder, cfg.n_dims)
    H = gin_stack(H, adjacency, p, cfg.gin)
    g = readout(H)
    h = T.relu(g @ p["head.w1"] + p["head.b1"])
    return h @ p["head.w2"] + p["head.b2"]


def forward(model: CaLoNetModel, sample, matrix: CausalMatrix) -> Tensor:
    """Logits (M,) for one sample and its causal matrix."""
    values = getattr(sample, "values", sample)
    x = values.reshape(1, *values.shape) if isinstance(values, np.ndarray) else T.reshape(values, (1, *values.shape))
    if matrix.n != model.config.n_dims:
        raise T.ShapeError(f"forward: causal matrix is {matrix.n}x{matrix.n}, model expects {model.config.n_dims}")
    logits = forward_batch(model, x, model.adjacency([matrix]))
    return T.reshape(logits, (model.config.n_classes,))


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood (natural log) of integer ``labels`` under softmax(logits)."""
    logits = T.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    N, M = logits.shape
    if labels.shape != (N,):
        raise ValueError(f"cross_entropy: {labels.shape[0]} labels for {N} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= M):
        raise ValueError(f"cross_entropy: label outside [0, {M})")
    onehot = np.zeros((N, M))
    onehot[np.arange(N), labels] = 1.0
    return T.mul(T.sum_(T.mul(T.log_softmax(logits), onehot)), -1.0 / N)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    causal: CausalConfig = field(default_factory=CausalConfig)

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("causal")
        return d


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    test_loss: list[float] = field(default_factory=list)
    test_acc: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    confusion: np.ndarray | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,train_loss,train_acc,test_loss,test_acc\n")
        for i, row in enumerate(zip(self.train_loss, self.train_acc, self.test_loss, self.test_acc), start=1):
            buf.write(f"{i}," + ",".join(repr(float(v)) for v in row) + "\n")
        return buf.getvalue()


def _predict(model: CaLoNetModel, x: np.ndarray, adjacency: np.ndarray, chunk: int = 64) -> np.ndarray:
    out = [forward_batch(model, x[i : i + chunk], adjacency[i : i + chunk]).data for i in range(0, len(x), chunk)]
    return np.concatenate(out) if out else np.zeros((0, model.config.n_classes))


def _loss_and_acc(logits: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    if len(labels) == 0:
        return float("nan"), float("nan")
    loss = cross_entropy(Tensor(logits), labels).item()
    return loss, float(np.mean(np.argmax(logits, axis=1) == labels))


def confusion_matrix(labels, predictions, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, dtype=np.int64), np.asarray(predictions, dtype=np.int64)), 1)
    return cm


def train(train_set: Dataset, test_set: Dataset | None, cfg: TrainConfig,
          encoder: EncoderConfig | None = None, gin: GinConfig | None = None) -> tuple[CaLoNetModel, TrainReport]:
    """Train on ``train_set`` with Adam; evaluates both splits after every epoch."""
    cfg.validate()
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    if test_set is not None and (test_set.n_dims, test_set.length, test_set.n_classes) != (
        train_set.n_dims, train_set.length, train_set.n_classes
    ):
        raise ValueError("train and test sets differ in dimensions, length or class count")
    encoder = encoder or EncoderConfig()
    gin = gin or GinConfig(node_dim=encoder.node_dim)
    config = ModelConfig(train_set.n_dims, train_set.length, train_set.n_classes,
                         list(train_set.class_names), encoder, gin, cfg.causal)
    model = init_model(config, cfg.seed)

    t0 = time.perf_counter()
    train_mats = build_matrices(train_set.samples, cfg.causal)
    if cfg.causal.scope == "dataset-mean":
        model.shared_matrix = train_mats[0]
    test_mats = model.matrices_for(test_set.samples) if test_set is not None else []
    log.info("causal matrices built in %.2fs", time.perf_counter() - t0)

    x_train, y_train = train_set.stack(), train_set.labels
    a_train = model.adjacency(train_mats)
    if test_set is not None and len(test_set):
        x_test, y_test, a_test = test_set.stack(), test_set.labels, model.adjacency(test_mats)
    else:
        x_test = y_test = a_test = None

    opt = Adam(model.params, lr=cfg.lr)
    report = TrainReport()
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        for idx in batches(len(train_set), cfg.batch_size, seed=cfg.seed * 1_000_003 + epoch):
            opt.zero_grad()
            with Tape():
                loss = cross_entropy(forward_batch(model, x_train[idx], a_train[idx]), y_train[idx])
                loss.backward()
            opt.step()
        tl, ta = _loss_and_acc(_predict(model, x_train, a_train), y_train)
        report.train_loss.append(tl)
        report.train_acc.append(ta)
        if x_test is not None:
            logits = _predict(model, x_test, a_test)
            vl, va = _loss_and_acc(logits, y_test)
            report.confusion = confusion_matrix(y_test, np.argmax(logits, axis=1), config.n_classes)
        else:
            vl = va = float("nan")
        report.test_loss.append(vl)
        report.test_acc.append(va)
        report.seconds.append(time.perf_counter() - start)
        log.info("epoch %d train_loss=%.4f train_acc=%.3f test_loss=%.4f test_acc=%.3f",
                 epoch, tl, ta, vl, va)
    return model, report


def predict(model: CaLoNetModel, dataset: Dataset, matrices=None) -> np.ndarray:
    """Class logits (N, M); argmax ties resolve to the lowest class index."""
    if (dataset.n_dims, dataset.length) != (model.config.n_dims, model.config.length):
        raise T.ShapeError(
            f"dataset is {dataset.n_dims}x{dataset.length}, model expects "
            f"{model.config.n_dims}x{model.config.length}"
        )
    matrices = matrices if matrices is not None else model.matrices_for(dataset.samples)
    return _predict(model, dataset.stack(), model.adjacency(matrices))


def evaluate(model: CaLoNetModel, dataset: Dataset, matrices=None) -> tuple[float, np.ndarray]:
    """Accuracy and confusion matrix (rows: true class, columns: predicted)."""
    if len(dataset) == 0:
        return float("nan"), np.zeros((model.config.n_classes,) * 2, dtype=np.int64)
    pred = np.argmax(predict(model, dataset, matrices), axis=1)
    labels = dataset.labels
    return float(np.mean(pred == labels)), confusion_matrix(labels, pred, model.config.n_classes)


SALIENCY_METHODS = ("gradient", "gradient-x-input")


def saliency(model: CaLoNetModel, sample: TimeSeriesSample | np.ndarray, matrix: CausalMatrix | None = None,
             method: str = "gradient") -> np.ndarray:
    """Per-(dimension, timestep) attribution for the predicted class, min-max scaled to [0, 1] per dimension.

    ``gradient`` uses |d logit_pred / d x|; ``gradient-x-input`` uses |x * d logit_pred / d x|.
    A dimension whose map is constant scales to all zeros.
    """
    if method not in SALIENCY_METHODS:
        raise ValueError(f"unknown saliency method {method!r}")
    values = np.asarray(getattr(sample, "values", sample), dtype=np.float64)
    if matrix is None:
        matrix = model.matrices_for([values])[0]
    x = Tensor(values[None], requires_grad=True)
    with Tape():
        logits = forward_batch(model, x, model.adjacency([matrix]))
        pred = int(np.argmax(logits.data[0]))
        target = T.sum_(T.mul(logits, np.eye(model.config.n_classes)[pred]))
        target.backward()
    g = x.grad[0] * values if method == "gradient-x-input" else x.grad[0]
    g = np.abs(g)
    lo = g.min(axis=1, keepdims=True)
    span = g.max(axis=1, keepdims=True) - lo
    return np.where(span > 0, (g - lo) / np.where(span > 0, span, 1.0), 0.0)


# ---------------------------------------------------------------------------
# persistence


def model_to_dict(model: CaLoNetModel) -> dict:
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "config": model.config.to_dict(),
        "normalization": model.normalization.to_dict() if model.normalization else None,
        "shared_matrix": (
            {"scores": model.shared_matrix.scores.tolist(), "threshold": model.shared_matrix.threshold}
            if model.shared_matrix is not None else None
        ),
        "parameters": T.params_to_list(model.params),
    }
    return doc


def save(model: CaLoNetModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh)
        fh.write("\n")


def model_from_dict(doc: dict) -> CaLoNetModel:
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise CorruptModelError("not a calonet model document")
    if doc.get("version") != MODEL_VERSION:
        raise ModelVersionError(doc.get("version"), MODEL_VERSION)
    try:
        config = ModelConfig.from_dict(doc["config"])
        params = T.params_from_list(doc["parameters"])
        reference = init_model(config, 0).params
        if list(params) != list(reference) or any(params[k].shape != reference[k].shape for k in params):
            raise CorruptModelError("parameter list does not match the model config")
        norm = NormalizationStats.from_dict(doc["normalization"]) if doc.get("normalization") else None
        shared = doc.get("shared_matrix")
        shared = CausalMatrix(np.asarray(shared["scores"]), float(shared["threshold"])) if shared else None
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CorruptModelError):
            raise
        raise CorruptModelError(f"malformed model document: {exc}") from exc
    return CaLoNetModel(config, params, norm, shared)


def load(path) -> CaLoNetModel:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CorruptModelError(f"{path}: not valid JSON ({exc})") from exc
    return model_from_dict(doc)
