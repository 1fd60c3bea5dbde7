"""Toy two-stage slide model: MLP patch encoder + gated-attention pooling.

The backbone (encoder and aggregator) stands in for a pathology foundation
model; per-task MLP heads sit on top of the slide representation and are
never visible to the attacker.

Inference on a frozen backbone encodes one patch row at a time.  The attack
engine relies on this: re-encoding an unmodified patch on a tape must give
the cached feature bit for bit, or the clean-input gradient would not vanish.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .errors import FormatError, NumericError, UsageError

logger = logging.getLogger(__name__)

FORMAT_VERSION = "1"


@dataclass(frozen=True)
class ModelDims:
    patch_shape: tuple[int, int, int] = (8, 8, 3)
    enc_hidden: int = 32
    feature_dim: int = 32
    attn_hidden: int = 16
    rep_dim: int = 16
    head_hidden: int = 16

    @property
    def patch_size(self) -> int:
        h, w, c = self.patch_shape
        return h * w * c


@dataclass
class EncoderParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    activation: str = "tanh"  # "identity" gives a linear encoder


@dataclass
class AggregatorParams:
    V: np.ndarray
    U: np.ndarray
    w: np.ndarray
    P: np.ndarray


@dataclass
class HeadParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.W2.shape[1]


def _tensors(params) -> dict[str, np.ndarray]:
    return {
        f.name: getattr(params, f.name)
        for f in fields(params)
        if isinstance(getattr(params, f.name), np.ndarray)
    }


@dataclass
class ModelBundle:
    encoder: EncoderParams
    aggregator: AggregatorParams
    heads: dict[str, HeadParams] = field(default_factory=dict)
    patch_shape: tuple[int, int, int] = (8, 8, 3)
    frozen: bool = False

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {f"encoder.{k}": v for k, v in _tensors(self.encoder).items()}
        out.update({f"aggregator.{k}": v for k, v in _tensors(self.aggregator).items()})
        for task in sorted(self.heads):
            out.update({f"head.{task}.{k}": v for k, v in _tensors(self.heads[task]).items()})
        return out

    def backbone_checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.named_tensors().items():
            if name.startswith("head."):
                continue
            h.update(name.encode())
            h.update(repr(arr.shape).encode())
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        return h.hexdigest()

    def freeze(self) -> ModelBundle:
        """Return a frozen deep copy with read-only backbone arrays."""
        out = copy.deepcopy(self)
        for params in (out.encoder, out.aggregator):
            for arr in _tensors(params).values():
                arr.flags.writeable = False
        out.frozen = True
        return out


# --- initialisation ----------------------------------------------------------

def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_head(dims: ModelDims, n_classes: int, rng: np.random.Generator) -> HeadParams:
    return HeadParams(
        W1=_glorot(rng, dims.rep_dim, dims.head_hidden),
        b1=np.zeros(dims.head_hidden),
        W2=_glorot(rng, dims.head_hidden, n_classes),
        b2=np.zeros(n_classes),
    )


def init_bundle(dims: ModelDims, task_classes: Mapping[str, int], seed: int) -> ModelBundle:
    rng = np.random.default_rng(seed)
    enc = EncoderParams(
        W1=_glorot(rng, dims.patch_size, dims.enc_hidden),
        b1=np.zeros(dims.enc_hidden),
        W2=_glorot(rng, dims.enc_hidden, dims.feature_dim),
        b2=np.zeros(dims.feature_dim),
    )
    agg = AggregatorParams(
        V=_glorot(rng, dims.feature_dim, dims.attn_hidden),
        U=_glorot(rng, dims.feature_dim, dims.attn_hidden),
        w=_glorot(rng, dims.attn_hidden, 1),
        P=_glorot(rng, dims.feature_dim, dims.rep_dim),
    )
    heads = {t: init_head(dims, n, rng) for t, n in sorted(task_classes.items())}
    return ModelBundle(enc, agg, heads, tuple(dims.patch_shape))


# --- differentiable forward rules ---------------------------------------------

def encoder_forward(p: Mapping[str, ad.Var], rows: ad.Var, activation: str = "tanh") -> ad.Var:
    """rows (n, H*W*C) -> features (n, d)."""
    hidden = rows @ p["W1"] + p["b1"]
    if activation == "tanh":
        hidden = ad.tanh(hidden)
    elif activation != "identity":
        raise UsageError(f"unknown encoder activation {activation!r}")
    return hidden @ p["W2"] + p["b2"]


def aggregator_forward(p: Mapping[str, ad.Var], feats: ad.Var) -> tuple[ad.Var, ad.Var]:
    """feats (..., N, d) -> (z (..., d'), attention (..., 1, N))."""
    *lead, n, _ = feats.shape
    gate = ad.tanh(feats @ p["V"]) * ad.sigmoid(feats @ p["U"])
    scores = ad.reshape(gate @ p["w"], (*lead, 1, n))
    attn = ad.softmax(scores)
    pooled = attn @ feats
    z = pooled @ p["P"]
    return ad.reshape(z, (*lead, z.shape[-1])), attn


def head_forward(p: Mapping[str, ad.Var], z: ad.Var) -> ad.Var:
    return ad.relu(z @ p["W1"] + p["b1"]) @ p["W2"] + p["b2"]


def _consts(tape: ad.Tape, params) -> dict[str, ad.Var]:
    return {k: tape.constant(v) for k, v in _tensors(params).items()}


class BackboneTape:
    """Frozen backbone parameters recorded as constants on one tape."""

    def __init__(self, bundle: ModelBundle, tape: ad.Tape | None = None):
        self.tape = tape if tape is not None else ad.Tape()
        self.patch_shape = bundle.patch_shape
        self.enc = _consts(self.tape, bundle.encoder)
        self.agg = _consts(self.tape, bundle.aggregator)
        self.activation = bundle.encoder.activation

    def encode_row(self, row: ad.Var) -> ad.Var:
        return encoder_forward(self.enc, row, self.activation)

    def aggregate(self, feats: ad.Var) -> tuple[ad.Var, ad.Var]:
        return aggregator_forward(self.agg, feats)


# --- public operations ---------------------------------------------------------

def encode_patch(enc: EncoderParams, patch: np.ndarray) -> np.ndarray:
    """Feature vector of one (H, W, C) patch."""
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 3 or patch.size != enc.W1.shape[0]:
        raise UsageError(f"patch of shape {patch.shape} does not fit encoder input size {enc.W1.shape[0]}")
    tape = ad.Tape()
    row = tape.constant(patch.reshape(1, -1))
    return encoder_forward(_consts(tape, enc), row, enc.activation).value[0].copy()


@dataclass
class Aggregation:
    z: np.ndarray
    attention: np.ndarray


def aggregate(agg: AggregatorParams, features: Sequence[np.ndarray]) -> Aggregation:
    if len(features) == 0:
        raise UsageError("aggregate: empty bag")
    feats = np.stack([np.asarray(f, dtype=np.float64) for f in features])
    if feats.ndim != 2 or feats.shape[1] != agg.V.shape[0]:
        raise UsageError(f"aggregate: features of shape {feats.shape} do not match d={agg.V.shape[0]}")
    tape = ad.Tape()
    z, attn = aggregator_forward(_consts(tape, agg), tape.constant(feats))
    return Aggregation(z.value.copy(), attn.value[0].copy())


@dataclass
class SlideForward:
    features: np.ndarray  # (N, d), row i = encoder(patch i)
    z: np.ndarray
    attention: np.ndarray


def encode_rows(bundle: ModelBundle, pixels: np.ndarray) -> np.ndarray:
    """Encode patches one row at a time (the cache-compatible path)."""
    bt = BackboneTape(bundle)
    return _encode_rows_on(bt, pixels)


def _encode_rows_on(bt: BackboneTape, pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 4 or pixels.shape[1:] != tuple(bt.patch_shape):
        raise UsageError(f"slide pixels of shape {pixels.shape} do not match patch shape {bt.patch_shape}")
    rows = pixels.reshape(pixels.shape[0], -1)
    out = [bt.encode_row(bt.tape.constant(rows[i : i + 1])).value for i in range(rows.shape[0])]
    return np.concatenate(out, axis=0)


def forward_features(bundle: ModelBundle, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    bt = BackboneTape(bundle)
    z, attn = bt.aggregate(bt.tape.constant(features))
    return z.value.copy(), attn.value[0].copy()


def forward_slide(bundle: ModelBundle, slide, training: bool = False) -> SlideForward:
    """Per-patch features and the slide representation of ``slide``.

    ``slide`` may be a Slide (anything with ``.pixels``) or an (N,H,W,C) array.
    """
    if not bundle.frozen and not training:
        raise UsageError("forward_slide on an unfrozen bundle requires training=True")
    pixels = getattr(slide, "pixels", slide)
    if len(pixels) == 0:
        raise UsageError("aggregate: empty bag")
    bt = BackboneTape(bundle)
    feats = _encode_rows_on(bt, pixels)
    z, attn = bt.aggregate(bt.tape.constant(feats))
    return SlideForward(feats, z.value.copy(), attn.value[0].copy())


@dataclass
class Prediction:
    label: int
    scores: np.ndarray


def predict(head: HeadParams, z: np.ndarray) -> Prediction:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (head.W1.shape[0],):
        raise UsageError(f"predict: z of shape {z.shape}, head expects ({head.W1.shape[0]},)")
    tape = ad.Tape()
    logits = head_forward(_consts(tape, head), tape.constant(z[None, :])).value[0]
    scores = ad._softmax(logits)
    return Prediction(int(np.argmax(logits)), scores)


def predict_logits(head: HeadParams, z: np.ndarray) -> np.ndarray:
    tape = ad.Tape()
    return head_forward(_consts(tape, head), tape.constant(np.atleast_2d(z))).value.copy()


# --- training ---------------------------------------------------------------

class Adam:
    def __init__(self, params: Mapping[str, np.ndarray], lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        if self.lr == 0:
            return
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def cross_entropy(logits: ad.Var, labels: np.ndarray) -> ad.Var:
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = ad.sum(ad.log_softmax(logits) * onehot, axis=-1)
    return -ad.mean(picked)


def _split_params(flat: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    n = len(prefix)
    return {k[n:]: v for k, v in flat.items() if k.startswith(prefix)}


def _labels(slides, task_id: str) -> np.ndarray:
    try:
        return np.array([s.labels[task_id] for s in slides], dtype=int)
    except KeyError:
        raise UsageError(f"dataset has no labels for task {task_id!r}") from None


def pretrain_loss(
    flat: Mapping[str, ad.Var],
    pixels: np.ndarray,
    labels: Mapping[str, np.ndarray],
    tape: ad.Tape,
    activation: str = "tanh",
) -> ad.Var:
    """Summed cross-entropy of every task head on one minibatch."""
    b, n = pixels.shape[:2]
    rows = tape.constant(pixels.reshape(b * n, -1))
    feats = encoder_forward(_split_params(flat, "encoder."), rows, activation)
    feats = ad.reshape(feats, (b, n, feats.shape[-1]))
    z, _ = aggregator_forward(_split_params(flat, "aggregator."), feats)
    total = None
    for task_id, y in labels.items():
        loss = cross_entropy(head_forward(_split_params(flat, f"head.{task_id}."), z), y)
        total = loss if total is None else total + loss
    return total


@dataclass
class TrainResult:
    bundle: ModelBundle
    loss_log: list[float]


def _minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def pretrain(
    bundle: ModelBundle,
    slides: Sequence,
    task_id: str | Sequence[str],
    epochs: int,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 8,
) -> TrainResult:
    """Jointly train encoder, aggregator and the task head(s), then freeze.

    Supervised training stands in for foundation-model pretraining.  Passing
    several task ids sums their cross-entropies.  ``loss_log`` holds the mean
    minibatch loss per epoch.
    """
    if bundle.frozen:
        raise UsageError("pretrain requires an unfrozen bundle")
    if len(slides) == 0:
        raise UsageError("pretrain: empty dataset")
    tasks = [task_id] if isinstance(task_id, str) else list(task_id)
    for t in tasks:
        if t not in bundle.heads:
            raise UsageError(f"bundle has no head for task {t!r}")
    labels = {t: _labels(slides, t) for t in tasks}
    pixels = np.stack([s.pixels for s in slides])
    keep = tuple(f"head.{t}." for t in tasks)
    params = {
        k: np.array(v)
        for k, v in bundle.named_tensors().items()
        if not k.startswith("head.") or k.startswith(keep)
    }
    opt = Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    log: list[float] = []
    for epoch in range(epochs):
        losses = []
        for idx in _minibatches(len(slides), batch_size, rng):
            try:
                tape = ad.Tape()
                flat = {k: tape.leaf(v, name=k) for k, v in params.items()}
                batch_labels = {t: y[idx] for t, y in labels.items()}
                loss = pretrain_loss(flat, pixels[idx], batch_labels, tape, bundle.encoder.activation)
                grads = tape.backward(loss, list(params))
            except NumericError as exc:
                raise NumericError(f"pretrain epoch {epoch}: {exc}") from exc
            opt.step(params, grads)
            losses.append(float(loss.value))
        log.append(float(np.mean(losses)))
        logger.debug("pretrain epoch %d loss %.6f", epoch, log[-1])
    out = _with_params(bundle, params)
    return TrainResult(out.freeze(), log)


def _with_params(bundle: ModelBundle, flat: Mapping[str, np.ndarray]) -> ModelBundle:
    out = copy.deepcopy(bundle)
    for name, value in flat.items():
        parts = name.split(".")
        if parts[0] == "head":
            target = out.heads[parts[1]]
        else:
            target = getattr(out, parts[0])
        setattr(target, parts[-1], np.array(value))
    return out


def slide_representations(bundle: ModelBundle, slides: Sequence) -> np.ndarray:
    return np.stack([forward_slide(bundle, s).z for s in slides])


def train_head(
    bundle: ModelBundle,
    slides: Sequence,
    task_id: str,
    epochs: int,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 8,
    n_classes: int | None = None,
    reps: np.ndarray | None = None,
) -> HeadParams:
    """Fit a fresh MLP head on frozen slide representations.

    ``reps`` may carry precomputed representations for ``slides``.
    """
    if not bundle.frozen:
        raise UsageError("train_head requires a frozen bundle")
    if len(slides) == 0:
        raise UsageError("train_head: empty dataset")
    labels = _labels(slides, task_id)
    if n_classes is None:
        n_classes = bundle.heads[task_id].n_classes if task_id in bundle.heads else int(labels.max()) + 1
    before = bundle.backbone_checksum()
    z_all = slide_representations(bundle, slides) if reps is None else np.asarray(reps)
    dims = ModelDims(rep_dim=z_all.shape[1], head_hidden=bundle_head_hidden(bundle))
    rng = np.random.default_rng(seed)
    head = init_head(dims, n_classes, rng)
    params = _tensors(head)
    params = {k: np.array(v) for k, v in params.items()}
    opt = Adam(params, lr=lr)
    for epoch in range(epochs):
        for idx in _minibatches(len(slides), batch_size, rng):
            tape = ad.Tape()
            p = {k: tape.leaf(v, name=k) for k, v in params.items()}
            try:
                loss = cross_entropy(head_forward(p, tape.constant(z_all[idx])), labels[idx])
            except NumericError as exc:
                raise NumericError(f"train_head epoch {epoch}: {exc}") from exc
            opt.step(params, tape.backward(loss, list(params)))
    if bundle.backbone_checksum() != before:
        raise AssertionError("backbone changed during head training")
    return HeadParams(**params)


def bundle_head_hidden(bundle: ModelBundle) -> int:
    for head in bundle.heads.values():
        return head.W1.shape[1]
    return ModelDims().head_hidden


# --- persistence ---------------------------------------------------------------

def save_weights(bundle: ModelBundle, path) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "patch_shape": list(bundle.patch_shape),
        "frozen": bundle.frozen,
        "encoder_activation": bundle.encoder.activation,
        "tensors": [
            {"name": name, "shape": list(arr.shape), "values": [repr(float(v)) for v in arr.reshape(-1)]}
            for name, arr in bundle.named_tensors().items()
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


_ENCODER_KEYS = {f.name for f in fields(EncoderParams)}
_AGG_KEYS = {f.name for f in fields(AggregatorParams)}
_HEAD_KEYS = {f.name for f in fields(HeadParams)}


def load_weights(path) -> ModelBundle:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not a valid weight file ({exc})") from None
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: top level must be an object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: format_version {version!r} does not match supported {FORMAT_VERSION!r}")
    for key in ("patch_shape", "tensors"):
        if key not in doc:
            raise FormatError(f"{path}: missing field {key!r}")
    groups: dict[str, dict[str, np.ndarray]] = {}
    for i, entry in enumerate(doc["tensors"]):
        try:
            name, shape, values = entry["name"], tuple(entry["shape"]), entry["values"]
            arr = np.array([float(v) for v in values], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: tensors[{i}] is malformed ({exc})") from None
        if arr.size != int(np.prod(shape)):
            raise FormatError(f"{path}: tensors[{i}] ({name}) has {arr.size} values for shape {shape}")
        group, _, key = name.rpartition(".")
        groups.setdefault(group, {})[key] = arr.reshape(shape)
    try:
        enc = EncoderParams(**groups.pop("encoder"), activation=doc.get("encoder_activation", "tanh"))
        agg = AggregatorParams(**groups.pop("aggregator"))
        heads = {g.split(".", 1)[1]: HeadParams(**t) for g, t in groups.items() if g.startswith("head.")}
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: missing or unexpected tensors ({exc})") from None
    bundle = ModelBundle(enc, agg, heads, tuple(doc["patch_shape"]))
    return bundle.freeze() if doc.get("frozen") else bundle
