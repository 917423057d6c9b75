"""Training loop for sparse binarized networks.

Each step runs the binarized forward, cross-entropy task loss, the global
ones-fraction penalty j over all binarized layers, re-solves lambda so the
penalty stays a fixed fraction gamma of the total loss, and backpropagates
both paths through the straight-through estimator. Deterministic given the
config seed: network init, shuffling and augmentation all derive from it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .binquant import (
    OmegaParams,
    ValidationError,
    canonicalize_with_bits,
    fit_omega,
    sign_binarize,
    signs_to_bits,
)
from .engine import (
    BinStage,
    BitPool,
    FloatStage,
    FusedThreshold,
    Head,
    PackedLayer,
    QuantizedModel,
)
from .nn import (
    BatchNorm,
    Conv3x3,
    Flatten,
    LayerSpec,
    Linear,
    MaxPool2x2,
    Network,
    SignAct,
    _WeightedLayer,
    softmax_cross_entropy,
)
from .sparsity import inverse_binary_entropy, lambda_update, penalty_j


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; aborted with diagnostics."""


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    gamma: float = 0.1
    target_sparsity: float | None = None  # ones budget ec = 1 - s
    h_star: float | None = None  # alternative entry: ec = h^-1(h_star)
    seed: int = 0
    omega_mode: str = "analytic"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    cosine_lr: bool = True
    augment: bool = False  # seeded shift-crop + horizontal flip
    mixup_alpha: float = 0.0  # reserved; not used at desk scale

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValidationError(f"gamma = {self.gamma} outside [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("bad epochs/batch_size")
        if self.target_sparsity is not None and not 0.0 <= self.target_sparsity < 1.0:
            raise ValidationError("target_sparsity outside [0, 1)")
        if self.h_star is not None and not 0.0 <= self.h_star <= 1.0:
            raise ValidationError("h_star outside [0, 1]")

    @property
    def ec(self) -> float:
        if self.h_star is not None:
            return inverse_binary_entropy(self.h_star)
        if self.target_sparsity is not None:
            return 1.0 - self.target_sparsity
        return 0.5


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    final_snapshot_id: str = ""

    def add(self, **kw):
        self.records.append(kw)

    def to_jsonl(self) -> str:
        lines = [json.dumps(r, sort_keys=True) for r in self.records]
        lines.append(
            json.dumps({"final": True, "snapshot_id": self.final_snapshot_id})
        )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainReport":
        rep = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            if obj.get("final"):
                rep.final_snapshot_id = obj["snapshot_id"]
            else:
                rep.records.append(obj)
        return rep


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params  # list of (name, Parameter)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(p.value) for n, p in params}
        self.v = {n: np.zeros_like(p.value) for n, p in params}
        self.t = 0

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for n, p in self.params:
            m = self.m[n] = b1 * self.m[n] + (1 - b1) * p.grad
            v = self.v[n] = b2 * self.v[n] + (1 - b2) * p.grad**2
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            p.value -= lr * mhat / (np.sqrt(vhat) + self.eps)


def cosine_lr(base_lr, epoch, total_epochs):
    if total_epochs <= 1:
        return base_lr
    return 0.5 * base_lr * (1.0 + np.cos(np.pi * epoch / total_epochs))


def evaluate(network: Network, images, labels, batch_size=256) -> float:
    hits = 0
    for lo in range(0, images.shape[0], batch_size):
        logits = network.forward(images[lo : lo + batch_size], train=False)
        hits += int(np.sum(np.argmax(logits, axis=1) == labels[lo : lo + batch_size]))
    return hits / images.shape[0]


def sbnn_step(network: Network, xb, yb, gamma, ec):
    """One loss-and-gradients evaluation (no optimizer update). Returns
    (task_loss, j, lam). Grads are accumulated into the network params."""
    logits = network.forward(xb, train=True)
    loss, dlogits = softmax_cross_entropy(logits, yb)
    wb = network.concat_sign_weights()
    j = penalty_j(wb, ec) if wb.size else 0.0
    lam = lambda_update(loss, j, gamma) if wb.size else 0.0
    network.backward(dlogits)
    if lam > 0.0 and j > 0.0:
        n_total = wb.size
        for layer in network.binarized_layers():
            w = layer.weight.value
            layer.weight.grad += (lam / (2.0 * n_total)) * (np.abs(w) <= 1.0)
    return loss, j, lam


def train(network: Network, dataset, cfg: TrainConfig, val=None) -> TrainReport:
    """Run cfg.epochs of minibatch Adam. `dataset` and `val` are
    (images, labels) pairs; with val=None accuracy is reported on the
    training set. epochs = 0 leaves the network at initialization and
    returns an empty report."""
    images, labels = dataset
    if images.shape[0] < 1:
        raise ValidationError("empty dataset")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    opt = Adam(
        network.params(), beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps
    )
    report = TrainReport()
    ec = cfg.ec
    best_loss = np.inf
    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg.learning_rate, epoch, cfg.epochs) if cfg.cosine_lr else cfg.learning_rate
        order = rng.permutation(images.shape[0])
        losses = []
        last_j, last_lam = 0.0, 0.0
        for lo in range(0, order.size, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            xb = images[idx]
            if cfg.augment:
                xb = _augment(xb, rng)
            network.zero_grads()
            loss, last_j, last_lam = sbnn_step(network, xb, labels[idx], cfg.gamma, ec)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {lo // cfg.batch_size}"
                )
            opt.step(lr)
            # keep latent weights inside the estimator's active band so no
            # weight loses its gradient permanently
            for layer in network.binarized_layers():
                np.clip(layer.weight.value, -1.0, 1.0, out=layer.weight.value)
            losses.append(loss)
        epoch_loss = float(np.mean(losses))
        best_loss = min(best_loss, epoch_loss)
        vx, vy = val if val is not None else (images, labels)
        report.add(
            epoch=epoch,
            loss=epoch_loss,
            j=last_j,
            **{"lambda": last_lam},
            ones_fraction=network.ones_fraction(),
            accuracy=evaluate(network, vx, vy),
            best_loss=best_loss,
        )
    return report


def _augment(xb, rng):
    """Shift-crop within +-1 pixel and horizontal flip, per sample."""
    b, c, h, w = xb.shape
    out = np.empty_like(xb)
    shifts = rng.integers(-1, 2, size=(b, 2))
    flips = rng.integers(0, 2, size=b)
    pad = np.pad(xb, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    for i in range(b):
        dy, dx = shifts[i]
        img = pad[i, :, 1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        out[i] = img[:, :, ::-1] if flips[i] else img
    return out


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------

@dataclass
class Snapshot:
    spec: tuple
    cfg: TrainConfig
    input_shape: tuple
    classes: int
    params: dict
    buffers: dict

    @property
    def snapshot_id(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps([asdict(ls) for ls in self.spec], sort_keys=True).encode())
        for key in sorted(self.params):
            h.update(key.encode())
            h.update(np.ascontiguousarray(self.params[key]).tobytes())
        for key in sorted(self.buffers):
            h.update(key.encode())
            h.update(np.ascontiguousarray(self.buffers[key]).tobytes())
        return h.hexdigest()[:12]


def take_snapshot(network: Network, cfg: TrainConfig, input_shape, classes) -> Snapshot:
    params = {name: p.value.copy() for name, p in network.params()}
    buffers = {}
    for i, layer in enumerate(network.layers):
        if isinstance(layer, BatchNorm):
            buffers[f"{i}.running_mean"] = layer.running_mean.copy()
            buffers[f"{i}.running_var"] = layer.running_var.copy()
    return Snapshot(
        spec=network.spec,
        cfg=cfg,
        input_shape=tuple(input_shape),
        classes=classes,
        params=params,
        buffers=buffers,
    )


def restore_network(snap: Snapshot) -> Network:
    net = Network(snap.spec, np.random.default_rng(0))
    for name, p in net.params():
        p.value[...] = snap.params[name]
    for i, layer in enumerate(net.layers):
        if isinstance(layer, BatchNorm):
            layer.running_mean[...] = snap.buffers[f"{i}.running_mean"]
            layer.running_var[...] = snap.buffers[f"{i}.running_var"]
    return net


def save_snapshot(path, snap: Snapshot):
    meta = {
        "spec": [asdict(ls) for ls in snap.spec],
        "cfg": asdict(snap.cfg),
        "input_shape": list(snap.input_shape),
        "classes": snap.classes,
    }
    arrays = {f"p:{k}": v for k, v in snap.params.items()}
    arrays.update({f"b:{k}": v for k, v in snap.buffers.items()})
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_snapshot(path) -> Snapshot:
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        params = {k[2:]: z[k] for k in z.files if k.startswith("p:")}
        buffers = {k[2:]: z[k] for k in z.files if k.startswith("b:")}
    spec = tuple(LayerSpec(**d) for d in meta["spec"])
    cfg = TrainConfig(**meta["cfg"])
    return Snapshot(
        spec=spec,
        cfg=cfg,
        input_shape=tuple(meta["input_shape"]),
        classes=meta["classes"],
        params=params,
        buffers=buffers,
    )


# ---------------------------------------------------------------------------
# quantization: trained network -> engine model
# ---------------------------------------------------------------------------

def _layer_omega_and_bits(layer: _WeightedLayer, mode: str):
    w = layer.weight.value.ravel()
    wb = sign_binarize(w)
    bits = signs_to_bits(wb)
    if mode == "pm1":
        return OmegaParams(tau=1.0, phi=0.0), bits
    if mode == "analytic":
        om = fit_omega(w, wb)
    elif mode == "learned":
        if layer.tau is None:
            raise ValidationError(
                "learned quantization requires a layer trained with omega_mode='learned'"
            )
        om = OmegaParams(tau=float(layer.tau.value), phi=float(layer.phi.value))
        if om.tau == 0.0:
            om = OmegaParams(tau=0.0, phi=om.phi, degenerate=True)
    else:
        raise ValidationError(f"unknown quantization mode {mode!r}")
    om, bits = canonicalize_with_bits(om, bits)
    return om, bits


def quantize_network(network: Network, input_shape, classes, mode=None) -> QuantizedModel:
    """Fold the trained stack into engine stages. Binarized and stem layers
    must be followed by batchnorm + sign; batchnorm running statistics feed
    the fused thresholds."""
    stages = []
    layers = network.layers
    i = 0
    first_real = True
    while i < len(layers):
        layer = layers[i]
        if isinstance(layer, (Conv3x3, Linear)):
            spec = layer.spec
            if spec.kind == "classifier" or (
                not spec.binarized and i + 1 >= len(layers)
            ):
                bias = layer.bias.value.copy() if layer.bias is not None else np.zeros(spec.out_ch)
                stages.append(Head(weight=layer.weight.value.copy(), bias=bias))
                i += 1
                continue
            if not (
                i + 2 < len(layers)
                and isinstance(layers[i + 1], BatchNorm)
                and isinstance(layers[i + 2], SignAct)
            ):
                raise ValidationError(
                    f"layer {i} ({spec.kind}) must be followed by batchnorm and sign"
                )
            bn = layers[i + 1]
            thr = FusedThreshold.from_batchnorm(
                bn.gamma.value, bn.beta.value, bn.running_mean, bn.running_var, bn.eps
            )
            if spec.binarized:
                if first_real:
                    raise ValidationError("first layer cannot be binarized")
                lmode = mode or spec.omega_mode
                om, bits = _layer_omega_and_bits(layer, lmode)
                packed = PackedLayer(
                    kind=spec.kind if spec.kind != "classifier" else "linear",
                    in_ch=spec.in_ch,
                    out_ch=spec.out_ch,
                    stride=spec.stride,
                    padding=spec.padding,
                    bits=bits.reshape(spec.out_ch, -1),
                    omega=om,
                )
                stages.append(BinStage(packed=packed, threshold=thr))
            else:
                stages.append(
                    FloatStage(
                        kind=spec.kind,
                        in_ch=spec.in_ch,
                        out_ch=spec.out_ch,
                        stride=spec.stride,
                        padding=spec.padding,
                        weight=layer.weight.value.copy(),
                        threshold=thr,
                        takes_bits=not first_real,
                    )
                )
            first_real = False
            i += 3
            continue
        if isinstance(layer, MaxPool2x2):
            stages.append(BitPool())
            i += 1
            continue
        if isinstance(layer, (Flatten,)):
            i += 1
            continue
        raise ValidationError(f"cannot quantize layer {i} ({type(layer).__name__})")
    return QuantizedModel(stages=stages, input_shape=tuple(input_shape), classes=classes)


def quantize_snapshot(snap: Snapshot, mode=None) -> QuantizedModel:
    """Quantize a training snapshot with one of the domain modes: 'analytic'
    (closed-form fit per layer), 'learned' (the trained tau/phi), or 'pm1'
    (the fixed {-1,+1} baseline). Defaults to the mode the snapshot was
    trained with."""
    net = restore_network(snap)
    return quantize_network(
        net, snap.input_shape, snap.classes, mode=mode or snap.cfg.omega_mode
    )
