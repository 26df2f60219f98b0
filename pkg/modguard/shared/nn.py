"""Sequential IQ classifier with logits and a designated feature layer, on torch autograd."""
import io
import logging
import struct
from pathlib import Path
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from modguard.schemas.models import ArchitectureConfig, LayerSpec
from modguard.shared.codecs import BinaryReader, check_magic, read_bytes
from modguard.shared.errors import MalformedHeaderError, ShapeMismatchError, TruncatedPayloadError

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"MGM1"
LAYER_TAGS = {"scale": 0, "conv": 1, "relu": 2, "flatten": 3, "dense": 4}
LOG_CLAMP = 1e-12

ArrayLike = Union[torch.Tensor, np.ndarray]


class Scale(nn.Module):
    """Fixed, non-trainable multiplication."""

    def __init__(self, value: float):
        super().__init__()
        self.value = float(value)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.value


class Model(nn.Module):
    """
    Sequential network over (batch, 2, N) frames.

    Convolutions see the frame as a one-channel 2xN image. The output of
    layer `feature_index` is the feature vector zeta; the last layer's output
    is the logits.
    """

    def __init__(self, layers: Sequence[LayerSpec], input_length: int, feature_index: int):
        super().__init__()
        self.specs: Tuple[LayerSpec, ...] = tuple(layers)
        self.input_length = int(input_length)
        self.feature_index = int(feature_index)
        if not self.specs:
            raise ShapeMismatchError("Model needs at least one layer")
        if not 0 <= self.feature_index < len(self.specs):
            raise ShapeMismatchError(
                f"feature_index {feature_index} outside 0..{len(self.specs) - 1}"
            )

        shape: Tuple[int, ...] = (1, 2, self.input_length)
        modules = []
        for i, spec in enumerate(self.specs):
            module, shape = self._build_layer(i, spec, shape)
            modules.append(module)
        if len(shape) != 2:
            raise ShapeMismatchError(f"Final layer must produce (batch, K), got {shape}")
        self.layers = nn.ModuleList(modules)
        self.num_outputs = shape[1]
        self.feature_shape = self._feature_shape()

    @staticmethod
    def _build_layer(i: int, spec: LayerSpec, shape: Tuple[int, ...]):
        if spec.kind == "scale":
            return Scale(spec.value), shape
        if spec.kind == "relu":
            return nn.ReLU(), shape
        if spec.kind == "flatten":
            return nn.Flatten(), (shape[0], int(np.prod(shape[1:])))
        if spec.kind == "conv":
            if len(shape) == 2:
                raise ShapeMismatchError(f"Layer {i}: conv after flatten")
            channels, height, width = (1, *shape[1:]) if len(shape) == 3 else shape[1:]
            if spec.kh > height or spec.kw > width:
                raise ShapeMismatchError(
                    f"Layer {i}: kernel {spec.kh}x{spec.kw} larger than input {height}x{width}"
                )
            conv = nn.Conv2d(channels, spec.out, kernel_size=(spec.kh, spec.kw))
            return conv, (shape[0], spec.out, height - spec.kh + 1, width - spec.kw + 1)
        if len(shape) != 2:
            raise ShapeMismatchError(f"Layer {i}: dense layer needs a flatten before it, got {shape}")
        return nn.Linear(shape[1], spec.out), (shape[0], spec.out)

    def _feature_shape(self) -> Tuple[int, ...]:
        with torch.no_grad():
            probe = torch.zeros(1, 2, self.input_length, dtype=self.dtype)
            _, features = self(probe)
        return tuple(features.shape[1:])

    @property
    def dtype(self) -> torch.dtype:
        for p in self.parameters():
            return p.dtype
        return torch.get_default_dtype()

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        h = x
        features = None
        for i, (spec, layer) in enumerate(zip(self.specs, self.layers)):
            if spec.kind == "conv" and h.dim() == 3:
                h = h.unsqueeze(1)
            h = layer(h)
            if i == self.feature_index:
                features = h
        return h, features


class ForwardOutput(NamedTuple):
    logits: torch.Tensor
    features: torch.Tensor


class GradResult(NamedTuple):
    d_params: List[torch.Tensor]
    d_input: torch.Tensor
    value: float = 0.0


def default_layers(
    arch: ArchitectureConfig,
    num_classes: int,
    input_scale: float = 1.0,
) -> Tuple[List[LayerSpec], int]:
    """Desk-scale topology: [scale] conv relu conv relu flatten dense(F) relu dense(K)."""
    layers: List[LayerSpec] = []
    if arch.auto_scale:
        layers.append(LayerSpec(kind="scale", value=input_scale))
    for filters, (kh, kw) in zip(arch.conv_filters, arch.conv_kernels):
        layers.append(LayerSpec(kind="conv", out=filters, kh=kh, kw=kw))
        layers.append(LayerSpec(kind="relu"))
    layers.append(LayerSpec(kind="flatten"))
    layers.append(LayerSpec(kind="dense", out=arch.feature_width))
    layers.append(LayerSpec(kind="relu"))
    feature_index = len(layers) - 1
    layers.append(LayerSpec(kind="dense", out=num_classes))
    return layers, feature_index


def build_model(
    layers: Sequence[LayerSpec],
    input_length: int,
    feature_index: int,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> Model:
    """Deterministically initialized model; the global torch RNG is left untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Model(layers, input_length, feature_index)
    return model.to(dtype)


def freeze(model: Model) -> Model:
    """Make a model read-only for sharing across attack threads."""
    for p in model.parameters():
        p.requires_grad_(False)
    return model.eval()


def as_input(model: Model, x: ArrayLike) -> torch.Tensor:
    """Convert frames to a (batch, 2, N) tensor of the model's dtype."""
    t = torch.as_tensor(x) if isinstance(x, np.ndarray) else x
    t = t.to(model.dtype)
    if t.dim() == 2:
        t = t.unsqueeze(0)
    if t.dim() != 3 or t.shape[1] != 2 or t.shape[2] != model.input_length:
        raise ShapeMismatchError(
            f"Expected input (batch, 2, {model.input_length}), got {tuple(t.shape)}"
        )
    return t


def forward(model: Model, x: ArrayLike) -> ForwardOutput:
    """Logits (batch x K) and features (batch x F) of a batch of frames."""
    logits, features = model(as_input(model, x))
    return ForwardOutput(logits=logits, features=features)


def predict(model: Model, x: ArrayLike, batch_size: int = 512) -> np.ndarray:
    """Argmax class per frame."""
    t = as_input(model, x)
    out = []
    with torch.no_grad():
        for start in range(0, len(t), batch_size):
            logits, _ = model(t[start : start + batch_size])
            out.append(torch.argmax(logits, dim=1))
    return torch.cat(out).numpy() if out else np.zeros(0, dtype=np.int64)


def extract_features(model: Model, x: ArrayLike, batch_size: int = 512) -> np.ndarray:
    """Feature-layer outputs as a float64 (batch x F) array."""
    t = as_input(model, x)
    out = []
    with torch.no_grad():
        for start in range(0, len(t), batch_size):
            _, features = model(t[start : start + batch_size])
            out.append(features.reshape(len(features), -1))
    if not out:
        return np.zeros((0, int(np.prod(model.feature_shape))))
    return torch.cat(out).numpy().astype(np.float64)


def softmax(logits: torch.Tensor) -> torch.Tensor:
    """Row softmax clamped away from zero."""
    return torch.clamp(torch.softmax(logits, dim=-1), min=LOG_CLAMP)


def one_hot(labels: ArrayLike, num_classes: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    idx = torch.as_tensor(labels, dtype=torch.int64)
    return torch.nn.functional.one_hot(idx, num_classes).to(dtype)


def is_label_dist(probs: torch.Tensor, atol: float = 1e-9) -> bool:
    """Entries non-negative and each row summing to one."""
    sums = probs.sum(dim=-1).to(torch.float64)
    return bool(torch.all(probs >= 0)) and bool(torch.all(torch.abs(sums - 1.0) <= atol))


def loss_ce(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """-sum_k target_k log max(softmax_k, 1e-12), averaged over the batch."""
    if logits.shape[-1] != target.shape[-1]:
        raise ShapeMismatchError(
            f"Target has {target.shape[-1]} classes, logits have {logits.shape[-1]}"
        )
    log_p = torch.log(torch.clamp(torch.softmax(logits, dim=-1), min=LOG_CLAMP))
    per_sample = -(target.to(logits.dtype) * log_p).sum(dim=-1)
    return per_sample.mean()


def grads(
    model: Model,
    x: ArrayLike,
    target: Optional[torch.Tensor] = None,
    head: Optional[Callable[[torch.Tensor, torch.Tensor], torch.Tensor]] = None,
    wrt_params: bool = True,
) -> GradResult:
    """
    Reverse-mode gradients of a scalar wrt every parameter and the input.

    The scalar is loss_ce(logits, target) unless `head(logits, features)` is given.
    With wrt_params=False only the input gradient is computed and d_params is empty.
    """
    xin = as_input(model, x).detach().clone().requires_grad_(True)
    params = list(model.parameters()) if wrt_params else []
    with torch.enable_grad():
        logits, features = model(xin)
        scalar = head(logits, features) if head is not None else loss_ce(logits, target)
        if scalar.dim() != 0:
            raise ShapeMismatchError(f"Gradient head must be a scalar, got {tuple(scalar.shape)}")
        inputs = [p for p in params if p.requires_grad] + [xin]
        if not scalar.requires_grad:
            computed = [None] * len(inputs)
        else:
            computed = torch.autograd.grad(scalar, inputs, allow_unused=True)

    by_param = {id(p): g for p, g in zip(inputs[:-1], computed[:-1]) if g is not None}
    d_params = [by_param.get(id(p), torch.zeros_like(p)) for p in params]
    d_input = computed[-1] if computed[-1] is not None else torch.zeros_like(xin)
    return GradResult(d_params=d_params, d_input=d_input, value=float(scalar.detach()))


def feature_vjp(model: Model, x: ArrayLike, cotangent: ArrayLike) -> torch.Tensor:
    """(d zeta / d x)^T cotangent, without materializing the Jacobian."""
    xin = as_input(model, x).detach().clone().requires_grad_(True)
    with torch.enable_grad():
        _, features = model(xin)
        cot = torch.as_tensor(cotangent, dtype=features.dtype)
        if cot.dim() == features.dim() - 1:
            cot = cot.unsqueeze(0)
        if cot.shape[1:] != features.shape[1:] or len(cot) not in (1, len(features)):
            raise ShapeMismatchError(
                f"Cotangent shape {tuple(cot.shape)} does not match features {tuple(features.shape)}"
            )
        cot = cot.expand_as(features)
        if not features.requires_grad:
            return torch.zeros_like(xin)
        (d_input,) = torch.autograd.grad(features, xin, grad_outputs=cot, allow_unused=True)
    return d_input if d_input is not None else torch.zeros_like(xin)


def sgd_step(
    model: Model,
    d_params: Sequence[torch.Tensor],
    lr: float,
    momentum: float,
    optimizer: Optional[torch.optim.SGD] = None,
) -> torch.optim.SGD:
    """
    theta <- theta - lr * v with v <- momentum * v + grad, in place.

    Returns the optimizer holding the momentum buffers; pass it back on the
    next call to continue the same trajectory.
    """
    params = list(model.parameters())
    if optimizer is None:
        optimizer = torch.optim.SGD(params, lr=lr, momentum=momentum)
    for p, g in zip(params, d_params):
        p.grad = g.detach().to(p.dtype)
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return optimizer


def model_to_bytes(model: Model) -> bytes:
    """Serialize to the MGM1 format."""
    out = io.BytesIO()
    out.write(MODEL_MAGIC)
    out.write(struct.pack("<III", model.input_length, len(model.specs), model.feature_index))
    for spec in model.specs:
        out.write(struct.pack("<B", LAYER_TAGS[spec.kind]))
        if spec.kind == "conv":
            out.write(struct.pack("<III", spec.out, spec.kh, spec.kw))
        elif spec.kind == "dense":
            out.write(struct.pack("<I", spec.out))
        elif spec.kind == "scale":
            out.write(struct.pack("<d", spec.value))
    tensors = list(model.parameters())
    out.write(struct.pack("<I", len(tensors)))
    for t in tensors:
        out.write(struct.pack("<B", t.dim()))
        out.write(struct.pack(f"<{t.dim()}I", *t.shape))
        out.write(t.detach().cpu().numpy().astype("<f4").tobytes())
    return out.getvalue()


def model_from_bytes(data: bytes, source: str = "<bytes>") -> Model:
    """Rebuild a float32 model from MGM1 bytes."""
    reader = BinaryReader(data, source)
    model = _decode_model(reader)
    reader.expect_end()
    return model


def _decode_model(reader: BinaryReader) -> Model:
    check_magic(reader, MODEL_MAGIC)
    tags = {v: k for k, v in LAYER_TAGS.items()}
    try:
        input_length, n_layers, feature_index = reader.unpack("III", "architecture header")
        specs = []
        for i in range(n_layers):
            (tag,) = reader.unpack("B", f"layer {i} tag")
            if tag not in tags:
                raise MalformedHeaderError(f"{reader.source}: unknown layer tag {tag}")
            kind = tags[tag]
            if kind == "conv":
                out, kh, kw = reader.unpack("III", f"layer {i} conv fields")
                specs.append(LayerSpec(kind=kind, out=out, kh=kh, kw=kw))
            elif kind == "dense":
                (out,) = reader.unpack("I", f"layer {i} dense fields")
                specs.append(LayerSpec(kind=kind, out=out))
            elif kind == "scale":
                (value,) = reader.unpack("d", f"layer {i} scale value")
                specs.append(LayerSpec(kind=kind, value=value))
            else:
                specs.append(LayerSpec(kind=kind))
        (n_tensors,) = reader.unpack("I", "tensor count")
    except TruncatedPayloadError as e:
        raise MalformedHeaderError(str(e)) from e
    except (ShapeMismatchError, ValueError) as e:
        if isinstance(e, MalformedHeaderError):
            raise
        raise MalformedHeaderError(f"{reader.source}: bad architecture: {e}") from e

    try:
        model = Model(specs, input_length, feature_index)
    except ShapeMismatchError as e:
        raise MalformedHeaderError(f"{reader.source}: inconsistent architecture: {e}") from e
    params = list(model.parameters())
    if n_tensors != len(params):
        raise MalformedHeaderError(
            f"{reader.source}: {n_tensors} tensors stored, architecture has {len(params)}"
        )
    with torch.no_grad():
        for i, p in enumerate(params):
            (ndim,) = reader.unpack("B", f"tensor {i} rank")
            dims = reader.unpack(f"{ndim}I", f"tensor {i} shape")
            if tuple(dims) != tuple(p.shape):
                raise MalformedHeaderError(
                    f"{reader.source}: tensor {i} has shape {dims}, expected {tuple(p.shape)}"
                )
            values = reader.array("f4", int(np.prod(dims)), f"tensor {i} data")
            p.copy_(torch.from_numpy(values.reshape(dims)))
    return model


def save_model(model: Model, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(model_to_bytes(model))
    logger.debug(f"Saved model checkpoint to {path}")
    return path


def load_model(path: Path) -> Model:
    reader = read_bytes(path)
    model = _decode_model(reader)
    reader.expect_end()
    return model
