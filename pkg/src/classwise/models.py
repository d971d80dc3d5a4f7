"""Fixed classifier architectures, deterministic init, checkpoint I/O.

Three architectures cover every experiment:

* ``linear``  - flatten -> affine(C)
* ``mlp``     - flatten -> affine(hidden) -> relu -> affine(C)
* ``cnn4``    - conv(c1, k) -> relu -> pool -> conv(c2, k) -> relu -> pool
                -> flatten -> affine(fc) -> relu -> affine(C)

The cnn4 widths (16/32 filters, kernel 5, 100 hidden units) are stand-in
constants for "a small four-layer digit CNN" and can be overridden per spec
field; nothing else in the codebase assumes them.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GradientSet, Tensor

CHECKPOINT_MAGIC = b"CLASSWISE-CKPT\x00\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str                      # linear | mlp | cnn4
    input_shape: tuple[int, int, int]  # (channels, height, width)
    class_count: int
    hidden: int = 100              # mlp only
    conv_channels: tuple[int, int] = (16, 32)
    kernel: int = 5
    fc_width: int = 100

    def __post_init__(self):
        if self.name not in ("linear", "mlp", "cnn4"):
            raise ValueError(f"unknown architecture {self.name!r}")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise ValueError(f"bad input shape {self.input_shape}")
        if self.name == "cnn4":
            for side in self.input_shape[1:]:
                side = side - self.kernel + 1
                if side < 2 or side % 2:
                    raise ValueError(
                        f"cnn4: input {self.input_shape} incompatible with kernel {self.kernel}"
                    )
                side = side // 2 - self.kernel + 1
                if side < 2 or side % 2:
                    raise ValueError(
                        f"cnn4: input {self.input_shape} incompatible with kernel {self.kernel}"
                    )

    @property
    def flat_dim(self) -> int:
        c, h, w = self.input_shape
        return c * h * w

    def arch_id(self) -> str:
        return json.dumps(
            {
                "name": self.name,
                "input_shape": list(self.input_shape),
                "class_count": self.class_count,
                "hidden": self.hidden,
                "conv_channels": list(self.conv_channels),
                "kernel": self.kernel,
                "fc_width": self.fc_width,
            },
            sort_keys=True,
        )

    @staticmethod
    def from_arch_id(s: str) -> "ArchitectureSpec":
        d = json.loads(s)
        return ArchitectureSpec(
            name=d["name"],
            input_shape=tuple(d["input_shape"]),
            class_count=d["class_count"],
            hidden=d["hidden"],
            conv_channels=tuple(d["conv_channels"]),
            kernel=d["kernel"],
            fc_width=d["fc_width"],
        )


def _layer_shapes(spec: ArchitectureSpec) -> list[tuple[str, tuple, int]]:
    """Ordered (param name, shape, fan_in) triples; defines registry order."""
    c, h, w = spec.input_shape
    k = spec.kernel
    if spec.name == "linear":
        return [("fc1.w", (spec.flat_dim, spec.class_count), spec.flat_dim),
                ("fc1.b", (spec.class_count,), spec.flat_dim)]
    if spec.name == "mlp":
        return [
            ("fc1.w", (spec.flat_dim, spec.hidden), spec.flat_dim),
            ("fc1.b", (spec.hidden,), spec.flat_dim),
            ("fc2.w", (spec.hidden, spec.class_count), spec.hidden),
            ("fc2.b", (spec.class_count,), spec.hidden),
        ]
    c1, c2 = spec.conv_channels
    h1, w1 = (h - k + 1) // 2, (w - k + 1) // 2
    h2, w2 = (h1 - k + 1) // 2, (w1 - k + 1) // 2
    flat = c2 * h2 * w2
    return [
        ("conv1.w", (c1, c, k, k), c * k * k),
        ("conv1.b", (c1,), c * k * k),
        ("conv2.w", (c2, c1, k, k), c1 * k * k),
        ("conv2.b", (c2,), c1 * k * k),
        ("fc1.w", (flat, spec.fc_width), flat),
        ("fc1.b", (spec.fc_width,), flat),
        ("fc2.w", (spec.fc_width, spec.class_count), spec.fc_width),
        ("fc2.b", (spec.class_count,), spec.fc_width),
    ]


class Classifier:
    """An architecture plus its parameter tensors.

    Parameters are leaves of the autodiff tape (``requires_grad=True``).
    The instance is treated as an immutable snapshot everywhere except the
    training loop, which owns its copy.
    """

    def __init__(self, spec: ArchitectureSpec, params: dict[str, Tensor],
                 epoch: int = 0, seed: int = 0):
        self.spec = spec
        self.params = params
        self.epoch = epoch
        self.seed = seed

    def logits(self, x) -> Tensor:
        """Forward pass; `x` is (N, channels, H, W) as ndarray or Tensor."""
        t = ad.as_tensor(x)
        if t.data.ndim != 4 or t.data.shape[1:] != self.spec.input_shape:
            raise ValueError(
                f"evaluate: input shape {t.data.shape} does not match "
                f"(N, {', '.join(map(str, self.spec.input_shape))})"
            )
        p = self.params
        if self.spec.name == "linear":
            return ad.linear(ad.flatten(t), p["fc1.w"], p["fc1.b"])
        if self.spec.name == "mlp":
            hid = ad.relu(ad.linear(ad.flatten(t), p["fc1.w"], p["fc1.b"]))
            return ad.linear(hid, p["fc2.w"], p["fc2.b"])
        a = ad.max_pool2(ad.relu(ad.conv2d(t, p["conv1.w"], p["conv1.b"])))
        a = ad.max_pool2(ad.relu(ad.conv2d(a, p["conv2.w"], p["conv2.b"])))
        a = ad.relu(ad.linear(ad.flatten(a), p["fc1.w"], p["fc1.b"]))
        return ad.linear(a, p["fc2.w"], p["fc2.b"])

    def evaluate(self, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
        """Logits for a batch of images, chunked to bound memory."""
        images = np.asarray(images)
        out = np.empty((images.shape[0], self.spec.class_count), dtype=self.dtype)
        for lo in range(0, images.shape[0], batch_size):
            out[lo:lo + batch_size] = self.logits(images[lo:lo + batch_size]).data
        return out

    def probabilities(self, images: np.ndarray, inverse_temperature: float = 1.0,
                      batch_size: int = 512) -> np.ndarray:
        logits = self.evaluate(images, batch_size=batch_size)
        return ad.softmax_temperature(Tensor(logits), inverse_temperature).data

    def predict(self, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
        return self.evaluate(images, batch_size=batch_size).argmax(axis=1)

    @property
    def dtype(self):
        return next(iter(self.params.values())).data.dtype

    def copy(self) -> "Classifier":
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return Classifier(self.spec, params, epoch=self.epoch, seed=self.seed)

    def astype(self, dtype) -> "Classifier":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        return Classifier(self.spec, params, epoch=self.epoch, seed=self.seed)

    def fingerprint(self) -> str:
        """Stable id of (architecture, parameter values)."""
        h = hashlib.sha256(self.spec.arch_id().encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data, dtype="<f4").tobytes())
        return h.hexdigest()[:16]


def init_model(spec: ArchitectureSpec, seed: int, dtype=np.float32) -> Classifier:
    """Weights uniform in +-sqrt(6/fan_in) per layer, biases zero, seeded."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape, fan_in in _layer_shapes(spec):
        if name.endswith(".b"):
            data = np.zeros(shape, dtype=dtype)
        else:
            limit = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-limit, limit, size=shape).astype(dtype)
        params[name] = Tensor(data, requires_grad=True)
    return Classifier(spec, params, epoch=0, seed=seed)


def evaluate(model: Classifier, images: np.ndarray) -> np.ndarray:
    """Functional alias for Classifier.evaluate."""
    return model.evaluate(images)


def gradients(model: Classifier, images: np.ndarray, labels: np.ndarray,
              inverse_temperature: float = 1.0) -> GradientSet:
    """Gradients of mean cross-entropy loss w.r.t. every parameter and the input."""
    x = Tensor(np.asarray(images, dtype=model.dtype), requires_grad=True)
    probs = ad.softmax_temperature(model.logits(x), inverse_temperature)
    loss = ad.mean(ad.cross_entropy(probs, labels))
    ad.zero_gradients(model.params.values())
    ad.backward(loss)
    return GradientSet(
        parameters={k: v.grad for k, v in model.params.items()},
        input=x.grad,
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: Classifier, path) -> None:
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    arch = model.spec.arch_id().encode()
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += struct.pack("<I", len(arch)) + arch
    blob += struct.pack("<IqI", model.spec.class_count, model.seed, model.epoch)
    blob += struct.pack("<I", len(model.params))
    for name, tensor in model.params.items():
        nb = name.encode()
        blob += struct.pack("<I", len(nb)) + nb
        data = np.ascontiguousarray(tensor.data, dtype="<f4")
        blob += struct.pack("<I", data.ndim)
        blob += struct.pack(f"<{data.ndim}I", *data.shape)
        blob += data.tobytes()
    from .fileio import atomic_write_bytes
    atomic_write_bytes(path, bytes(blob))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise ValueError(
                f"checkpoint: truncated at byte {len(self.buf)} (needed {self.off + n})"
            )
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected_spec: ArchitectureSpec | None = None) -> Classifier:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise ValueError(f"checkpoint: bad magic in {path}")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint: unsupported format version {version}")
    (arch_len,) = r.unpack("<I")
    spec = ArchitectureSpec.from_arch_id(r.take(arch_len).decode())
    class_count, seed, epoch = r.unpack("<IqI")
    if class_count != spec.class_count:
        raise ValueError("checkpoint: header class count disagrees with architecture")
    if expected_spec is not None and spec != expected_spec:
        raise ValueError(
            f"checkpoint: architecture mismatch (file: {spec.name}/{spec.input_shape}, "
            f"expected: {expected_spec.name}/{expected_spec.input_shape})"
        )
    (nparams,) = r.unpack("<I")
    params: dict[str, Tensor] = {}
    for _ in range(nparams):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).copy()
        params[name] = Tensor(data, requires_grad=True)
    expected_names = [n for n, _, _ in _layer_shapes(spec)]
    if list(params) != expected_names:
        raise ValueError("checkpoint: parameter registry does not match architecture")
    return Classifier(spec, params, epoch=epoch, seed=seed)
