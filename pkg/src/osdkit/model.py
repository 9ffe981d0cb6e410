"""Three-class CRNN: three conv blocks, mel averaging, two bi-GRUs, frame head."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from osdkit import nn

CHECKPOINT_MAGIC = b"OSD3"
CHECKPOINT_VERSION = 1
_END_MARKER = b"END3"


class CheckpointError(Exception):
    """Unreadable, truncated or wrong-version checkpoint file."""


class ConfigMismatchError(CheckpointError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    seq_len: int = 150
    mel_bins: int = 128
    conv_channels: tuple = (128, 128, 128)
    pools: tuple = ((2, 1), (3, 2), (1, 2))
    gru_hidden: int = 256
    gru_layers: int = 2
    head_hidden: int = 256
    num_classes: int = 3
    dropout: float = 0.5
    se_reduction: int = 16

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "pools", tuple(tuple(int(v) for v in p) for p in self.pools))

    @property
    def time_factor(self) -> int:
        return int(np.prod([p[0] for p in self.pools]))

    @property
    def mel_factor(self) -> int:
        return int(np.prod([p[1] for p in self.pools]))

    @property
    def out_frames(self) -> int:
        return self.seq_len // self.time_factor

    def validate(self):
        if len(self.conv_channels) != len(self.pools):
            raise ValueError("need one pool size per conv block")
        if self.seq_len % self.time_factor or self.mel_bins % self.mel_factor:
            raise ValueError(
                f"pools {self.pools} do not divide input ({self.seq_len}, {self.mel_bins})"
            )
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.gru_layers < 1:
            raise ValueError("gru_layers must be at least 1")
        for c in self.conv_channels:
            if c // self.se_reduction < 1:
                raise ValueError(f"{c} channels leave an empty SE bottleneck")

    def to_dict(self):
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["pools"] = [list(p) for p in self.pools]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class CRNN:
    """The overlapped-speech CRNN with named parameters and BN buffers."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float64):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        blocks = []
        cin = 1
        for b, (cout, pool) in enumerate(zip(cfg.conv_channels, cfg.pools), start=1):
            blocks.append(
                (
                    f"block{b}",
                    nn.Sequential(
                        [
                            ("conv1", nn.Conv2d(cin, cout, rng)),
                            ("bn1", nn.BatchNorm(cout)),
                            ("relu1", nn.ReLU()),
                            ("conv2", nn.Conv2d(cout, cout, rng)),
                            ("bn2", nn.BatchNorm(cout)),
                            ("relu2", nn.ReLU()),
                            ("se", nn.SqueezeExcite(cout, cfg.se_reduction, rng)),
                            ("pool", nn.AvgPool2d(pool)),
                        ]
                    ),
                )
            )
            cin = cout
        self.cnn = nn.Sequential(blocks)
        self.average = nn.MelMean()
        grus = []
        d = cin
        for g in range(1, cfg.gru_layers + 1):
            grus.append((f"gru{g}", nn.BiGRU(d, cfg.gru_hidden, rng)))
            d = 2 * cfg.gru_hidden
        self.rnn = nn.Sequential(grus)
        self.head = nn.Sequential(
            [
                ("fc", nn.Linear(d, cfg.head_hidden, rng)),
                ("dropout", nn.Dropout(cfg.dropout, np.random.default_rng([seed, 1]))),
                ("act", nn.LeakyReLU(0.01)),
                ("out", nn.Linear(cfg.head_hidden, cfg.num_classes, rng)),
            ]
        )
        self.stages = [("cnn", self.cnn), ("average", self.average), ("rnn", self.rnn), ("head", self.head)]
        if self.dtype != np.float64:
            self.astype(self.dtype)

    def astype(self, dtype):
        """Convert parameters and buffers in place (checkpoints stay float64)."""
        self.dtype = np.dtype(dtype)
        for _, stage in self.stages:
            stage.astype(self.dtype)
        return self

    # parameter bookkeeping -------------------------------------------------

    def _leaves(self):
        def walk(prefix, layer):
            if isinstance(layer, nn.Sequential):
                for name, sub in layer.layers:
                    yield from walk(f"{prefix}{name}.", sub)
            else:
                yield prefix.rstrip("."), layer

        for name, stage in self.stages:
            yield from walk(f"{name}.", stage)

    def parameters(self) -> dict:
        return {f"{path}.{k}": v for path, layer in self._leaves() for k, v in layer.params.items()}

    def buffers(self) -> dict:
        return {f"{path}.{k}": v for path, layer in self._leaves() for k, v in layer.buffers.items()}

    def gradients(self) -> dict:
        return {f"{path}.{k}": v for path, layer in self._leaves() for k, v in layer.grads.items()}

    def state(self) -> dict:
        return {**self.parameters(), **self.buffers()}

    def zero_grad(self):
        for _, layer in self._leaves():
            layer.zero_grad()

    # forward / backward ----------------------------------------------------

    def forward(self, x, train=False, trace=None):
        """(B, seq_len, mel_bins) features -> (B, out_frames, num_classes) logits."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 3 or x.shape[1:] != (self.cfg.seq_len, self.cfg.mel_bins):
            raise ValueError(
                f"expected input (B, {self.cfg.seq_len}, {self.cfg.mel_bins}), got {x.shape}"
            )
        h = x[..., None]
        for name, stage in self.stages:
            h = stage.forward(h, train)
            if trace is not None:
                trace.append((name, h.shape[1:]))
        return h

    def backward(self, dlogits):
        dy = dlogits
        for _, stage in reversed(self.stages):
            dy = stage.backward(dy)
        return dy[..., 0]


def build_model(cfg: ModelConfig | None = None, seed: int = 0, dtype=np.float64) -> CRNN:
    return CRNN(cfg or ModelConfig(), seed, dtype)


def forward(model: CRNN, mel, mode="eval"):
    """Logits for a single (seq_len, mel_bins) window or a batch of them."""
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    mel = np.asarray(mel, dtype=np.float64)
    single = mel.ndim == 2
    out = model.forward(mel[None] if single else mel, train=mode == "train")
    return out[0] if single else out


def downsample_labels(labels, factor=6):
    """Majority class per group of ``factor`` frames, ties to the larger class."""
    labels = np.asarray(labels)
    if labels.shape[-1] % factor:
        raise ValueError(f"label length {labels.shape[-1]} not divisible by {factor}")
    groups = labels.reshape(*labels.shape[:-1], -1, factor)
    n_classes = max(3, int(labels.max(initial=0)) + 1)
    counts = np.stack([(groups == c).sum(axis=-1) for c in range(n_classes)], axis=-1)
    # argmax returns the first maximum; scan from the top class down
    return (n_classes - 1 - np.argmax(counts[..., ::-1], axis=-1)).astype(np.int64)


def collapse_to_binary(labels):
    """Map three-class labels to overlap-vs-rest for the two-class ablation."""
    return (np.asarray(labels) == 2).astype(np.int64)


def train_step(model: CRNN, opt_state: nn.AdamState, batch, labels, class_weights, lr) -> float:
    """One forward/backward/Adam update; returns the loss before the update.

    ``labels`` are per input frame (B, seq_len); they are reduced to the
    model's output rate with :func:`downsample_labels`.
    """
    batch = np.asarray(batch, dtype=model.dtype)
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    labels = np.asarray(labels)
    if model.cfg.num_classes == 2:
        # the two-class ablation is always fed three-class frame labels
        labels = collapse_to_binary(labels)
    target = downsample_labels(labels, model.cfg.time_factor)
    model.zero_grad()
    logits = model.forward(batch, train=True)
    probs = nn.softmax(logits)
    loss = nn.weighted_ce_loss(probs, target, class_weights)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    model.backward(nn.weighted_ce_grad(probs, target, class_weights))
    nn.adam_step(model.parameters(), model.gradients(), opt_state, lr)
    return loss


# checkpoint format -----------------------------------------------------------
#
#   magic "OSD3" | u32 version | u32 len + UTF-8 JSON header | u32 n_tensors
#   per tensor: u16 name len, name, u8 ndim, u32 dims..., float64 LE data
#   "END3" | u32 CRC-32 of everything before the end marker


def _pack_tensor(name, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    nb = name.encode()
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(model: CRNN, opt_state: nn.AdamState | None, path, extra=None) -> None:
    tensors = dict(model.state())
    if opt_state is not None:
        for k, v in opt_state.m.items():
            tensors[f"adam.m/{k}"] = v
        for k, v in opt_state.v.items():
            tensors[f"adam.v/{k}"] = v
    header = {
        "config": model.cfg.to_dict(),
        "adam_step": opt_state.step if opt_state is not None else None,
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    body = bytearray(CHECKPOINT_MAGIC)
    body += struct.pack("<II", CHECKPOINT_VERSION, len(hb)) + hb
    body += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        body += _pack_tensor(name, tensors[name])
    crc = zlib.crc32(bytes(body))
    Path(path).write_bytes(bytes(body) + _END_MARKER + struct.pack("<I", crc))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected_config: ModelConfig | None = None):
    """Load ``(model, adam_state, header)`` from ``path``.

    Raises :class:`ConfigMismatchError` if ``expected_config`` is given and
    differs from the stored configuration.
    """
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not an OSD3 checkpoint (bad magic)")
    if len(data) < 20 or data[-8:-4] != _END_MARKER:
        raise CheckpointError(f"{path}: truncated checkpoint")
    if zlib.crc32(data[:-8]) != struct.unpack("<I", data[-4:])[0]:
        raise CheckpointError(f"{path}: checksum mismatch")
    r = _Reader(data)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    (hlen,) = r.unpack("<I")
    header = json.loads(r.take(hlen).decode())
    cfg = ModelConfig.from_dict(header["config"])
    if expected_config is not None and expected_config != cfg:
        raise ConfigMismatchError(
            f"{path}: checkpoint config {cfg.to_dict()} != requested {expected_config.to_dict()}"
        )
    (n,) = r.unpack("<I")
    tensors = {}
    for _ in range(n):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    end = r.pos
    if r.take(4) != _END_MARKER:
        raise CheckpointError(f"{path}: missing end marker")
    (crc,) = r.unpack("<I")
    if zlib.crc32(data[:end]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch")

    model = CRNN(cfg)
    state = model.state()
    missing = set(state) - set(tensors)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)[:5]}")
    for name, arr in state.items():
        if tensors[name].shape != arr.shape:
            raise ConfigMismatchError(f"{path}: tensor {name} has shape {tensors[name].shape}")
        arr[...] = tensors[name]
    opt = None
    if header.get("adam_step") is not None:
        opt = nn.AdamState(step=int(header["adam_step"]))
        for name, arr in tensors.items():
            if name.startswith("adam.m/"):
                opt.m[name[7:]] = arr.copy()
            elif name.startswith("adam.v/"):
                opt.v[name[7:]] = arr.copy()
    return model, opt, header
