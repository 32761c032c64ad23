"""Small encoder-decoder segmentation network, mean teacher and checkpoints.

The network is the ``ModelState``: an ``nn.Module`` whose named parameters
carry the weights and whose ``arch`` attribute describes its shape.  Images
enter as H x W x C (or N x H x W x C) arrays; outputs come back channel-last.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from idm import IGNORE_INDEX
from idm.errors import ContractError

CHECKPOINT_MAGIC = b"IDMCKPT1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Arch:
    in_channels: int = 3
    widths: tuple[int, int, int] = (16, 32, 64)
    feature_dim: int = 32
    num_classes: int = 8

    @classmethod
    def from_dict(cls, d: dict) -> "Arch":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


def _block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.ReLU(inplace=True),
    )


class SegNet(nn.Module):
    """3-level U-Net style network with a feature head and a 1x1 classifier.

    No normalization layers: instance/group statistics would cancel exactly the
    per-channel shifts that define the domain gap.
    """

    # parameter-name prefixes of the encoder; everything else is decoder
    ENCODER_PREFIXES = ("enc1.", "enc2.", "enc3.")

    def __init__(self, arch: Arch):
        super().__init__()
        w1, w2, w3 = arch.widths
        self.arch = arch
        self.enc1 = _block(arch.in_channels, w1)
        self.enc2 = _block(w1, w2)
        self.enc3 = _block(w2, w3)
        self.dec2 = nn.Sequential(nn.Conv2d(w3 + w2, w2, 3, padding=1), nn.ReLU(inplace=True))
        self.dec1 = nn.Sequential(nn.Conv2d(w2 + w1, w2, 3, padding=1), nn.ReLU(inplace=True))
        self.feat = nn.Conv2d(w2, arch.feature_dim, 1)
        self.classifier = nn.Conv2d(arch.feature_dim, arch.num_classes, 1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """NCHW image -> (logits N x C x H x W, features N x D x H x W)."""
        h, w = x.shape[-2:]
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2, ceil_mode=True))
        e3 = self.enc3(F.max_pool2d(e2, 2, ceil_mode=True))
        u2 = F.interpolate(e3, size=e2.shape[-2:], mode="nearest")
        d2 = self.dec2(torch.cat([u2, e2], dim=1))
        u1 = F.interpolate(d2, size=(h, w), mode="nearest")
        d1 = self.dec1(torch.cat([u1, e1], dim=1))
        features = F.relu(self.feat(d1))
        return self.classifier(features), features

    def param_groups(self) -> tuple[list[nn.Parameter], list[nn.Parameter]]:
        enc, dec = [], []
        for name, p in self.named_parameters():
            (enc if name.startswith(self.ENCODER_PREFIXES) else dec).append(p)
        return enc, dec


ModelState = SegNet


def init_model(arch: Arch = Arch(), seed: int = 0, dtype: torch.dtype = torch.float32) -> SegNet:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = SegNet(arch)
    return model.to(dtype)


def zero_classifier_(model: SegNet) -> SegNet:
    with torch.no_grad():
        model.classifier.weight.zero_()
        model.classifier.bias.zero_()
    return model


@dataclass
class ForwardOutput:
    logits: torch.Tensor  # [N x] H x W x C
    probs: torch.Tensor  # [N x] H x W x C
    features: torch.Tensor  # [N x] H x W x D


def to_nchw(image, model: SegNet) -> tuple[torch.Tensor, bool]:
    """Convert an H x W x C / N x H x W x C array to an NCHW tensor in the model dtype."""
    x = torch.as_tensor(np.asarray(image) if not torch.is_tensor(image) else image)
    single = x.ndim == 3
    if single:
        x = x.unsqueeze(0)
    if x.ndim != 4:
        raise ContractError(f"expected H x W x C or N x H x W x C image, got shape {tuple(x.shape)}")
    if x.shape[-1] != model.arch.in_channels:
        raise ContractError(
            f"image has {x.shape[-1]} channels, model expects {model.arch.in_channels}"
        )
    dtype = next(model.parameters()).dtype
    return x.permute(0, 3, 1, 2).to(dtype).contiguous(), single


def forward(state: SegNet, image) -> ForwardOutput:
    x, single = to_nchw(image, state)
    logits, features = state(x)
    logits = logits.permute(0, 2, 3, 1)
    features = features.permute(0, 2, 3, 1)
    probs = torch.softmax(logits, dim=-1)
    if single:
        return ForwardOutput(logits[0], probs[0], features[0])
    return ForwardOutput(logits, probs, features)


def backward(state: SegNet, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """Gradient of a scalar ``loss`` w.r.t. every named parameter (zeros where unused)."""
    if not torch.is_tensor(loss) or loss.numel() != 1:
        raise ContractError("backward needs a scalar loss tensor")
    names, params = zip(*state.named_parameters())
    if not loss.requires_grad:
        return {n: torch.zeros_like(p) for n, p in zip(names, params)}
    grads = torch.autograd.grad(loss.reshape(()), params, allow_unused=True)
    return {
        n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, params, grads)
    }


@dataclass
class TeacherState:
    model: SegNet
    alpha: float = 0.999


def make_teacher(student: SegNet, alpha: float = 0.999) -> TeacherState:
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    return TeacherState(model=teacher, alpha=alpha)


def _check_schema(a: SegNet, b: SegNet) -> None:
    sa = {n: tuple(p.shape) for n, p in a.named_parameters()}
    sb = {n: tuple(p.shape) for n, p in b.named_parameters()}
    if sa != sb:
        raise ContractError("teacher and student parameter schemas differ")


@torch.no_grad()
def ema_update(teacher: TeacherState, student: SegNet, alpha: float | None = None) -> TeacherState:
    """In-place ``t <- alpha * t + (1 - alpha) * s`` for every parameter.

    Computed as a lerp, so a teacher equal to its student stays bit-identical.
    """
    alpha = teacher.alpha if alpha is None else alpha
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must be in [0, 1], got {alpha}")
    _check_schema(teacher.model, student)
    for t, s in zip(teacher.model.parameters(), student.parameters()):
        t.lerp_(s.detach(), 1.0 - alpha)
    return teacher


@torch.no_grad()
def pseudo_label(teacher: TeacherState | SegNet, image, threshold: float | None = None) -> np.ndarray:
    """Argmax of the teacher's probabilities (first index wins ties).

    Pixels whose top probability is below ``threshold`` get IGNORE_INDEX.
    """
    model = teacher.model if isinstance(teacher, TeacherState) else teacher
    probs = forward(model, image).probs.cpu().numpy()
    label = np.argmax(probs, axis=-1).astype(np.int64)
    if threshold is not None:
        label[probs.max(axis=-1) < threshold] = IGNORE_INDEX
    return label


@torch.no_grad()
def predict(model: SegNet, images, batch_size: int = 32) -> np.ndarray:
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    preds = []
    for i in range(0, len(images), batch_size):
        logits = forward(model, images[i : i + batch_size]).logits
        preds.append(logits.argmax(dim=-1).cpu().numpy())
    out = np.concatenate(preds).astype(np.int64)
    return out[0] if single else out


def parameters_equal(a: SegNet, b: SegNet) -> bool:
    return all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))


# ---------------------------------------------------------------------------
# checkpoint: 8-byte magic, u32 header length, JSON header, raw <f4 arrays


def save_checkpoint(model: SegNet, path, extra: dict | None = None) -> Path:
    path = Path(path)
    arrays = []
    offset = 0
    blobs = []
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        blobs.append(arr.tobytes(order="C"))
        arrays.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
    header = {
        "format_version": CHECKPOINT_VERSION,
        "arch": asdict(model.arch),
        "num_classes": model.arch.num_classes,
        "feature_dim": model.arch.feature_dim,
        "dtype": "<f4",
        "arrays": arrays,
        "extra": extra or {},
    }
    raw = json.dumps(header).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)
    return path


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(8) != CHECKPOINT_MAGIC:
            raise ContractError(f"{path} is not an idm checkpoint")
        (n,) = struct.unpack("<I", fh.read(4))
        return json.loads(fh.read(n))


def load_checkpoint(path) -> SegNet:
    with open(path, "rb") as fh:
        if fh.read(8) != CHECKPOINT_MAGIC:
            raise ContractError(f"{path} is not an idm checkpoint")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n))
        payload = fh.read()
    if header["format_version"] != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {header['format_version']}")
    model = SegNet(Arch.from_dict(header["arch"]))
    state = {}
    for entry in header["arrays"]:
        buf = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(buf, dtype="<f4").reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    return model
