"""Backbones, the two-stream gaze network, its ablation variants and checkpoints."""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fusion import Additive, ConcatResidual, TransferFunction
from .heatmap import N_LANDMARKS
from .nncore import (
    BatchNorm,
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    MaxPool2,
    Module,
    ReLU,
    ResidualBlock,
    Sequential,
    ShapeError,
    finite_difference_check,
)

VARIANTS = ("FLAME", "F_AO", "F_AF", "F_B", "DENSE_FUSION")
RESOLUTIONS = (120, 60, 30)
PRESETS = {
    "paper": dict(
        channels=(64, 128, 256),
        head_widths=(512, 512),
        coord_first=1024,
        coord_widths=(1024, 512, 256),
    ),
    "tiny": dict(
        channels=(8, 16, 32),
        head_widths=(64, 64),
        coord_first=64,
        coord_widths=(64, 32, 32),
    ),
}


OUT_INIT_SCALE = 0.01


class ConfigError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class ModelSpec:
    variant: str = "FLAME"
    input_resolution: int = 120
    preset: str = "paper"
    channels: tuple = (64, 128, 256)
    head_widths: tuple = (512, 512)
    dropout: float = 0.2
    heatmap_scale: float = 1.0
    hybrid_width: int | None = None
    mmtm_z_activation: str = "relu"
    zero_excitation: bool = False
    coord_first: int = 1024
    coord_widths: tuple = (1024, 512, 256)
    coord_layers_per_module: int = 4
    precision: str = "float32"
    seed: int = 0

    @classmethod
    def from_preset(cls, preset: str = "paper", **overrides) -> "ModelSpec":
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        kw = dict(PRESETS[preset], preset=preset)
        kw.update(overrides)
        return cls(**kw).validated()

    @property
    def dtype(self):
        return np.dtype(self.precision)

    @property
    def two_stream(self) -> bool:
        return self.variant in ("FLAME", "F_AO", "F_AF")

    @property
    def final_width(self) -> int:
        if self.variant in ("FLAME", "F_AO"):
            return self.hybrid_width or self.channels[-1]
        return self.channels[-1]

    def validated(self) -> "ModelSpec":
        self.channels = tuple(int(c) for c in self.channels)
        self.head_widths = tuple(int(c) for c in self.head_widths)
        self.coord_widths = tuple(int(c) for c in self.coord_widths)
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if len(self.channels) != 3 or min(self.channels) < 1:
            raise ConfigError("channels must list three positive widths")
        if self.input_resolution < 16:
            raise ConfigError("input_resolution must be at least 16 pixels")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")
        if self.mmtm_z_activation not in ("relu", "none"):
            raise ConfigError("mmtm_z_activation must be relu or none")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown ModelSpec keys: {sorted(unknown)}")
        return cls(**d).validated()


def stage_shapes(resolution: int, channels) -> list[tuple[int, int, int]]:
    """Spatial shape after the stem and after each of the three modules."""
    side = resolution // 2
    shapes = [(side, side, channels[0])]
    for c in channels:
        side //= 2
        shapes.append((side, side, c))
    return shapes


def head_input_width(spec: ModelSpec) -> int:
    h, w, _ = stage_shapes(spec.input_resolution, spec.channels)[-1]
    width = h * w * spec.final_width + 2
    if spec.variant == "DENSE_FUSION":
        width += spec.coord_widths[-1]
    return width


class Backbone(Module):
    """3x3 conv stem with BN, ReLU and 2x2 pooling, then three modules of
    two residual blocks and a 2x2 pool each."""

    def __init__(self, in_channels, channels, rng):
        super().__init__()
        c0 = channels[0]
        self.in_channels = in_channels
        self.add(
            "stem",
            Sequential(
                ("conv", Conv2d(in_channels, c0, 3, bias=False, rng=rng)),
                ("bn", BatchNorm(c0)),
                ("relu", ReLU()),
                ("pool", MaxPool2()),
            ),
        )
        prev = c0
        for i, c in enumerate(channels, start=1):
            self.add(
                f"module{i}",
                Sequential(
                    ("block1", ResidualBlock(prev, c, rng=rng)),
                    ("block2", ResidualBlock(c, c, rng=rng)),
                    ("pool", MaxPool2()),
                ),
            )
            prev = c

    @property
    def stem_conv(self) -> Conv2d:
        return self.children["stem"].children["conv"]

    def stages(self):
        return [self.children[k] for k in ("stem", "module1", "module2", "module3")]

    def forward(self, x, train=False):
        feats = []
        for stage in self.stages():
            x = stage.forward(x, train)
            feats.append(x)
        self._feats = feats
        return x

    def backward(self, dout):
        for stage in reversed(self.stages()):
            dout = stage.backward(dout)
        return dout


def build_backbone(spec: ModelSpec, in_channels: int = 3, rng=None) -> Backbone:
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    return Backbone(in_channels, spec.channels, rng).astype(spec.dtype)


class CoordBranch(Module):
    """Fully connected branch over the 56 absolute landmark coordinates."""

    def __init__(self, first, widths, per_module, rng):
        super().__init__()
        layers = [("fc0", Dense(2 * N_LANDMARKS, first, rng=rng)), ("bn0", BatchNorm(first)), ("relu0", ReLU())]
        prev, j = first, 1
        for width in widths:
            for _ in range(per_module):
                layers += [
                    (f"fc{j}", Dense(prev, width, rng=rng)),
                    (f"bn{j}", BatchNorm(width)),
                    (f"relu{j}", ReLU()),
                ]
                prev, j = width, j + 1
        self.add("net", Sequential(*layers))
        self.out_width = prev

    def forward(self, coords, train=False):
        return self.children["net"].forward(coords.reshape(coords.shape[0], -1), train)

    def backward(self, dout):
        return self.children["net"].backward(dout)


class GazeHead(Module):
    def __init__(self, din, widths, dropout, rng, seed):
        super().__init__()
        layers = []
        prev = din
        for i, w in enumerate(widths, start=1):
            layers += [
                (f"fc{i}", Dense(prev, w, rng=rng)),
                (f"relu{i}", ReLU()),
                (f"drop{i}", Dropout(dropout, seed=seed + i)),
            ]
            prev = w
        # Start near the straight-ahead direction: large initial angles wrap
        # around the sphere and leave the vector loss on a flat plateau.
        layers.append(("out", Dense(prev, 2, rng=rng, init_scale=OUT_INIT_SCALE)))
        self.add("net", Sequential(*layers))

    def forward(self, x, train=False):
        return self.children["net"].forward(x, train)

    def backward(self, dout):
        return self.children["net"].backward(dout)


def _check_finite(x, where):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite activations after {where}")


class GazeNet(Module):
    """Every network variant behind one call signature.

    ``forward(rgb, heatmap, pose, landmarks)`` returns (N, 2) pitch/yaw.
    Variants that do not consume an input simply ignore it.
    """

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec.validated()
        rng = np.random.default_rng(spec.seed)
        ch = spec.channels
        self.add("rgb", Backbone(3, ch, rng))
        if spec.two_stream:
            self.add("hm", Backbone(N_LANDMARKS, ch, rng))
        if spec.variant == "FLAME":
            self.add(
                "transfer",
                TransferFunction((ch[1], ch[2]), spec.mmtm_z_activation, spec.zero_excitation, rng),
            )
        if spec.variant in ("FLAME", "F_AO"):
            self.add("aggregate", ConcatResidual(ch[2], ch[2], spec.final_width, rng))
        elif spec.variant == "F_AF":
            self.add("aggregate", Additive())
        if spec.variant == "DENSE_FUSION":
            self.add("coords", CoordBranch(spec.coord_first, spec.coord_widths, spec.coord_layers_per_module, rng))
        self.add("flatten", Flatten())
        self.add("head", GazeHead(head_input_width(spec), spec.head_widths, spec.dropout, rng, spec.seed))
        self.astype(spec.dtype)
        self.set_input_grads(False)

    def set_input_grads(self, enabled: bool) -> None:
        """Stem convolutions skip the input gradient unless asked for it."""
        self.input_grads = enabled
        for name in ("rgb", "hm"):
            if name in self.children:
                self.children[name].stem_conv.need_input_grad = enabled

    def forward(self, rgb, heatmap=None, pose=None, landmarks=None, train=False):
        spec, c = self.spec, self.children
        dt = spec.dtype
        rgb = np.asarray(rgb, dtype=dt)
        n = rgb.shape[0]
        res = spec.input_resolution
        if rgb.shape[1:] != (res, res, 3):
            raise ShapeError(f"rgb batch must be N x {res} x {res} x 3, got {rgb.shape}")
        pose = np.asarray(pose, dtype=dt)
        if pose.shape != (n, 2):
            raise ShapeError(f"head pose must be N x 2, got {pose.shape}")
        rb = c["rgb"].stages()
        if spec.two_stream:
            heatmap = np.asarray(heatmap, dtype=dt)
            if heatmap.shape != (n, res, res, N_LANDMARKS):
                raise ShapeError(f"heatmap batch must be N x {res} x {res} x 28, got {heatmap.shape}")
            hb = c["hm"].stages()
            r, h = rgb, heatmap
            for i in range(4):
                r = rb[i].forward(r, train)
                h = hb[i].forward(h, train)
                if i == 2 and "transfer" in c:
                    r, h = c["transfer"].children["mmtm3"].forward(r, h, train)
                if i == 3 and "transfer" in c:
                    r, h = c["transfer"].children["mmtm4"].forward(r, h, train)
                _check_finite(r, f"rgb stage {i}")
                _check_finite(h, f"heatmap stage {i}")
            f = c["aggregate"].forward(r, h, train)
        else:
            f = rgb
            for i in range(4):
                f = rb[i].forward(f, train)
                _check_finite(f, f"rgb stage {i}")
        parts = [c["flatten"].forward(f, train)]
        if spec.variant == "DENSE_FUSION":
            lm = np.asarray(landmarks, dtype=dt).reshape(n, -1)
            if lm.shape[1] != 2 * N_LANDMARKS:
                raise ShapeError(f"landmarks must hold 56 coordinates per sample, got {lm.shape}")
            parts.append(c["coords"].forward(lm, train))
        parts.append(pose)
        self._widths = [p.shape[1] for p in parts]
        out = c["head"].forward(np.concatenate(parts, axis=1), train)
        _check_finite(out, "regression head")
        return out

    def backward(self, dout):
        """Backpropagate d loss / d (pitch, yaw); returns input gradients."""
        spec, c = self.spec, self.children
        d = c["head"].backward(np.asarray(dout, dtype=spec.dtype))
        splits = np.cumsum(self._widths)[:-1]
        pieces = np.split(d, splits, axis=1)
        dflat, dpose = pieces[0], pieces[-1]
        dlm = None
        if spec.variant == "DENSE_FUSION":
            dlm = c["coords"].backward(pieces[1])
        df = c["flatten"].backward(dflat)
        rb = c["rgb"].stages()
        if spec.two_stream:
            dr, dh = c["aggregate"].backward(df)
            hb = c["hm"].stages()
            for i in range(3, -1, -1):
                if i == 3 and "transfer" in c:
                    dr, dh = c["transfer"].children["mmtm4"].backward((dr, dh))
                if i == 2 and "transfer" in c:
                    dr, dh = c["transfer"].children["mmtm3"].backward((dr, dh))
                dr = rb[i].backward(dr)
                dh = hb[i].backward(dh)
            return dr, dh, dpose, dlm
        dr = df
        for i in range(3, -1, -1):
            dr = rb[i].backward(dr)
        return dr, None, dpose, dlm

    def predict(self, rgb, heatmap=None, pose=None, landmarks=None, batch_size=32):
        outs = []
        for s in range(0, len(rgb), batch_size):
            sl = slice(s, s + batch_size)
            outs.append(
                self.forward(
                    rgb[sl],
                    None if heatmap is None else heatmap[sl],
                    pose[sl],
                    None if landmarks is None else landmarks[sl],
                    train=False,
                )
            )
        return np.concatenate(outs, axis=0).astype(np.float64)


def build_model(spec: ModelSpec) -> GazeNet:
    return GazeNet(spec)


def flame_forward(model: GazeNet, rgb, hm, pose, train=False):
    return model.forward(rgb, hm, pose, train=train)


def dense_fusion_forward(model: GazeNet, rgb, landmarks, pose, train=False):
    if model.spec.variant != "DENSE_FUSION":
        raise ConfigError("dense_fusion_forward needs a DENSE_FUSION model")
    return model.forward(rgb, None, pose, landmarks, train=train)


def check_model_gradients(
    variant: str,
    preset: str = "tiny",
    resolution: int = 30,
    batch: int = 4,
    seed: int = 0,
    max_per_array: int = 4,
):
    """Finite-difference check of a whole float64 network under the vector loss.

    Covers every parameter array and all four inputs. Returns the
    :class:`~flamegaze.nncore.GradCheckResult`.
    """
    from .geometry import vector_loss_grad_angles

    spec = ModelSpec.from_preset(preset, variant=variant, input_resolution=resolution, precision="float64", seed=seed)
    model = GazeNet(spec)
    model.set_input_grads(True)
    rng = np.random.default_rng([seed, 17])
    inputs = (
        rng.random((batch, resolution, resolution, 3)),
        rng.random((batch, resolution, resolution, N_LANDMARKS)) * 0.16,
        rng.normal(size=(batch, 2)) * 0.2,
        rng.random((batch, N_LANDMARKS, 2)) * resolution,
    )
    target = rng.normal(size=(batch, 2)) * 0.3
    state = {}

    def fwd(xs, train):
        loss, grad = vector_loss_grad_angles(model.forward(*xs, train=train), target)
        state["grad"] = grad
        return loss

    def bwd(d):
        return model.backward(state["grad"] * d)

    return finite_difference_check(model, inputs, seed=seed, forward=fwd, backward=bwd, max_per_array=max_per_array)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"FLAMEGAZE-CKPT\n"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    spec: ModelSpec
    arrays: dict[str, np.ndarray]
    epoch: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: GazeNet, optimizer=None, epoch=0, seed=0, meta=None) -> "Checkpoint":
        arrays = {k: v.copy() for k, v in model.state_dict().items()}
        if optimizer is not None:
            arrays.update(optimizer.state_arrays())
            meta = dict(meta or {}, optimizer=optimizer.config())
        return cls(model.spec, arrays, epoch, seed, dict(meta or {}))

    def build(self) -> GazeNet:
        model = GazeNet(self.spec)
        model.load_state_dict({k: v for k, v in self.arrays.items() if k.startswith(("param:", "buffer:"))})
        return model

    def optimizer_arrays(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if k.startswith("adam:")}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write a self-describing container: magic, header length, JSON header, raw arrays.

    Header keys are sorted and arrays are laid out in sorted-name order so
    identical content always yields identical bytes.
    """
    table, blobs, offset = [], [], 0
    for name in sorted(ckpt.arrays):
        arr = np.ascontiguousarray(ckpt.arrays[name])
        dt = arr.dtype.newbyteorder("<")
        raw = arr.astype(dt, copy=False).tobytes()
        table.append({"name": name, "dtype": dt.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": CKPT_VERSION,
        "spec": ckpt.spec.to_dict(),
        "epoch": int(ckpt.epoch),
        "seed": int(ckpt.seed),
        "meta": ckpt.meta,
        "arrays": table,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(Path(path), "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not a flamegaze checkpoint")
    pos = len(CKPT_MAGIC)
    (hlen,) = struct.unpack("<Q", data[pos : pos + 8])
    pos += 8
    header = json.loads(data[pos : pos + hlen].decode())
    pos += hlen
    if header.get("version") != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    arrays = {}
    for entry in header["arrays"]:
        start = pos + entry["offset"]
        buf = data[start : start + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    spec = ModelSpec.from_dict(header["spec"])
    return Checkpoint(spec, arrays, header["epoch"], header["seed"], header["meta"])
