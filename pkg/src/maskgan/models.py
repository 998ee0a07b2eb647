"""The three networks and their plumbing.

* ``MaskNet`` — two stacked bidirectional LSTM layers (200 units per
  direction) over the T x 257 feature matrix, a 400->300 dense layer with a
  leaky rectifier, and a 300->257 dense layer through a learnable sigmoid
  whose output is the T-F mask.  The enhancer and the degenerator are two
  instances of this same architecture (different seeds).
* ``MetricPredictor`` — the (degraded, reference) feature matrices stacked
  as two input channels, four 5x5 convolutions with 15 filters each
  (spectral weight normalization on by default), a mean over the time and
  frequency axes, then dense 15->50->10->1 with no activation on the last
  layer; the output is a single unbounded score prediction.

Both accept any number of frames T without re-initialization; the predictor
needs T >= 5 (its kernel footprint).  Forward passes are deterministic given
parameters and input.  One utterance per forward, no batching.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn.utils import parametrizations

from .errors import CheckpointMismatchError

DEFAULT_FREQ_BINS = 257
LEAKY_SLOPE = 0.01  # one documented constant for every leaky rectifier


@dataclass(frozen=True)
class MaskNetConfig:
    freq_bins: int = DEFAULT_FREQ_BINS
    lstm_units: int = 200
    lstm_layers: int = 2
    dense_units: int = 300
    amplitude: float = 1.2           # learnable-sigmoid output scale
    learnable_amplitude: bool = False
    mask_floor: float = 0.05         # lower clamp against musical noise
    mask_ceiling: float | None = None  # optional upper clamp, off by default
    init_spread: float = 0.0         # output-layer init bound; > 0 makes the
    #                                  initial masks structured instead of flat

    def __post_init__(self):
        if self.amplitude <= 0:
            raise ValueError("amplitude must be positive")
        if self.mask_floor < 0:
            raise ValueError("mask_floor must be >= 0")
        if self.init_spread < 0:
            raise ValueError("init_spread must be >= 0")


@dataclass(frozen=True)
class PredictorConfig:
    freq_bins: int = DEFAULT_FREQ_BINS
    conv_channels: int = 15
    conv_layers: int = 4
    kernel_size: int = 5
    fc_units: tuple = (50, 10)
    spectral_norm: bool = True


class LearnableSigmoid(nn.Module):
    """amplitude / (1 + exp(-slope * x)) with a per-output learnable slope.

    The amplitude (default 1.2) is a fixed buffer unless ``learnable`` is
    set, in which case it becomes a scalar parameter.
    """

    def __init__(self, size: int, amplitude: float = 1.2, learnable: bool = False):
        super().__init__()
        self.slope = nn.Parameter(torch.ones(size))
        if learnable:
            self.amplitude = nn.Parameter(torch.tensor(float(amplitude)))
        else:
            self.register_buffer("amplitude", torch.tensor(float(amplitude)))

    def forward(self, x):
        return self.amplitude * torch.sigmoid(self.slope * x)


def learnable_sigmoid(x, slope, amplitude):
    """Functional form of the activation for scalar/array use."""
    if amplitude <= 0:
        raise ValueError("amplitude must be positive")
    return amplitude / (1.0 + np.exp(-slope * np.asarray(x, dtype=np.float64)))


class MaskNet(nn.Module):
    def __init__(self, config: MaskNetConfig | None = None):
        super().__init__()
        self.config = config or MaskNetConfig()
        c = self.config
        self.blstm = nn.LSTM(
            input_size=c.freq_bins,
            hidden_size=c.lstm_units,
            num_layers=c.lstm_layers,
            bidirectional=True,
            batch_first=True,
        )
        self.dense = nn.Linear(2 * c.lstm_units, c.dense_units)
        self.out = nn.Linear(c.dense_units, c.freq_bins)
        self.activation = LearnableSigmoid(
            c.freq_bins, c.amplitude, c.learnable_amplitude
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """T x freq_bins features -> T x freq_bins mask, floor-clamped."""
        if features.dim() != 2 or features.shape[1] != self.config.freq_bins:
            raise ValueError(
                f"expected (T, {self.config.freq_bins}) features, got {tuple(features.shape)}"
            )
        h, _ = self.blstm(features.unsqueeze(0))
        h = torch.nn.functional.leaky_relu(self.dense(h), LEAKY_SLOPE)
        mask = self.activation(self.out(h)).squeeze(0)
        mask = torch.clamp(mask, min=self.config.mask_floor)
        if self.config.mask_ceiling is not None:
            mask = torch.clamp(mask, max=self.config.mask_ceiling)
        return mask


class MetricPredictor(nn.Module):
    def __init__(self, config: PredictorConfig | None = None):
        super().__init__()
        self.config = config or PredictorConfig()
        c = self.config
        convs = []
        in_ch = 2
        for _ in range(c.conv_layers):
            conv = nn.Conv2d(in_ch, c.conv_channels, c.kernel_size, padding="same")
            if c.spectral_norm:
                conv = parametrizations.spectral_norm(conv)
            convs.append(conv)
            in_ch = c.conv_channels
        self.convs = nn.ModuleList(convs)
        fc = []
        prev = c.conv_channels
        for units in c.fc_units:
            fc.append(nn.Linear(prev, units))
            prev = units
        self.fc = nn.ModuleList(fc)
        self.head = nn.Linear(prev, 1)

    def forward(self, deg_features: torch.Tensor, ref_features: torch.Tensor) -> torch.Tensor:
        """Score prediction for a (degraded, reference) feature pair.

        (T, F) inputs give a scalar; same-length pairs may be stacked as
        (B, T, F) to score several pairs in one pass, giving (B,).
        """
        if deg_features.shape != ref_features.shape:
            raise ValueError(
                f"pair shapes differ: {tuple(deg_features.shape)} vs {tuple(ref_features.shape)}"
            )
        scalar = deg_features.dim() == 2
        if scalar:
            deg_features = deg_features.unsqueeze(0)
            ref_features = ref_features.unsqueeze(0)
        if deg_features.dim() != 3 or deg_features.shape[2] != self.config.freq_bins:
            raise ValueError(
                f"expected (T, {self.config.freq_bins}) features, got shape "
                f"{tuple(deg_features.squeeze(0).shape)}"
            )
        if deg_features.shape[1] < self.config.kernel_size:
            raise ValueError(
                f"need at least {self.config.kernel_size} frames, got {deg_features.shape[1]}"
            )
        h = torch.stack([deg_features, ref_features], dim=1)  # (B, 2, T, F)
        for conv in self.convs:
            h = torch.nn.functional.leaky_relu(conv(h), LEAKY_SLOPE)
        h = h.mean(dim=(2, 3))  # pool time and frequency
        for layer in self.fc:
            h = torch.nn.functional.leaky_relu(layer(h), LEAKY_SLOPE)
        out = self.head(h).squeeze(-1)
        return out.squeeze(0) if scalar else out


# ---------------------------------------------------------------------------
# Deterministic initialization
# ---------------------------------------------------------------------------

def _orthogonal(shape, gen):
    a = torch.randn(shape, generator=gen, dtype=torch.float64)
    q, r = torch.linalg.qr(a)
    q = q * torch.sign(torch.diagonal(r))  # unique orientation
    return q.to(torch.get_default_dtype())


def _uniform_fan_in(tensor, gen):
    fan_in = tensor.shape[1] * (tensor[0, 0].numel() if tensor.dim() > 2 else 1)
    bound = 1.0 / np.sqrt(fan_in)
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=gen)


def _seeded_init(net: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(int(seed))
    head = getattr(net, "head", None)
    mask_out = isinstance(net, MaskNet)
    with torch.no_grad():
        for name, p in net.named_parameters():
            base = name.split(".")[-1]
            if "slope" in name:
                p.fill_(1.0)
            elif name.endswith("amplitude"):
                pass  # constructed with its default value
            elif mask_out and name == "out.weight" and net.config.init_spread > 0:
                # wide uniform init: the first masks are structured and
                # score-diverse instead of flat, which seeds the predictor
                # with real score variance from epoch one; the bound keeps
                # pre-activations within the sigmoid's active zone so every
                # initial mask stays strictly inside (floor, amplitude)
                p.uniform_(-net.config.init_spread, net.config.init_spread,
                           generator=gen)
            elif head is not None and name.startswith("head."):
                # score head starts near a flat 0.5 so early optimizer
                # moments are not poisoned by huge random predictions;
                # weights stay nonzero to keep gradients flowing upstream
                if base == "weight":
                    bound = 0.01 / np.sqrt(p.shape[1])
                    p.uniform_(-bound, bound, generator=gen)
                else:
                    p.fill_(0.5)
            elif "bias" in base:
                p.zero_()
            elif base.startswith("weight_hh"):
                # recurrent kernel: orthogonal per gate block
                hidden = p.shape[1]
                for g in range(p.shape[0] // hidden):
                    p[g * hidden : (g + 1) * hidden].copy_(
                        _orthogonal((hidden, hidden), gen)
                    )
            else:
                _uniform_fan_in(p, gen)


def init_params(kind: str, seed: int, config=None) -> nn.Module:
    """Build a network with deterministic, seed-keyed initialization.

    ``kind`` is "mask_net" or "predictor".  Same (kind, seed, config) gives
    bit-identical parameters.
    """
    with torch.random.fork_rng():
        # spectral-norm parametrization draws its power-iteration vectors
        # from the global generator at attach time
        torch.manual_seed(int(seed))
        if kind == "mask_net":
            net = MaskNet(config or MaskNetConfig())
        elif kind == "predictor":
            net = MetricPredictor(config or PredictorConfig())
        else:
            raise ValueError(f"unknown network kind {kind!r}")
        _seeded_init(net, seed)
    return net


# ---------------------------------------------------------------------------
# Numpy-facing forward wrappers (inference surface)
# ---------------------------------------------------------------------------

def mask_forward(net: MaskNet, features: np.ndarray) -> np.ndarray:
    net.eval()
    with torch.no_grad():
        mask = net(torch.as_tensor(features, dtype=torch.float32))
    return mask.numpy().astype(np.float64)


def predict_score(net: MetricPredictor, deg_features: np.ndarray, ref_features: np.ndarray) -> float:
    net.eval()
    with torch.no_grad():
        score = net(
            torch.as_tensor(deg_features, dtype=torch.float32),
            torch.as_tensor(ref_features, dtype=torch.float32),
        )
    return float(score)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = 1


def config_hash(payload: dict) -> str:
    """Stable short hash of a JSON-serializable configuration."""
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:8]


def _arch_description(nets: dict) -> dict:
    desc = {}
    for role, net in nets.items():
        cfg = asdict(net.config)
        cfg["class"] = type(net).__name__
        desc[role] = cfg
    return desc


def save_checkpoint(path, nets: dict, meta: dict | None = None) -> None:
    """Write named parameter arrays plus the architecture description and a
    config hash for each role ("generator", "degenerator", "predictor")."""
    arch = _arch_description(nets)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "arch": arch,
        "config_hash": config_hash({"arch": arch, "meta": meta or {}}),
        "meta": meta or {},
        "state": {role: net.state_dict() for role, net in nets.items()},
    }
    torch.save(payload, path)


def load_checkpoint(path):
    """Rebuild the stored networks.  Returns (nets, meta).

    Any mismatch between the stored architecture and the stored parameter
    arrays fails loudly instead of partially loading.
    """
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointMismatchError(
            f"unsupported checkpoint format {payload.get('format')!r}"
        )
    nets = {}
    for role, desc in payload["arch"].items():
        desc = dict(desc)
        cls = desc.pop("class")
        if cls == "MaskNet":
            if desc.get("mask_ceiling") is not None:
                desc["mask_ceiling"] = float(desc["mask_ceiling"])
            net = MaskNet(MaskNetConfig(**{k: tuple(v) if isinstance(v, list) else v
                                           for k, v in desc.items()}))
        elif cls == "MetricPredictor":
            net = MetricPredictor(PredictorConfig(**{k: tuple(v) if isinstance(v, list) else v
                                                     for k, v in desc.items()}))
        else:
            raise CheckpointMismatchError(f"unknown architecture class {cls!r}")
        try:
            net.load_state_dict(payload["state"][role], strict=True)
        except (RuntimeError, KeyError) as exc:
            raise CheckpointMismatchError(
                f"stored parameters for {role!r} do not fit the stored architecture: {exc}"
            ) from exc
        nets[role] = net
    return nets, payload.get("meta", {})
