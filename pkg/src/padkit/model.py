"""Classifiers with one or two softmax heads, and the adversarial-invariance assembly.

Images are NCHW float tensors in [0, 1].  Index conventions used across the
package: binary head index 1 is *attack*; multiclass index is the attack code
(0 = genuine).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import torch
from torch import nn

BINARY_ONLY = "binary_only"
BINARY_PLUS_MULTICLASS = "binary_plus_multiclass"
ATTACK_INDEX = 1
CLASS_INDEX_CONVENTION = {"binary": {"0": "genuine", "1": "attack"}, "multiclass": "attack_type code"}
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    backbone: str = "toy_cnn"
    input_size: int = 224
    pretrained: bool = False
    heads: str = BINARY_ONLY
    n_attack_classes: int = 8
    seed: int = 0

    def validate(self):
        if self.backbone not in ("toy_cnn", "paper_default"):
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.heads not in (BINARY_ONLY, BINARY_PLUS_MULTICLASS):
            raise ConfigError(f"unknown head layout {self.heads!r}")
        if self.n_attack_classes < 2:
            raise ConfigError("n_attack_classes must be >= 2")
        if self.input_size < 8:
            raise ConfigError("input_size too small")


@dataclass
class UaiConfig:
    base: ModelConfig = field(default_factory=ModelConfig)
    dim_e1: int = 128
    dim_e2: int = 64
    dropout_rate: float = 0.5
    decoder_output_size: Optional[int] = None

    def validate(self):
        self.base.validate()
        if self.dim_e1 <= 0 or self.dim_e2 <= 0:
            raise ConfigError("embedding dimensions must be positive")
        if not 0.0 < self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in (0, 1)")
        out = self.decoder_output_size or self.base.input_size
        if out != self.base.input_size:
            raise ConfigError(f"decoder output {out} must equal input size {self.base.input_size}")
        if self.base.input_size % 8:
            raise ConfigError("input_size must be divisible by 8 for the decoder")


def _toy_backbone() -> tuple[nn.Module, int]:
    def block(cin, cout, pool):
        layers = [nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]
        if pool:
            layers.append(nn.MaxPool2d(2))
        return nn.Sequential(*layers)

    net = nn.Sequential()
    net.add_module("block1", block(3, 16, True))
    net.add_module("block2", block(16, 32, True))
    net.add_module("block3", block(32, 64, False))
    return net, 64


def _mobilenet_backbone(pretrained: bool) -> tuple[nn.Module, int]:
    from torchvision.models import MobileNet_V2_Weights, mobilenet_v2

    weights = MobileNet_V2_Weights.IMAGENET1K_V1 if pretrained else None
    return mobilenet_v2(weights=weights).features, 1280


class Encoder(nn.Module):
    """Input normalisation + convolutional backbone + global average pooling."""

    def __init__(self, config: ModelConfig, fetch_weights: bool = True):
        super().__init__()
        if config.backbone == "toy_cnn":
            self.backbone, self.out_dim = _toy_backbone()
        else:
            self.backbone, self.out_dim = _mobilenet_backbone(config.pretrained and fetch_weights)
        if config.pretrained:
            mean, std = IMAGENET_MEAN, IMAGENET_STD
        else:
            mean, std = (0.0, 0.0, 0.0), (1.0, 1.0, 1.0)
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1))
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        fmap = self.backbone((x - self.mean) / self.std)
        return self.pool(fmap).flatten(1)


class Heads(nn.Module):
    def __init__(self, in_dim: int, config: ModelConfig):
        super().__init__()
        self.binary = nn.Linear(in_dim, 2)
        self.multiclass = nn.Linear(in_dim, config.n_attack_classes) if config.heads == BINARY_PLUS_MULTICLASS else None

    def forward(self, h):
        if self.multiclass is None:
            return (self.binary(h),)
        return self.binary(h), self.multiclass(h)


def _probs(logits: tuple):
    probs = tuple(torch.softmax(z, dim=1) for z in logits)
    return probs[0] if len(probs) == 1 else probs


class PadModel(nn.Module):
    """Backbone with a binary head and an optional multiclass head."""

    kind = "classifier"

    def __init__(self, config: ModelConfig, fetch_weights: bool = True):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config, fetch_weights)
        self.heads = Heads(self.encoder.out_dim, config)

    @property
    def has_multiclass(self) -> bool:
        return self.heads.multiclass is not None

    @property
    def default_cam_layer(self) -> str:
        return "encoder.backbone"

    def logits(self, x) -> tuple:
        return self.heads(self.encoder(x))

    def forward(self, x):
        """Softmax probabilities: a (B, 2) tensor, or ((B, 2), (B, M)) for two heads."""
        return _probs(self.logits(x))


def build_classifier(config: ModelConfig, fetch_weights: bool = True) -> PadModel:
    """Seeded classifier; pretrained ImageNet weights only for ``paper_default``."""
    config.validate()
    torch.manual_seed(config.seed)
    return PadModel(config, fetch_weights)


@dataclass
class UaiOutputs:
    e1: torch.Tensor
    e2: torch.Tensor
    e1_prime: torch.Tensor
    e2_prime: torch.Tensor
    probs: object
    x_recon: torch.Tensor
    logits: tuple = ()


class Decoder(nn.Module):
    def __init__(self, in_dim: int, out_size: int):
        super().__init__()
        self.side = out_size // 8
        self.fc = nn.Linear(in_dim, 32 * self.side * self.side)
        self.net = nn.Sequential(
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(32, 32, 4, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(32, 16, 4, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(16, 3, 4, stride=2, padding=1),
            nn.Sigmoid(),
        )

    def forward(self, z):
        return self.net(self.fc(z).view(-1, 32, self.side, self.side))


def _disentangler(din: int, dout: int) -> nn.Module:
    hidden = max(din, dout)
    return nn.Sequential(nn.Linear(din, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, dout))


class UaiModel(nn.Module):
    """Encoder splitting features into a predictive e1 and a nuisance e2.

    MAIN group: encoder (incl. both embedding projections), predictor, decoder.
    ADVERSARY group: the disentanglers ``f1: e2 -> e1'`` and ``f2: e1 -> e2'``.
    """

    kind = "uai"
    MAIN = ("encoder", "to_e1", "to_e2", "heads", "decoder")
    ADVERSARY = ("f1", "f2")

    def __init__(self, config: UaiConfig, fetch_weights: bool = True):
        super().__init__()
        self.config = config
        base = config.base
        self.encoder = Encoder(base, fetch_weights)
        self.to_e1 = nn.Linear(self.encoder.out_dim, config.dim_e1)
        self.to_e2 = nn.Linear(self.encoder.out_dim, config.dim_e2)
        self.heads = Heads(config.dim_e1, base)
        self.noise = nn.Dropout(config.dropout_rate)
        self.decoder = Decoder(config.dim_e1 + config.dim_e2, base.input_size)
        self.f1 = _disentangler(config.dim_e2, config.dim_e1)
        self.f2 = _disentangler(config.dim_e1, config.dim_e2)

    @property
    def has_multiclass(self) -> bool:
        return self.heads.multiclass is not None

    @property
    def default_cam_layer(self) -> str:
        return "encoder.backbone"

    def embed(self, x):
        h = self.encoder(x)
        return self.to_e1(h), self.to_e2(h)

    def logits(self, x) -> tuple:
        e1, _ = self.embed(x)
        return self.heads(e1)

    def forward(self, x) -> UaiOutputs:
        e1, e2 = self.embed(x)
        logits = self.heads(e1)
        x_recon = self.decoder(torch.cat([self.noise(e1), e2], dim=1))
        return UaiOutputs(
            e1=e1,
            e2=e2,
            e1_prime=self.f1(e2),
            e2_prime=self.f2(e1),
            probs=_probs(logits),
            x_recon=x_recon,
            logits=logits,
        )

    def _group(self, names):
        return [p for n in names for p in getattr(self, n).parameters()]

    def main_parameters(self) -> list:
        return self._group(self.MAIN)

    def adversary_parameters(self) -> list:
        return self._group(self.ADVERSARY)


def build_uai(config: UaiConfig, fetch_weights: bool = True) -> UaiModel:
    config.validate()
    torch.manual_seed(config.base.seed)
    return UaiModel(config, fetch_weights)


@torch.no_grad()
def predict_attack_prob(model: nn.Module, images) -> torch.Tensor:
    """Attack-class component of the binary softmax, one value per image."""
    if not hasattr(model, "logits"):
        raise TypeError("model exposes no binary head")
    was_training = model.training
    model.eval()
    try:
        x = torch.as_tensor(images, dtype=torch.float32)
        binary = model.logits(x)[0]
        if binary.shape[1] != 2:
            raise TypeError("first head is not a binary head")
        return torch.softmax(binary, dim=1)[:, ATTACK_INDEX]
    finally:
        model.train(was_training)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: nn.Module, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), directory / "weights.pt")
    if isinstance(model, UaiModel):
        cfg = {"kind": "uai", "uai_config": asdict(model.config)}
    else:
        cfg = {"kind": "classifier", "model_config": asdict(model.config)}
    cfg["class_index"] = CLASS_INDEX_CONVENTION
    (directory / "config.json").write_text(json.dumps(cfg, indent=2), encoding="utf-8")
    return directory


def load_checkpoint(directory) -> nn.Module:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "config.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"no checkpoint in {directory}") from exc
    if meta["kind"] == "uai":
        raw = dict(meta["uai_config"])
        raw["base"] = ModelConfig(**raw["base"])
        model = build_uai(UaiConfig(**raw), fetch_weights=False)
    else:
        model = build_classifier(ModelConfig(**meta["model_config"]), fetch_weights=False)
    model.load_state_dict(torch.load(directory / "weights.pt", weights_only=True))
    model.eval()
    return model
