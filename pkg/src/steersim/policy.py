"""Stochastic per-agent driving policy.

One recurrent latent-variable policy drives every agent: a small conv
encoder reads the birdview, a per-step latent is drawn from a unit
Gaussian prior (or an amortized posterior during training), and a
two-hidden-layer decoder emits the action mean. An optional target speed
modulates the encoder projection and both decoder hidden layers through
learned feature-wise affine transforms; without a target speed those
transforms are bypassed entirely, so the unconditioned path is exactly
the plain policy.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional

import numpy as np
import torch
from torch import nn

from .conditioning import TargetSpeed
from .core import Action

ARCHITECTURE_VERSION = 1
CHECKPOINT_MAGIC = b"STEERCK1"

LOG_TAU = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PolicyConfig:
    """Architecture sizes; the checkpoint header embeds this descriptor."""

    raster_size: int = 64
    raster_channels: int = 3
    conv_channels: tuple = (8, 16, 32)
    feature_dim: int = 64
    hidden_dim: int = 64
    latent_dim: int = 16
    action_dim: int = 2
    speed_norm: float = 30.0  # m/s scale applied to target speeds before FiLM
    version: int = ARCHITECTURE_VERSION

    def to_json(self) -> dict:
        payload = asdict(self)
        payload["conv_channels"] = list(self.conv_channels)
        return payload

    @classmethod
    def from_json(cls, payload: dict) -> "PolicyConfig":
        payload = dict(payload)
        payload["conv_channels"] = tuple(payload.get("conv_channels", (8, 16, 32)))
        return cls(**payload)


class FilmBlock(nn.Module):
    """Generates a per-feature affine (scale, shift) from (target speed, h).

    Initialized to the identity transform so conditioning starts out
    inert; the unconditioned path never calls this module at all.
    """

    def __init__(self, hidden_dim: int, out_dim: int):
        super().__init__()
        self.scale = nn.Linear(1 + hidden_dim, out_dim)
        self.shift = nn.Linear(1 + hidden_dim, out_dim)
        nn.init.zeros_(self.scale.weight)
        nn.init.ones_(self.scale.bias)
        nn.init.zeros_(self.shift.weight)
        nn.init.zeros_(self.shift.bias)

    def forward(self, x: torch.Tensor, speed: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        context = torch.cat([speed, h], dim=-1)
        return self.scale(context) * x + self.shift(context)


class ControlPolicy(nn.Module):
    """Encoder, posterior, FiLM-modulated decoder, and recurrent cell."""

    def __init__(self, config: PolicyConfig = PolicyConfig(), seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        if config.raster_size % 8 != 0:
            raise ValueError("raster size must be divisible by 8 (three stride-2 stages)")
        self.config = config
        c1, c2, c3 = config.conv_channels
        self.conv1 = nn.Conv2d(config.raster_channels, c1, kernel_size=3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, kernel_size=3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(c2, c3, kernel_size=3, stride=2, padding=1)
        spatial = config.raster_size // 8
        self.projection = nn.Linear(c3 * spatial * spatial, config.feature_dim)

        post_in = config.action_dim + config.feature_dim + config.hidden_dim
        self.posterior_hidden = nn.Linear(post_in, config.hidden_dim)
        self.posterior_mu = nn.Linear(config.hidden_dim, config.latent_dim)
        self.posterior_sigma = nn.Linear(config.hidden_dim, config.latent_dim)

        dec_in = config.feature_dim + config.latent_dim + config.hidden_dim
        self.decoder_hidden1 = nn.Linear(dec_in, config.hidden_dim)
        self.decoder_hidden2 = nn.Linear(config.hidden_dim, config.hidden_dim)
        self.decoder_out = nn.Linear(config.hidden_dim, config.action_dim)

        gru_in = config.action_dim + config.feature_dim + config.latent_dim
        self.recurrence = nn.GRUCell(gru_in, config.hidden_dim)

        # FiLM pairs: encoder projection, decoder hidden 1, decoder hidden 2.
        self.film_feature = FilmBlock(config.hidden_dim, config.feature_dim)
        self.film_decoder1 = FilmBlock(config.hidden_dim, config.hidden_dim)
        self.film_decoder2 = FilmBlock(config.hidden_dim, config.hidden_dim)

        self._reset_parameters(seed)
        self.to(dtype)

    def _reset_parameters(self, seed: int) -> None:
        """Deterministic initialization independent of torch's global RNG."""
        gen = torch.Generator().manual_seed(seed)
        for name, module in sorted(self.named_modules(), key=lambda item: item[0]):
            if name.startswith("film_"):
                continue  # FiLM generators keep their identity initialization
            if isinstance(module, (nn.Linear, nn.Conv2d)):
                fan_in = module.weight.shape[1:].numel()
                bound = 1.0 / math.sqrt(fan_in)
                with torch.no_grad():
                    module.weight.uniform_(-bound, bound, generator=gen)
                    module.bias.uniform_(-bound, bound, generator=gen)
            elif isinstance(module, nn.GRUCell):
                bound = 1.0 / math.sqrt(module.hidden_size)
                with torch.no_grad():
                    for param in (module.weight_ih, module.weight_hh, module.bias_ih, module.bias_hh):
                        param.uniform_(-bound, bound, generator=gen)

    @property
    def dtype(self) -> torch.dtype:
        return self.projection.weight.dtype

    def initial_hidden(self) -> torch.Tensor:
        """Initial recurrent state: the zero vector."""
        return torch.zeros(self.config.hidden_dim, dtype=self.dtype)

    def _speed_input(self, target_speed: Optional[TargetSpeed]) -> Optional[torch.Tensor]:
        if target_speed is None:
            return None
        return torch.tensor([target_speed.value / self.config.speed_norm], dtype=self.dtype)

    def encode(self, birdview: np.ndarray, target_speed: Optional[TargetSpeed], h: torch.Tensor) -> torch.Tensor:
        """Birdview pixels -> feature vector, FiLM-modulated when conditioned."""
        image = torch.as_tensor(np.ascontiguousarray(birdview), dtype=self.dtype) / 255.0
        image = image.permute(2, 0, 1).unsqueeze(0)
        out = torch.relu(self.conv1(image))
        out = torch.relu(self.conv2(out))
        out = torch.relu(self.conv3(out))
        features = torch.relu(self.projection(out.reshape(-1)))
        speed = self._speed_input(target_speed)
        if speed is not None:
            features = self.film_feature(features, speed, h)
        return features

    def posterior_params(self, action: torch.Tensor, features: torch.Tensor, h: torch.Tensor):
        """Amortized posterior over the step latent; sigma strictly positive."""
        hidden = torch.relu(self.posterior_hidden(torch.cat([action, features, h])))
        mu = self.posterior_mu(hidden)
        sigma = torch.nn.functional.softplus(self.posterior_sigma(hidden)) + 1e-4
        return mu, sigma

    def action_mean(
        self,
        features: torch.Tensor,
        z: torch.Tensor,
        h: torch.Tensor,
        target_speed: Optional[TargetSpeed],
    ) -> torch.Tensor:
        speed = self._speed_input(target_speed)
        hidden = torch.relu(self.decoder_hidden1(torch.cat([features, z, h])))
        if speed is not None:
            hidden = self.film_decoder1(hidden, speed, h)
        hidden = torch.relu(self.decoder_hidden2(hidden))
        if speed is not None:
            hidden = self.film_decoder2(hidden, speed, h)
        return self.decoder_out(hidden)

    def recurrent_update(self, action: torch.Tensor, features: torch.Tensor, z: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        joint = torch.cat([action, features, z]).unsqueeze(0)
        return self.recurrence(joint, h.unsqueeze(0)).squeeze(0)


class PolicyStepResult(NamedTuple):
    action: torch.Tensor  # (2,) action mean, which is the emitted action
    h_next: torch.Tensor
    z: torch.Tensor
    posterior_mu: Optional[torch.Tensor]
    posterior_sigma: Optional[torch.Tensor]


def policy_step(
    policy: ControlPolicy,
    birdview: np.ndarray,
    h: torch.Tensor,
    target_speed: Optional[TargetSpeed],
    rng: np.random.Generator,
    gt_action: Optional[torch.Tensor] = None,
) -> PolicyStepResult:
    """One policy evaluation: encode, draw z, decode action, update h.

    Latent source is the unit-normal prior unless a ground-truth action is
    supplied, in which case z is reparameterized from the posterior. All
    randomness flows through `rng`, so identical inputs and generator
    state yield identical outputs.
    """
    features = policy.encode(birdview, target_speed, h)
    noise = torch.as_tensor(rng.standard_normal(policy.config.latent_dim), dtype=policy.dtype)
    if gt_action is None:
        z = noise
        posterior_mu = posterior_sigma = None
    else:
        posterior_mu, posterior_sigma = policy.posterior_params(gt_action, features, h)
        z = posterior_mu + posterior_sigma * noise
    action = policy.action_mean(features, z, h, target_speed)
    h_next = policy.recurrent_update(action, features, z, h)
    if not bool(torch.isfinite(action).all() and torch.isfinite(h_next).all()):
        raise FloatingPointError("policy produced non-finite outputs")
    return PolicyStepResult(action=action, h_next=h_next, z=z, posterior_mu=posterior_mu, posterior_sigma=posterior_sigma)


def action_log_prob(action, mean) -> float:
    """Log-density of a unit-covariance bivariate Gaussian at `action`."""
    if isinstance(action, Action):
        action = action.as_array()
    action = np.asarray(action, dtype=float)
    mean = np.asarray(mean if not isinstance(mean, torch.Tensor) else mean.detach().numpy(), dtype=float)
    diff = action - mean
    return float(-LOG_TAU - 0.5 * diff @ diff)


def save_checkpoint(
    policy: ControlPolicy,
    path,
    train_config: Optional[dict] = None,
    seed: Optional[int] = None,
    step: Optional[int] = None,
) -> None:
    """Write a byte-stable checkpoint: JSON header + float32 LE tensor blobs."""
    named = sorted((name, tensor) for name, tensor in policy.state_dict().items())
    header = {
        "format_version": 1,
        "architecture": policy.config.to_json(),
        "train_config": train_config or {},
        "seed": seed,
        "step": step,
        "tensors": [{"name": name, "shape": list(tensor.shape)} for name, tensor in named],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buffer = io.BytesIO()
    buffer.write(CHECKPOINT_MAGIC)
    buffer.write(struct.pack("<Q", len(header_bytes)))
    buffer.write(header_bytes)
    for _, tensor in named:
        blob = tensor.detach().to(torch.float32).numpy().astype("<f4").tobytes()
        buffer.write(blob)
    with open(path, "wb") as handle:
        handle.write(buffer.getvalue())


def load_checkpoint(path, dtype: torch.dtype = torch.float32):
    """Load a checkpoint; returns (policy, header)."""
    with open(path, "rb") as handle:
        data = handle.read()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a policy checkpoint")
    offset = len(CHECKPOINT_MAGIC)
    (header_len,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    header = json.loads(data[offset : offset + header_len].decode("utf-8"))
    offset += header_len
    if header.get("format_version") != 1:
        raise ValueError(f"unsupported checkpoint format {header.get('format_version')}")
    config = PolicyConfig.from_json(header["architecture"])
    policy = ControlPolicy(config, dtype=dtype)
    state = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        blob = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        offset += count * 4
        state[entry["name"]] = torch.as_tensor(blob.reshape(shape).copy()).to(dtype)
    policy.load_state_dict(state)
    return policy, header
