"""Model configuration: transition/emission choices and architecture sizes."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

TRANSITIONS = ("deterministic", "stochastic")
EMISSIONS = ("flow", "mdn-diag", "mdn-full")

_DEFAULT_MIXTURES = {"mdn-diag": 50, "mdn-full": 30}


@dataclass
class ModelConfig:
    transition: str = "stochastic"
    emission: str = "flow"
    mixture_count: int = 0            # 0 selects the emission's default
    latent_width: int = 128
    lstm_width: int = 128
    extractor_widths: tuple[int, ...] = (128, 128, 128)
    extractor_activation: str = "relu"
    hidden_activation: str = "tanh"   # prior/posterior/flow/mdn hidden layers
    prior_hidden: tuple[int, ...] = (128,)
    posterior_hidden: tuple[int, ...] = (128,)
    base_hidden: tuple[int, ...] = (128, 128)
    coupling_hidden: tuple[int, ...] = (128, 128)
    flow_depth: int = 35
    scale_clamp: float = 5.0
    norm_epsilon: float = 1e-5
    norm_momentum: float = 0.1
    mdn_hidden: tuple[int, ...] = (64, 64)
    kl_anneal_epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.transition not in TRANSITIONS:
            raise ValueError(f"transition must be one of {TRANSITIONS}")
        if self.emission not in EMISSIONS:
            raise ValueError(f"emission must be one of {EMISSIONS}")
        if self.kl_anneal_epochs < 0:
            raise ValueError("kl_anneal_epochs must be non-negative")
        for name in ("extractor_widths", "prior_hidden", "posterior_hidden",
                     "base_hidden", "coupling_hidden", "mdn_hidden"):
            setattr(self, name, tuple(getattr(self, name)))

    @property
    def stochastic(self) -> bool:
        return self.transition == "stochastic"

    @property
    def name(self) -> str:
        if self.emission == "flow":
            return "rfn" if self.stochastic else "rnn-flow"
        suffix = self.emission.split("-", 1)[1]
        return f"{'srnn' if self.stochastic else 'rnn'}-mdn-{suffix}"

    @property
    def mixtures(self) -> int:
        if self.mixture_count > 0:
            return self.mixture_count
        return _DEFAULT_MIXTURES.get(self.emission, 0)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown model config fields: {unknown}")
        return cls(**d)
