"""Recurrent flow networks over 2-D geo-coordinates: conditional
normalizing-flow emissions on a stochastic recurrent backbone, with MDN
baselines, variational training, likelihood evaluation, rollout, and
quantization tooling."""

__version__ = "0.1.0"

from . import diffcore, evalsuite, flows, geodata, models, recurrent, synthgen

__all__ = ["diffcore", "evalsuite", "flows", "geodata", "models",
           "recurrent", "synthgen", "__version__"]
