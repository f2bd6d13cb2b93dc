"""Serve transformer checkpoints behind the logprob wire protocol."""

from .app import build_app
from .service import AdapterConfig, ModelService

__version__ = "0.1.0"
