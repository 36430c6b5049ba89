"""scorer-service: token extraction and pairwise two-token similarity over HTTP."""

from .app import PROTOCOL_VERSION, create_app
from .backends import PatchStatBackend, stable_pair_softmax
from .config import ServiceConfig, load_config
from .prompts import PROMPT_TEMPLATES, PROMPTS_VERSION

__all__ = [
    "PROTOCOL_VERSION",
    "PROMPT_TEMPLATES",
    "PROMPTS_VERSION",
    "PatchStatBackend",
    "ServiceConfig",
    "create_app",
    "load_config",
    "stable_pair_softmax",
]
