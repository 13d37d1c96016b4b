"""Region-prompt embedding exporter for the scfreg registration toolkit."""

from .exporter import (  # noqa: F401
    EncoderLoadError,
    PromptSpec,
    build_prompts,
    encode_prompts,
    export_embeddings,
)

__version__ = "0.1.0"
