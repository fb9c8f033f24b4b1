from .base import (
    BackendError,
    Backends,
    EditorBackend,
    FeatureBackend,
    ScorerBackend,
    UnsupportedInputError,
    edit_image,
    embed_image,
    embed_text,
    extract_features,
    patch_tokens,
)
from .mock import MockEditorBackend, MockFeatureBackend, MockScorerBackend, MockWorld

__all__ = [
    "BackendError",
    "Backends",
    "EditorBackend",
    "FeatureBackend",
    "ScorerBackend",
    "UnsupportedInputError",
    "edit_image",
    "embed_image",
    "embed_text",
    "extract_features",
    "patch_tokens",
    "MockEditorBackend",
    "MockFeatureBackend",
    "MockScorerBackend",
    "MockWorld",
]
