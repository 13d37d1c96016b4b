"""Encode region-name prompts with a text encoder and write the embeddings
in the registration toolkit's .scft file format.

The output pair is ``<out>.scft`` (an [N-1, C1] float32 tensor, one row per
region in label order, raw encoder outputs - the core normalizes and adds
the background row itself) and ``<out>.json`` with

    {"labels": [...], "prompt_template": str, "encoder": str,
     "has_background_row": false}

The .scft container is written here from its byte-level definition rather
than through the core package, so the wire contract is exercised from both
ends (the core's reader is the other end; see the round-trip tests).

Encoders are selected by id:

    hashed:<dim>      deterministic offline pseudo-encoder (sha256-seeded
                      Gaussian per prompt); always available, used in tests
    clip:<model_id>   CLIP text tower via transformers, e.g.
                      clip:openai/clip-vit-large-patch14-336
"""

import argparse
import hashlib
import json
import struct
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CLS_TOKEN = "[CLS]"
DEFAULT_TEMPLATE = "A photo of a [CLS]."
DEFAULT_ENCODER = "hashed:64"


class ExportError(ValueError):
    pass


class EncoderLoadError(ExportError):
    pass


@dataclass
class PromptSpec:
    """Validated export request: region names, a template with exactly one
    [CLS] placeholder, and an encoder id."""

    labels: list
    template: str = DEFAULT_TEMPLATE
    encoder: str = DEFAULT_ENCODER

    def __post_init__(self):
        self.labels = [str(l) for l in self.labels]
        if not self.labels:
            raise ExportError("no labels given")
        if len(set(self.labels)) != len(self.labels):
            dupes = sorted({l for l in self.labels if self.labels.count(l) > 1})
            raise ExportError(f"duplicate labels: {dupes}")
        if "background" in self.labels:
            raise ExportError(
                "'background' must not be exported; the core derives the "
                "background row itself"
            )
        if self.template.count(CLS_TOKEN) != 1:
            raise ExportError(
                f"template must contain {CLS_TOKEN} exactly once: {self.template!r}"
            )


def build_prompts(spec: PromptSpec) -> list:
    """Verbatim substitution of each label into the template."""
    return [spec.template.replace(CLS_TOKEN, label) for label in spec.labels]


def _encode_hashed(prompts, dim: int) -> np.ndarray:
    rows = []
    for prompt in prompts:
        digest = hashlib.sha256(prompt.encode("utf-8")).digest()
        seed = int.from_bytes(digest[:8], "little")
        rng = np.random.default_rng(seed)
        rows.append(rng.standard_normal(dim))
    return np.asarray(rows, dtype=np.float32)


def _encode_clip(prompts, model_id: str) -> np.ndarray:
    try:
        import torch
        from transformers import AutoTokenizer, CLIPTextModelWithProjection
    except ImportError as exc:
        raise EncoderLoadError(f"clip encoder needs transformers+torch: {exc}") from exc
    try:
        tokenizer = AutoTokenizer.from_pretrained(model_id)
        model = CLIPTextModelWithProjection.from_pretrained(model_id)
    except Exception as exc:
        raise EncoderLoadError(f"could not load {model_id!r}: {exc}") from exc
    model.eval()
    with torch.no_grad():
        tokens = tokenizer(prompts, padding=True, return_tensors="pt")
        out = model(**tokens).text_embeds
    return out.cpu().numpy().astype(np.float32)


def encode_prompts(prompts, encoder: str) -> np.ndarray:
    """Dispatch on the encoder id; returns raw (unnormalized) f32 rows."""
    if encoder.startswith("hashed:"):
        try:
            dim = int(encoder.split(":", 1)[1])
        except ValueError:
            raise EncoderLoadError(f"bad hashed encoder id {encoder!r}")
        if dim < 1:
            raise EncoderLoadError(f"hashed dim must be >= 1: {encoder!r}")
        return _encode_hashed(prompts, dim)
    if encoder.startswith("clip:"):
        return _encode_clip(prompts, encoder.split(":", 1)[1])
    raise EncoderLoadError(
        f"unknown encoder {encoder!r}; expected 'hashed:<dim>' or 'clip:<model_id>'"
    )


# --- minimal .scft writer (byte-level; see the toolkit README for the spec) ---

_SCFT_MAGIC = b"SCFT"
_SCFT_VERSION = 1
_SCFT_F32 = 0


def write_scft_f32(path, matrix: np.ndarray) -> None:
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise ExportError(f"expected a 2-D matrix, got shape {matrix.shape}")
    header = struct.pack(
        "<4sBBBB", _SCFT_MAGIC, _SCFT_VERSION, _SCFT_F32, matrix.ndim, 0
    )
    dims = struct.pack(f"<{matrix.ndim}Q", *matrix.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dims)
        fh.write(matrix.tobytes())


def export_embeddings(spec: PromptSpec, out) -> dict:
    """Encode the prompts and write ``<out>.scft`` + ``<out>.json``.

    Returns the sidecar payload. Deterministic for a fixed encoder id and
    prompt set (no sampling anywhere).
    """
    prompts = build_prompts(spec)
    matrix = encode_prompts(prompts, spec.encoder)
    out = Path(out)
    if out.suffix != ".scft":
        out = out.with_name(out.name + ".scft")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_scft_f32(out, matrix)
    sidecar = {
        "labels": spec.labels,
        "prompt_template": spec.template,
        "encoder": spec.encoder,
        "has_background_row": False,
    }
    out.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return sidecar


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="embed-export",
        description="Export text embeddings of region prompts as .scft",
    )
    parser.add_argument("--labels", required=True,
                        help="comma-separated region names, e.g. liver,spleen")
    parser.add_argument("--template", default=DEFAULT_TEMPLATE,
                        help=f"prompt template containing {CLS_TOKEN} once")
    parser.add_argument("--encoder", default=DEFAULT_ENCODER,
                        help="hashed:<dim> or clip:<model_id>")
    parser.add_argument("--out", required=True, help="output path (`.scft` appended)")
    args = parser.parse_args(argv)
    try:
        spec = PromptSpec(
            labels=[l.strip() for l in args.labels.split(",") if l.strip()],
            template=args.template,
            encoder=args.encoder,
        )
        export_embeddings(spec, args.out)
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
