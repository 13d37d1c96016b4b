"""Exporter tests, including the cross-component round-trip through the
core toolkit (scfreg must be installed for these)."""

import hashlib
import subprocess
import sys

import numpy as np
import pytest

from embed_export import (
    EncoderLoadError,
    PromptSpec,
    build_prompts,
    encode_prompts,
    export_embeddings,
)
from embed_export.exporter import ExportError


def test_prompt_strings_verbatim_paper_template():
    spec = PromptSpec(labels=["liver", "spleen"], template="A photo of a [CLS].")
    assert build_prompts(spec) == ["A photo of a liver.", "A photo of a spleen."]


def test_prompt_strings_verbatim_lowercase_template():
    spec = PromptSpec(labels=["liver", "spleen"], template="a photo of a [CLS].")
    assert build_prompts(spec) == ["a photo of a liver.", "a photo of a spleen."]


def test_duplicate_labels_rejected_before_encoding():
    with pytest.raises(ExportError, match="duplicate"):
        PromptSpec(labels=["liver", "liver"])


def test_background_label_rejected():
    with pytest.raises(ExportError, match="background"):
        PromptSpec(labels=["liver", "background"])


def test_template_must_contain_cls_once():
    with pytest.raises(ExportError):
        PromptSpec(labels=["liver"], template="a photo of an organ.")
    with pytest.raises(ExportError):
        PromptSpec(labels=["liver"], template="[CLS] and [CLS]")


def test_unknown_encoder_fails_loudly():
    with pytest.raises(EncoderLoadError):
        encode_prompts(["a"], "magic:thing")
    with pytest.raises(EncoderLoadError):
        encode_prompts(["a"], "hashed:zero")


def test_hashed_encoder_deterministic_and_prompt_sensitive():
    a = encode_prompts(["a photo of a liver."], "hashed:32")
    b = encode_prompts(["a photo of a liver."], "hashed:32")
    c = encode_prompts(["a photo of a spleen."], "hashed:32")
    assert a.dtype == np.float32 and a.shape == (1, 32)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_export_writes_f32_rows_in_label_order(tmp_path):
    spec = PromptSpec(labels=["liver", "spleen", "kidney"], encoder="hashed:16")
    sidecar = export_embeddings(spec, tmp_path / "emb")
    assert sidecar["has_background_row"] is False
    assert sidecar["labels"] == ["liver", "spleen", "kidney"]
    raw = (tmp_path / "emb.scft").read_bytes()
    assert raw[:4] == b"SCFT"
    assert raw[4] == 1 and raw[5] == 0  # version 1, f32
    # row i is exactly the encoding of prompt i (independently recomputed)
    payload = np.frombuffer(raw[8 + 16:], dtype="<f4").reshape(3, 16)
    for i, prompt in enumerate(build_prompts(spec)):
        seed = int.from_bytes(hashlib.sha256(prompt.encode()).digest()[:8], "little")
        expected = np.random.default_rng(seed).standard_normal(16).astype(np.float32)
        assert np.array_equal(payload[i], expected)


def test_export_deterministic_bytes(tmp_path):
    spec = PromptSpec(labels=["liver", "spleen"], encoder="hashed:24")
    export_embeddings(spec, tmp_path / "a")
    export_embeddings(spec, tmp_path / "b")
    assert (tmp_path / "a.scft").read_bytes() == (tmp_path / "b.scft").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_roundtrip_through_core_toolkit(tmp_path):
    scfreg = pytest.importorskip("scfreg")
    from scfreg import embeddings as core_embeddings
    from scfreg import tensorio as core_tensorio

    labels = ["liver", "spleen"]
    spec = PromptSpec(labels=labels, template="A photo of a [CLS].", encoder="hashed:48")
    export_embeddings(spec, tmp_path / "emb")

    raw = core_tensorio.read_tensor(tmp_path / "emb.scft")
    assert raw.shape == (2, 48)          # N-1 rows
    assert raw.dtype == np.float32
    meta = core_tensorio.read_sidecar(tmp_path / "emb.scft")
    assert meta["labels"] == labels       # row order == sidecar order
    assert meta["has_background_row"] is False

    emb = core_embeddings.load_embeddings(tmp_path / "emb.scft")
    assert emb.matrix.shape == (3, 48)    # background row added by prepare()
    assert emb.labels == ["background", "liver", "spleen"]
    norms = np.linalg.norm(emb.matrix, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-9)
    # background row is orthogonal-as-possible to the normalized regions
    regions = emb.matrix[1:]
    assert np.abs(regions @ emb.matrix[0]).max() < 1e-8
    assert build_prompts(spec) == ["A photo of a liver.", "A photo of a spleen."]
    print("\nACCEPT c13 embed-export round-trip: PASS  "
          "(core parse, label alignment, prepare() unit rows + background, prompts verbatim)")


def test_cli_end_to_end(tmp_path):
    res = subprocess.run(
        [sys.executable, "-m", "embed_export.exporter",
         "--labels", "liver,spleen", "--template", "A photo of a [CLS].",
         "--encoder", "hashed:8", "--out", str(tmp_path / "emb")],
        capture_output=True, text=True,
    )
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "emb.scft").exists()
    assert (tmp_path / "emb.json").exists()


def test_cli_rejects_bad_template(tmp_path):
    res = subprocess.run(
        [sys.executable, "-m", "embed_export.exporter",
         "--labels", "liver", "--template", "no placeholder",
         "--out", str(tmp_path / "emb")],
        capture_output=True, text=True,
    )
    assert res.returncode == 1
    assert "error" in res.stderr
