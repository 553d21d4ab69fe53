"""Shared fixtures and independent file-format helpers.

`pack_container` builds container bytes by hand (json + struct only) so the
reader and writer under test are checked against an independent encoding of
the same layout.
"""

from __future__ import annotations

import json
import struct

import numpy as np
import pytest

_NP_DTYPES = {"F64": "<f8", "F32": "<f4", "F16": "<f2"}


def pack_container(tensors: dict, metadata: dict | None = None) -> bytes:
    """Serialize {name: (dtype, array)} into container bytes.

    BF16 entries take uint16 bit patterns; other dtypes take float arrays.
    """
    header: dict = {}
    payload = b""
    for name, (dtype, arr) in tensors.items():
        arr = np.asarray(arr)
        if dtype == "BF16":
            blob = np.ascontiguousarray(arr, dtype="<u2").tobytes()
        else:
            blob = np.ascontiguousarray(arr, dtype=_NP_DTYPES[dtype]).tobytes()
        header[name] = {
            "dtype": dtype,
            "shape": list(arr.shape),
            "data_offsets": [len(payload), len(payload) + len(blob)],
        }
        payload += blob
    if metadata:
        header["__metadata__"] = metadata
    header_bytes = json.dumps(header).encode("utf-8")
    return struct.pack("<Q", len(header_bytes)) + header_bytes + payload


@pytest.fixture
def write_container(tmp_path):
    def _write(tensors: dict, name: str = "ckpt.safetensors", metadata: dict | None = None):
        path = tmp_path / name
        path.write_bytes(pack_container(tensors, metadata))
        return path

    return _write


def spectral_matrix(rng: np.random.Generator, m: int, n: int, sigmas) -> np.ndarray:
    """Matrix with prescribed singular values and random orthogonal factors."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    r = min(m, n)
    assert sigmas.shape[0] == r
    q1, _ = np.linalg.qr(rng.standard_normal((m, m)))
    q2, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (q1[:, :r] * sigmas) @ q2[:, :r].T


def decoder_layer_shapes(layer: int, dim: int = 12, kv_dim: int = 8) -> dict:
    base = f"model.layers.{layer}."
    return {
        base + "self_attn.q_proj.weight": (dim, dim),
        base + "self_attn.k_proj.weight": (kv_dim, dim),
        base + "self_attn.v_proj.weight": (kv_dim, dim),
        base + "self_attn.o_proj.weight": (dim, dim),
        base + "mlp.up_proj.weight": (dim + 4, dim),
        base + "mlp.gate_proj.weight": (dim + 4, dim),
        base + "mlp.down_proj.weight": (dim, dim + 4),
    }


def synth_decoder_arrays(seed: int, layers: int = 2, dim: int = 12, kv_dim: int = 8) -> dict:
    """Decoder-style weight dict with well-separated, distinct spectra."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for layer in range(layers):
        for name, (m, n) in decoder_layer_shapes(layer, dim, kv_dim).items():
            r = min(m, n)
            sigmas = np.linspace(10.0, 1.0, r) + rng.uniform(0.0, 0.05, r)
            sigmas = np.sort(sigmas)[::-1]
            arrays[name] = spectral_matrix(rng, m, n, sigmas)
    return arrays


@pytest.fixture
def synth_pair(tmp_path):
    """Two decoder-style F64 checkpoints with different spectra and bases."""

    def _build(layers: int = 2, dim: int = 12, kv_dim: int = 8, seeds=(11, 23)):
        paths = []
        for tag, seed in zip(("host", "donor"), seeds):
            arrays = synth_decoder_arrays(seed, layers=layers, dim=dim, kv_dim=kv_dim)
            tensors = {name: ("F64", arr) for name, arr in arrays.items()}
            path = tmp_path / f"{tag}.safetensors"
            path.write_bytes(pack_container(tensors))
            paths.append(path)
        return tuple(paths)

    return _build
