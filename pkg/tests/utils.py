import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import pytest

from latfuse import rng
from latfuse.cli import LatfuseRunner
from latfuse.fusion import DEFAULT_K_AGF

NPY_MAGIC = b"\x93NUMPY"

# (method, k_agf); DSF has a fixed 7x7 kernel
MODULE_CONFIGS = [
    pytest.param("agf", 1, id="agf-1x1"),
    pytest.param("agf", 7, id="agf-7x7"),
    pytest.param("dsf", DEFAULT_K_AGF, id="dsf"),
]


@dataclass
class RunResult:
    code: int
    stdout: str
    stderr: str

    def records(self) -> List[Dict[str, str]]:
        """stdout parsed as one dict per `key=value ...` line"""
        records = []
        for line in self.stdout.splitlines():
            if not line.strip():
                continue
            records.append(dict(field.split("=", 1) for field in line.split()))
        return records

    def record(self, key: str) -> Dict[str, str]:
        """First record holding `key`"""
        for record in self.records():
            if key in record:
                return record
        raise AssertionError(f"No output line with {key!r}:\n{self.stdout}")


class Latfuse:
    """Runs the command line in-process and captures its output."""

    def __call__(self, *args: str) -> RunResult:
        stdout, stderr = io.StringIO(), io.StringIO()
        code = LatfuseRunner(stdout=stdout, stderr=stderr).run([str(a) for a in args])
        return RunResult(code, stdout.getvalue(), stderr.getvalue())

    def ok(self, *args: str) -> RunResult:
        result = self(*args)
        assert result.code == 0, result.stderr
        return result


def npy_bytes(
    header: str,
    payload: bytes = b"",
    version: Tuple[int, int] = (1, 0),
    magic: bytes = NPY_MAGIC,
) -> bytes:
    """Hand-assembled NPY file with the header padded to 64 bytes."""
    prefix = len(magic) + 2 + 2
    text = header.encode("latin1")
    padding = -(prefix + len(text) + 1) % 64
    text = text + b" " * padding + b"\n"
    return magic + bytes(version) + struct.pack("<H", len(text)) + text + payload


def write_bytes(path: Path, data: bytes) -> Path:
    path.write_bytes(data)
    return path


def pool_reference(x: np.ndarray, kind: str) -> np.ndarray:
    """Per-pixel channel mean or max, one scalar at a time in the input dtype."""
    n, c, h, w = x.shape
    out = np.empty((n, 1, h, w), dtype=x.dtype)
    for b in range(n):
        for y in range(h):
            for xx in range(w):
                acc = x[b, 0, y, xx]
                for ci in range(1, c):
                    value = x[b, ci, y, xx]
                    acc = max(acc, value) if kind == "max" else acc + value
                if kind == "avg":
                    acc = acc / x.dtype.type(c)
                out[b, 0, y, xx] = acc
    return out


def conv_reference(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Zero-padded same cross-correlation in float64, one output element at a time."""
    n, c, h, w = x.shape
    out_channels, _, k, _ = weights.shape
    pad = (k - 1) // 2
    out = np.empty((n, out_channels, h, w), dtype=np.float64)
    for b in range(n):
        for co in range(out_channels):
            for y in range(h):
                for xx in range(w):
                    total = 0.0
                    for ci in range(c):
                        for ky in range(k):
                            iy = y + ky - pad
                            if not 0 <= iy < h:
                                continue
                            for kx in range(k):
                                ix = xx + kx - pad
                                if 0 <= ix < w:
                                    total += float(weights[co, ci, ky, kx]) * float(x[b, ci, iy, ix])
                    out[b, co, y, xx] = total + float(bias[co])
    return out


def agf_reference(base, refined, weights, bias) -> Tuple[np.ndarray, np.ndarray]:
    base = base.astype(np.float64)
    refined = refined.astype(np.float64)
    logits = conv_reference(np.concatenate((base, refined), axis=1), weights, bias)
    maps = np.empty_like(logits)
    n, _, h, w = logits.shape
    for b in range(n):
        for y in range(h):
            for xx in range(w):
                l0, l1 = logits[b, 0, y, xx], logits[b, 1, y, xx]
                top = max(l0, l1)
                e0, e1 = math.exp(l0 - top), math.exp(l1 - top)
                maps[b, 0, y, xx] = e0 / (e0 + e1)
                maps[b, 1, y, xx] = e1 / (e0 + e1)
    fused = maps[:, 0:1] * base + maps[:, 1:2] * refined
    return fused, maps


def dsf_reference(base, refined, weights, bias) -> Tuple[np.ndarray, np.ndarray]:
    base = base.astype(np.float64)
    refined = refined.astype(np.float64)
    n, c, h, w = base.shape
    pooled = np.empty((n, 2, h, w), dtype=np.float64)
    for b in range(n):
        for y in range(h):
            for xx in range(w):
                pooled[b, 0, y, xx] = sum(refined[b, ci, y, xx] for ci in range(c)) / c
                pooled[b, 1, y, xx] = max(base[b, ci, y, xx] for ci in range(c))
    logits = conv_reference(pooled, weights, bias)
    gate = 1.0 / (1.0 + np.exp(-logits))
    fused = gate * refined + (1.0 - gate) * base
    return fused, gate


def latent_pair(seed: int, shape, scale: float = 1.0, dtype=np.float32) -> Tuple[np.ndarray, np.ndarray]:
    """Uncorrelated latents in [-scale, scale) for property tests."""
    base = rng.uniform(seed, rng.BASE_INPUT, shape, -scale, scale).astype(dtype)
    refined = rng.uniform(seed, rng.REFINED_INPUT, shape, -scale, scale).astype(dtype)
    return base, refined


def load(path: Path) -> np.ndarray:
    return np.load(path, allow_pickle=False)
