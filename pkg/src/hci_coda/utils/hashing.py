"""Parameter digests used to prove that frozen partitions never move."""

from __future__ import annotations

import hashlib
from collections.abc import Iterable, Mapping

import torch
from torch import nn

__all__ = ["parameter_hash"]


def _named_tensors(
    source: nn.Module | Mapping[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]],
) -> list[tuple[str, torch.Tensor]]:
    if isinstance(source, nn.Module):
        return list(source.named_parameters())
    if isinstance(source, Mapping):
        return list(source.items())
    return list(source)


def parameter_hash(
    source: nn.Module | Mapping[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]],
) -> str:
    """SHA-256 over parameter names, shapes, dtypes and raw bytes.

    Args:
        source: A module (its ``named_parameters``), a state-dict-like
            mapping, or an iterable of ``(name, tensor)`` pairs.

    Returns:
        Hex digest; equal digests mean bit-identical parameters.
    """
    h = hashlib.sha256()
    for name, tensor in sorted(_named_tensors(source), key=lambda kv: kv[0]):
        t = tensor.detach().cpu().contiguous()
        h.update(name.encode("utf-8"))
        h.update(str(tuple(t.shape)).encode("ascii"))
        h.update(str(t.dtype).encode("ascii"))
        h.update(t.numpy().tobytes())
    return h.hexdigest()
