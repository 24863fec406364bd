"""The vault-client interface used by the gray-box training loops.

Both :class:`LocalVaultClient` and the network client in
``graybox.protocol.client`` implement it, so loops never know which one they
talk to.
"""
from __future__ import annotations

from typing import Any, Mapping, Protocol

import numpy as np

from graybox.tensor import Tensor
from graybox.vault import EntryPointDescriptor, Vault


class TransportError(ConnectionError):
    """The vault could not be reached or the connection dropped.  Retriable."""


class VaultClient(Protocol):
    def describe(self) -> list[EntryPointDescriptor]: ...

    def embed(self, ids) -> Tensor: ...

    def open_session(self) -> Any: ...

    def forward(self, session, entries: Mapping[int, Tensor], text_free: int = 0) -> dict[str, Tensor]: ...

    def backward(self, session, out_grads: Mapping[str, Tensor]) -> dict[int, Tensor]: ...

    def close_session(self, session) -> None: ...


class LocalVaultClient:
    """In-process client.  Tensors are copied across the boundary as the wire would."""

    def __init__(self, vault: Vault):
        self._vault = vault

    @property
    def vault(self) -> Vault:
        return self._vault

    def checksum(self) -> int:
        return self._vault.checksum

    def describe(self) -> list[EntryPointDescriptor]:
        return self._vault.list_entries()

    def embed(self, ids) -> Tensor:
        return self._vault.embed_tokens(np.asarray(ids))

    def open_session(self):
        return self._vault.open_session()

    def forward(self, session, entries, text_free: int = 0):
        return self._vault.forward(session, {k: v.detach() for k, v in entries.items()}, text_free)

    def backward(self, session, out_grads):
        return self._vault.backward(session, out_grads)

    def close_session(self, session) -> None:
        self._vault.close_session(session)
