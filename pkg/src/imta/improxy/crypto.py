"""Per-session stream encryption of the tunnel.

The local side opens every tunnel connection with a random 16-byte nonce in
the clear. Both sides derive one ChaCha20 key per direction from the
pre-shared key and that nonce with HKDF-SHA256. This hides frame types and
lengths from an on-path observer; it is not authenticated encryption.
"""

from __future__ import annotations

import os

from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

NONCE_SIZE = 16
UPSTREAM_INFO = b"imta tunnel local->remote"
DOWNSTREAM_INFO = b"imta tunnel remote->local"
_CHACHA_NONCE = bytes(16)  # keys are unique per session and direction


def new_nonce() -> bytes:
    return os.urandom(NONCE_SIZE)


def derive_key(psk: bytes, nonce: bytes, info: bytes) -> bytes:
    if len(nonce) != NONCE_SIZE:
        raise ValueError(f"nonce must be {NONCE_SIZE} bytes")
    return HKDF(algorithm=hashes.SHA256(), length=32, salt=nonce, info=info).derive(psk)


class StreamCipher:
    """One direction of the tunnel; ``apply`` both encrypts and decrypts."""

    def __init__(self, key: bytes):
        self._ctx = Cipher(algorithms.ChaCha20(key, _CHACHA_NONCE), mode=None).encryptor()

    def apply(self, data: bytes) -> bytes:
        return self._ctx.update(data)


def session_ciphers(psk: bytes, nonce: bytes, local_side: bool) -> tuple[StreamCipher, StreamCipher]:
    """(sending cipher, receiving cipher) for one end of a session."""
    up = StreamCipher(derive_key(psk, nonce, UPSTREAM_INFO))
    down = StreamCipher(derive_key(psk, nonce, DOWNSTREAM_INFO))
    return (up, down) if local_side else (down, up)
