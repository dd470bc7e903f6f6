"""Pluggable signature schemes behind a sign/verify boundary.

``rsa``      RSA-2048, PKCS#1 v1.5 padding, SHA-256 (deterministic).
``ed25519``  Ed25519 (deterministic, much cheaper; the default).
``null``     keyed digest tag with no secrecy, for throughput experiments
             that isolate the cost of real cryptography.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Any

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ed25519, padding, rsa

from . import hashing


class SignatureScheme:
    name = "abstract"

    def generate(self) -> "KeyPair":
        raise NotImplementedError

    def sign(self, private: Any, message: bytes) -> bytes:
        raise NotImplementedError

    def verify(self, public: bytes, message: bytes, signature: bytes) -> bool:
        raise NotImplementedError


@dataclass
class KeyPair:
    scheme: SignatureScheme
    private: Any
    public: bytes

    def sign(self, message: bytes) -> bytes:
        return self.scheme.sign(self.private, message)

    def verify(self, message: bytes, signature: bytes) -> bool:
        return self.scheme.verify(self.public, message, signature)


class Ed25519Scheme(SignatureScheme):
    name = "ed25519"

    def generate(self) -> KeyPair:
        priv = ed25519.Ed25519PrivateKey.generate()
        pub = priv.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
        return KeyPair(self, priv, pub)

    def from_seed(self, seed: bytes) -> KeyPair:
        priv = ed25519.Ed25519PrivateKey.from_private_bytes(hashing.digest(seed))
        pub = priv.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
        return KeyPair(self, priv, pub)

    def sign(self, private: Any, message: bytes) -> bytes:
        return private.sign(message)

    def verify(self, public: bytes, message: bytes, signature: bytes) -> bool:
        try:
            ed25519.Ed25519PublicKey.from_public_bytes(public).verify(signature, message)
            return True
        except (InvalidSignature, ValueError):
            return False


class RsaScheme(SignatureScheme):
    name = "rsa"

    def __init__(self, key_size: int = 2048) -> None:
        self.key_size = key_size

    def generate(self) -> KeyPair:
        priv = rsa.generate_private_key(public_exponent=65537, key_size=self.key_size)
        pub = priv.public_key().public_bytes(
            serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
        )
        return KeyPair(self, priv, pub)

    def sign(self, private: Any, message: bytes) -> bytes:
        return private.sign(message, padding.PKCS1v15(), hashes.SHA256())

    def verify(self, public: bytes, message: bytes, signature: bytes) -> bool:
        try:
            key = serialization.load_der_public_key(public)
            key.verify(signature, message, padding.PKCS1v15(), hashes.SHA256())
            return True
        except (InvalidSignature, ValueError, TypeError):
            return False


class NullScheme(SignatureScheme):
    """Tag = digest(public || message). Anyone can forge it; never use for security."""

    name = "null"

    def generate(self) -> KeyPair:
        pub = os.urandom(32)
        return KeyPair(self, pub, pub)

    def from_seed(self, seed: bytes) -> KeyPair:
        pub = hashing.digest(seed)
        return KeyPair(self, pub, pub)

    def sign(self, private: Any, message: bytes) -> bytes:
        return hashing.digest(private + message)

    def verify(self, public: bytes, message: bytes, signature: bytes) -> bool:
        return hashing.digest(public + message) == signature


def get_scheme(name: str) -> SignatureScheme:
    if name == "ed25519":
        return Ed25519Scheme()
    if name == "rsa":
        return RsaScheme()
    if name == "null":
        return NullScheme()
    raise ValueError(f"unknown signature scheme {name!r}")
