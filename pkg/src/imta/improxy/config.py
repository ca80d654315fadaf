"""Proxy configuration, loaded from TOML.

Example::

    psk = "5f1c...e2"            # hex, at least 16 bytes

    [local]
    listen = "127.0.0.1:1080"
    remote = "203.0.113.7:7443"

    [remote]
    listen = "0.0.0.0:7443"

    [obfuscation]
    r_padding = 0.1
    p_padding = 0.0001
    mean_delay = 1.0              # seconds, 0 disables delays
    silence_interval = 1.0        # seconds
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

from ..obfuscate import ObfuscationConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ProxyConfigError(ValueError):
    pass


def parse_hostport(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ProxyConfigError(f"expected host:port, got {text!r}")
    host = host.strip("[]")
    try:
        p = int(port)
    except ValueError:
        raise ProxyConfigError(f"bad port in {text!r}") from None
    if not 0 <= p <= 65535:
        raise ProxyConfigError(f"port out of range in {text!r}")
    return host, p


@dataclass(frozen=True)
class ProxyConfig:
    psk: bytes
    local_listen: tuple[str, int] = ("127.0.0.1", 1080)
    remote: tuple[str, int] = ("127.0.0.1", 7443)
    remote_listen: tuple[str, int] = ("127.0.0.1", 7443)
    obfuscation: ObfuscationConfig = field(default_factory=ObfuscationConfig)
    silence_interval: float = 1.0
    chunk_size: int = 16384
    connect_timeout: float = 10.0
    seed: int | None = None  # None: fresh OS randomness per session

    def __post_init__(self):
        if len(self.psk) < 16:
            raise ProxyConfigError("psk must be at least 16 bytes")
        if not self.silence_interval > 0:
            raise ProxyConfigError("silence_interval must be positive")
        if not 1 <= self.chunk_size <= 0xFFFF:
            raise ProxyConfigError("chunk_size must be within 1..65535")


def load_proxy_config(path: str | Path) -> ProxyConfig:
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ProxyConfigError(f"{path}: {exc}") from None
    return proxy_config_from_dict(doc, path)


def proxy_config_from_dict(doc: dict, path=None) -> ProxyConfig:
    where = f"{path}: " if path else ""
    try:
        psk = bytes.fromhex(doc["psk"])
    except KeyError:
        raise ProxyConfigError(f"{where}missing psk") from None
    except (TypeError, ValueError):
        raise ProxyConfigError(f"{where}psk must be a hex string") from None
    local = doc.get("local", {})
    remote = doc.get("remote", {})
    obf = doc.get("obfuscation", {})
    mean_delay = float(obf.get("mean_delay", 0.0))
    try:
        ocfg = ObfuscationConfig.with_mean_delay(
            mean_delay,
            r_padding=float(obf.get("r_padding", 0.0)),
            p_padding=float(obf.get("p_padding", 0.0)),
        )
        kw = {}
        if "listen" in local:
            kw["local_listen"] = parse_hostport(local["listen"])
        if "remote" in local:
            kw["remote"] = parse_hostport(local["remote"])
        if "listen" in remote:
            kw["remote_listen"] = parse_hostport(remote["listen"])
        return ProxyConfig(
            psk=psk,
            obfuscation=ocfg,
            silence_interval=float(obf.get("silence_interval", 1.0)),
            seed=obf.get("seed"),
            **kw,
        )
    except ValueError as exc:
        raise ProxyConfigError(f"{where}{exc}") from None
