"""Live countermeasure: a local SOCKS5 proxy and a remote peer.

Traffic between the two is framed, padded with dummy frames and encrypted;
the remote side also delays downstream frames.
"""

from .config import ProxyConfig, ProxyConfigError, load_proxy_config
from .local import LocalProxy, run_local
from .remote import RemoteProxy, run_remote
from .tunnel import ProxySession, capture_side_channel

__all__ = [
    "LocalProxy",
    "ProxyConfig",
    "ProxyConfigError",
    "ProxySession",
    "RemoteProxy",
    "capture_side_channel",
    "load_proxy_config",
    "run_local",
    "run_remote",
]
