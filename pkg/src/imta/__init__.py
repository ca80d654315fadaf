"""Traffic analysis of encrypted instant-messaging channels."""

__version__ = "0.1.0"
