"""Token-gated chunk streaming over datagrams.

A server streams content window by window and only continues while the
client returns per-window tokens derived from a Diffie-Hellman secret; the
session descriptor travels encrypted under the client's textbook RSA key.
"""

__version__ = "0.1.0"
