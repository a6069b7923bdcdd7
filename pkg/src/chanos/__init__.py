"""Simulator of a multinode channel machine with a dynamic operating system."""

from .words import END, PortId, decode_port_id, encode_port_id

__version__ = "0.1.0"

__all__ = ["END", "PortId", "decode_port_id", "encode_port_id", "__version__"]
