"""Downlink power allocation for one eMBB and one URLLC user under NOMA and
OMA spectrum slicing."""

__version__ = "0.1.0"
