"""
bmdgan library and CLI version.
"""

BMDGAN_VERSION = "0.1.0"
