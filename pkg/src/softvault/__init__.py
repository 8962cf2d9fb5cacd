"""Software-emulated enclave key vault with attested certificate protocols."""

__version__ = "0.1.0"
