"""Core modules for configuration, errors, tensor primitives and FLOPs accounting."""
