"""Service modules for the backbone, ToFe modules, training, inference and I/O."""
