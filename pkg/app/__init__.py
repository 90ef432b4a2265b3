"""ToFe toolkit - token freezing and reusing for budget-aware vision transformers."""

__version__ = "1.0.0"
