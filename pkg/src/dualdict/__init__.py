"""Two-way neural dictionary: definitions to vectors and back."""

__version__ = "0.1.0"
