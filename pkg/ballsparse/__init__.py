"""Ball Sparse Attention toolkit"""

__version__ = "1.0.0"
