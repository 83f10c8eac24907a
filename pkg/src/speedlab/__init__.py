"""Speed-test methodology lab: emulated links, test engines and statistics."""

__version__ = "0.1.0"
