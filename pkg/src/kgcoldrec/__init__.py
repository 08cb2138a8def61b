"""Knowledge-graph retrieval-augmented recommendation for cold-start items."""

__version__ = "0.1.0"
