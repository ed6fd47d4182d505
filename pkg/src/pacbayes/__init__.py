"""Train-and-certify toolkit for probabilistic feed-forward networks."""

__version__ = "0.1.0"
