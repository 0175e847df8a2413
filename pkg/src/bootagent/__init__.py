"""A minimal self-hostable coding agent and the harness that checks it against its spec of record."""

__version__ = "0.1.0"
