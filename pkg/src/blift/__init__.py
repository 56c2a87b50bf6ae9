"""Total treatment effects in bipartite experiments where only some treatment units are eligible."""

__version__ = "0.1.0"
