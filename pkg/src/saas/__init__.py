"""Self-adaptive attention scaling (SaaS) on a toy flow-matching diffusion transformer."""

__version__ = "0.1.0"
