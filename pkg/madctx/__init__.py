"""Multi-agent discussion engine with latent-space context selection and evolving instructions."""

__version__ = "0.1.0"
