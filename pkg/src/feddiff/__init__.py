"""feddiff: a federated-learning simulator whose server aggregates client
parameters with a diffusion model instead of linear averaging."""

__version__ = "0.1.0"
