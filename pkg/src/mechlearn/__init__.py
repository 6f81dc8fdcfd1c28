"""mechlearn: learn mechanical-system dynamics models from transition data
and evaluate them through trajectory optimization and closed-loop swing-up."""

__version__ = "0.1.0"
