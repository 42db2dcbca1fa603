__all__ = [
    "backward",
    "cli",
    "coefficients",
    "condexp",
    "config",
    "core",
    "families",
    "forward",
    "grid",
    "linear_oracle",
    "ppde",
    "report",
]
__version__ = "0.1.0"
