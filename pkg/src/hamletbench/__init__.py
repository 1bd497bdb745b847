"""History-aware fine-tuning benchmark: moment tokens, attention memory and
baselines over ambiguous gridworld manipulation tasks."""

__version__ = "0.1.0"
