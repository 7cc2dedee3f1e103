"""Disaggregated simulation and PPO training at desk scale."""

__version__ = "0.1.0"
