"""Reinforcement learning via supervised learning on offline trajectories.

Conditional behavior cloning (goal- or return-conditioned) with a small
numpy MLP, desk-scale environments, and the analyses that go with them.
"""

__version__ = "0.1.0"
