"""Dual cross-current network (separable-conv + self-attention branches) on a numpy autograd engine."""
