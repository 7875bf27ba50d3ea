"""Toy reasoning-segmentation system: policy, context queries, mask head and GRPO."""

__version__ = "0.1.0"
