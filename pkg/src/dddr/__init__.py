"""Desk-scale federated class-continual learning with diffusion-based replay.

The package simulates a sequence of class-disjoint tasks learned by a
small federation: a frozen pretrained diffusion generator is inverted
per class into compact embeddings, those embeddings regenerate data for
finished tasks, and the federated classifier trains on real plus
generated data. Finetune and EWC baselines share the same harness.
"""

__version__ = "0.1.0"
