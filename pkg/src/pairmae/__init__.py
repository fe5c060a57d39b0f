"""Self-supervised pretraining lab: masked patch reconstruction plus pooled
contrastive learning over positive view pairs (two frames of a video, or two
augmentations of an image), with probing/finetuning harnesses and a CLI.

Everything is driven by a single 64-bit experiment seed and a deterministic
synthetic corpus, so every result in the test suite is exactly reproducible.
"""

__version__ = "0.1.0"
