"""Few-shot fine-grained classification via bi-directional feature
reconstruction, built on a small numpy reverse-mode autodiff core."""

__version__ = "0.1.0"
