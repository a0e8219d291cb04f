"""Source-free image translation: visualize what a domain-adapted classifier
learned by translating target images into source-style images, guided only by
the source and target models."""

__version__ = "0.1.0"
