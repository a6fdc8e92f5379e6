"""Layout-to-image GAN toolkit.

A small, CPU-only stack for synthesizing images from labeled bounding-box
layouts: a numpy-backed reverse-mode autodiff core, a generator/discriminator
pair built around instance-sensitive, layout-aware feature normalization, a
procedural shapes dataset, training/evaluation tooling, and an HTTP inference
service for interactive layout editing.
"""

__version__ = "0.1.0"
