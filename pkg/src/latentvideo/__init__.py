"""Non-adversarial video synthesis from learned static/transient latents."""

__version__ = "0.1.0"
