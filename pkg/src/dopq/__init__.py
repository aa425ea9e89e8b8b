"""Desk-scale post-training quantization lab for toy Vision Transformers.

Quantizers (uniform, Log2/Log-sqrt2, SULQ, TanQ), a fixed-point CORDIC
kernel, channel-wise to layer-wise scale reparameterization with median
scale selection, and a block-wise reconstruction pipeline.
"""

__version__ = "0.1.0"
