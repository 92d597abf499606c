"""Paired RGB-to-NIR/LWIR image translation.

Training, inference, and evaluation for a residual encoder-bottleneck-decoder
generator that injects frozen vision-backbone features through cross-attention,
trained against multi-scale patch discriminators with adversarial,
feature-matching, and SSIM objectives.
"""

__version__ = "0.1.0"
