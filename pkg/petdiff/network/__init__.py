"""
Conditional denoising network

- attention: squeeze-excitation gates and dose-adaptive attention (DAA)
- hwa: CT-guided high-frequency wavelet attention
- denoiser: the PET/CT encoder-decoder that predicts noise and variance weights
"""

__all__ = ["attention", "hwa", "denoiser"]
