"""
petdiff: CT-guided multi-dose PET denoising with a conditional diffusion model

- models / config / storage: volumes, dose levels, run configuration and file formats
- utils: Haar wavelets and image quality metrics
- network: attention blocks, wavelet fusion and the denoiser
- diffusion: noise schedules, respacing, hybrid loss and sampling
- phantom: synthetic PET/CT phantoms and dose simulation
- runners: training, evaluation and ablation
"""

__all__ = ["config", "models", "storage", "diffusion", "phantom", "network", "runners", "utils", "main"]
