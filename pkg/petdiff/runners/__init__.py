"""
Runs built on the petdiff library

Hierarchy:
- data: normalisation, volume cache and the deterministic crop sampler
- trainer: hybrid-loss training with cosine-annealed AdamW and checkpoints
- evaluator: per-record PSNR/SSIM against SPET, aggregated per dose
- ablation: iddpm / iddpm+hwa / full trained on one data stream and compared
"""

__all__ = ["data", "trainer", "evaluator", "ablation"]
