__all__ = ["metrics", "wavelet"]
