"""Joint camera-pose prediction and radiance-field reconstruction trained by denoising diffusion."""

__version__ = "0.1.0"
