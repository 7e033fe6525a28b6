"""Scale-wise autoregressive super-resolution, CPU-only and desk-sized.

The package is organized around one pipeline:

  data       procedural corpus, degradation, metrics, image IO
  numerics   numpy reverse-mode autodiff, counter-based RNG, AdamW
  resample   bilinear / bicubic / area resampling shared by everything
  tokenizer  multi-scale residual vector quantizer around a small conv VAE
  sarope     scale-aligned rotary position embedding
  arm        block-causal next-scale transformer with KV-cached decoding
  refiner    per-site diffusion MLP for the continuous quantization residual
  guidance   image-based classifier-free guidance (combiner + ramp)
  pipeline   training stages, checkpointing, evaluation, benchmarking
  cli        command-line entry points
"""

__version__ = "0.1.0"
