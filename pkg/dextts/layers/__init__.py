"""Model building blocks: text encoder, aligner, style encoders, adapters, diffusion decoder."""
