"""
dextts - expressive diffusion acoustic model on a numpy autodiff core.
"""
__version__ = "0.1.0"
