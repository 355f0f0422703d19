"""Image-set synthesis by batch-norm statistics matching."""
