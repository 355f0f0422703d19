"""Reference networks, datasets, training and model files."""
