# Spatial random permutations toolkit
__version__ = "1.0.0"
