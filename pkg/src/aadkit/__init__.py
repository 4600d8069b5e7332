"""Auditory attention decoding toolkit.

Signal preprocessing, linear decoders (ridge / CCA+LDA), a causal-anticausal
dilated temporal convolutional classifier, a synthetic cocktail-party data
generator, and a cross-validation experiment harness.
"""

__version__ = "0.1.0"
