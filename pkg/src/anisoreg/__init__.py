"""Anisotropic Tikhonov regularization with bilevel learning of the orientation field and weight."""
