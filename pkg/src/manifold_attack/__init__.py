"""AU-conditioned adversarial manifold attacks on face recognition, desk scale."""

__version__ = "0.1.0"
