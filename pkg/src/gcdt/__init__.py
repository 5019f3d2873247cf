"""GC-DT: Gumbel search over a learned latent model for feeder volt-var control."""

__version__ = "0.1.0"
