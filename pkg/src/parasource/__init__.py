"""Source reconstruction for a(x) u_t - lap u = F(x) G(x, t) from top-boundary data."""

__version__ = "0.1.0"
