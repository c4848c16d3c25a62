"""Linear transport on simple Riemannian manifolds."""
