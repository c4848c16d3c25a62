"""Boundary data see gauge classes, not coefficient pairs.

A polynomial gauge moves (a, k) far away in the pairwise coefficient
distance, yet the albedo operator barely changes and the class distance
stays at quadrature level.  A genuine perturbation of a changes both.
"""

import numpy as np

from geotransport import albedo as al
from geotransport import gauge as ga
from geotransport import geometry as geo
from geotransport import transport as tr


def bump(amp, width, center=None):
    return tr.Bump(amp, center, width, 1.0, 2)


def main():
    m = geo.Manifold(geo.euclidean(2), 1.0, 1.2)
    base = tr.CoefficientPair(tr.IsotropicAttenuation(bump(0.5, 0.5)),
                              tr.IsotropicKernel(bump(0.2, 0.4), 2), "base")
    image = ga.apply_gauge(m, base, ga.make_polynomial_gauge(0.6, None, 0.4), name="gauged")
    pert = tr.perturbed_pair(base, 0.05, tr.IsotropicAttenuation(bump(1.0, 0.3, [0.2, 0.1])))

    rng = np.random.default_rng(0)
    for other in (image, pert):
        # multiple scattering omitted to keep the demo short
        eps = al.opnorm_L1(m, base, other, nsamples=8, nt=24, nw=24, multiple="omit",
                           rng=rng).epsilon
        pw, _, _ = ga.pairwise_distance(m, base, other, mode="n2")
        cd = ga.class_distance_upper(m, base, other, mode="n2")
        print(f"{other.name:>10}: opnorm {eps:.2e}  pairwise {pw:.3f}  class {cd.delta_upper:.2e}")


if __name__ == "__main__":
    main()
