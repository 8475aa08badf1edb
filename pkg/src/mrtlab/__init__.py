"""mrtlab: a numerical laboratory for stationary linear transport on
magnetic Riemannian disks and balls.

The lab solves the forward boundary value problem for the stationary
linear transport equation on the unit ball equipped with a conformally
flat metric and a magnetic field, assembles the boundary-to-boundary
albedo operator, and runs reconstruction, gauge-equivalence and
stability experiments against it.

Subpackage map:

    geometry     magnetic systems, geodesic tracing, exit times,
                 parallel transport, exponential maps, simplicity checks
    phase_space  discretization of the sphere bundle and its boundary,
                 quadrature, the phase-space/boundary integral identity,
                 mollifier families
    transport    admissible coefficient pairs, attenuation, the integral
                 operators of the forward problem, Neumann/direct solvers
    albedo       albedo matrices, ballistic/single/multiple scattering
                 kernel split, L1 operator norms
    inversion    ray-transform extraction and regularized inversion,
                 scattering-kernel recovery
    gauge        gauge transformations, trial/normalized gauges, class
                 distance, symmetry-based uniqueness checks
    stability    pre-estimates and the stability experiment
    scenario     declarative YAML scenario files
    cli          command-line front end
"""

__version__ = "0.1.0"

FORMAT_VERSION = 1
