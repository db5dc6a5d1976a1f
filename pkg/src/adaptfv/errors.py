"""Exception types shared across the package."""


class AdaptFVError(Exception):
    """Base class for all package-specific errors."""


# mesh
class DegenerateCell(AdaptFVError):
    """Cell with vanishing (or negative, after normalization) area."""


class NonManifold(AdaptFVError):
    """A face is referenced by more than two cells."""


class NotAdmissible(AdaptFVError):
    """Two-point admissibility violated (zero distance or non-orthogonality)."""


class NotStarShaped(AdaptFVError):
    """Polygonal cell is not star-shaped with respect to its barycenter."""


class RefinementLimit(AdaptFVError):
    """Refinement closure would cascade beyond the configured depth."""


class MeshFormatError(AdaptFVError):
    """Malformed mesh2d text input."""


# localmat
class SingularWeight(AdaptFVError):
    """Diffusion weight is not symmetric positive definite."""


class SingularLocalSaddle(AdaptFVError):
    """Local mixed saddle-point matrix is singular (invalid submesh)."""


class UnsupportedDegree(AdaptFVError):
    """Quadrature degree outside the supported range."""


# sparse_linalg
class Breakdown(AdaptFVError):
    """Krylov iteration hit a zero denominator."""


class Singular(AdaptFVError):
    """Dense matrix is singular to working precision."""


# scheme
class TensorNotSupported(AdaptFVError):
    """Full diffusion tensors are not supported by the two-point scheme."""


class SingularElementMatrix(AdaptFVError):
    """Cell element matrix passed to hybridization is singular."""


class JacobianSingular(AdaptFVError):
    """Newton Jacobian could not be solved; caller may fall back to fixed point."""


class MissingExtendedIterate(AdaptFVError):
    """Solver snapshot lacks the extra-step iterate needed for error components."""


# estimate
class NotEquilibrated(AdaptFVError):
    """Flux reconstruction divergence does not match the mean source."""


class NegativeEstimate(AdaptFVError):
    """Matrix estimator returned negativity beyond the round-off clamp."""


class MissingConfig(AdaptFVError):
    """Estimator configuration is incomplete for the requested path."""


class ZeroError(AdaptFVError):
    """Effectivity index requested for an exactly zero error."""


# reconstruct
class MultipliersUnavailable(AdaptFVError):
    """Hybrid point values requested for a scheme without face multipliers."""


# adaptive
class MaxIterations(AdaptFVError):
    """Iteration loop exceeded its configured maximum."""


class SolverBreakdown(AdaptFVError):
    """Algebraic solver broke down and could not be restarted."""


# problems
class UnknownProblem(AdaptFVError):
    """Requested manufactured problem is not in the catalog."""


class OutsideDomain(AdaptFVError):
    """Evaluation point lies outside the problem domain."""
