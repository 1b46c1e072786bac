"""2D EIT electrode-position optimization toolkit.

Forward modeling with the complete electrode model, training-data
generation over randomized layouts, a feed-forward surrogate predicting
optimized electrode positions, independent layout-quality metrics, and
absolute-imaging reconstruction.
"""

__version__ = "0.1.0"

from .geometry import (  # noqa: F401
    ElectrodeLayout,
    PlacementError,
    PolygonDomain,
    place_random_electrodes,
    rectangle_domain,
    right_triangle_domain,
    square_domain,
    uniform_layout,
)
from .mesh import (  # noqa: F401
    InterpolationError,
    MeshError,
    TriangularMesh,
    generate_mesh,
    interpolate_field,
    reference_mesh,
)
from .fem import (  # noqa: F401
    ContactImpedances,
    FEMError,
    ForwardSolution,
    StimulationProtocol,
    adjacent_protocol,
    assemble_system,
    condition_number,
    forward_with_jacobian,
    hessian,
    jacobian,
    solve_forward,
)
from .sampler import (  # noqa: F401
    ConductivitySample,
    SamplerError,
    SmoothnessPrior,
    build_covariance,
    draw_samples,
    ellipsoid_target,
)
from .dataset import (  # noqa: F401
    DatasetError,
    ObjectiveVector,
    TrainingSet,
    build_training_set,
    compute_objective,
    one_step_gauss_newton,
)
from .network import (  # noqa: F401
    NetworkArchitecture,
    TrainConfig,
    TrainedNetwork,
    TrainingError,
    huang_layer_sizes,
    optimize_layout,
    predict,
    train,
)
from .metrics import (  # noqa: F401
    compare_layouts,
    distinguishability,
    mean_condition_numbers,
    mean_modeling_error,
)
from .recon import (  # noqa: F401
    NoiseModel,
    ReconOptions,
    ReconstructionResult,
    add_noise,
    best_homogeneous,
    reconstruct,
    reconstruction_study,
    rmse,
)
from .config import ConfigError, PipelineConfig, preset_config  # noqa: F401
