"""flowforge: rectified-flow image editing with velocity adaptation.

The engine walks a pair of noise-matched latents along a rectified-flow
schedule and moves the edited latent by the difference of the two
branch velocities.  In adapted mode the target-branch velocity is first
optimized so its high-frequency content preserves foreground objects
while its low-frequency content diversifies the background.  Velocity
fields are pluggable: closed-form analytic backends, recorded traces,
or remote servers speaking a framed JSON protocol.
"""

from .adaptation import (
    AdaptConfig,
    LearnableVelocity,
    LossBreakdown,
    LossWeights,
    adapt_velocity,
    grad_total,
    loss_bg,
    loss_div,
    loss_obj,
    total_loss,
)
from .backends import (
    AnalyticCodec,
    LinearBackend,
    LinearField,
    PointMassBackend,
    PromptPair,
    RecordingBackend,
    RemoteBackend,
    ReplayBackend,
)
from .config import (
    BackendSpec,
    RunConfig,
    build_backend,
    load_run_config,
    parse_run_config,
    save_run_config,
    serialize_run_config,
    validate_run_config,
)
from .editor import (
    EditConfig,
    StepRecord,
    euler_update,
    records_to_jsonl,
    run_driveflow,
    run_flowedit,
    velocity_difference,
)
from .errors import (
    ConfigError,
    FlowForgeError,
    InvalidArgumentError,
    NumericFailureError,
    ParseError,
    RemoteError,
    TraceMissError,
    TransportError,
)
from .grid import (
    FrequencySplit,
    GaussianKernel,
    Grid,
    blur,
    blur_adjoint,
    decompose,
    grid_combine,
    make_gaussian_kernel,
)
from .imageio import load_image, save_image
from .layout import (
    LatentMask,
    Layout,
    ObjectBox,
    complement,
    layout_from_json,
    layout_to_json,
    load_layout,
    rasterize_mask,
    save_layout,
)
from .schedule import (
    EditState,
    NoiseSource,
    TimeGrid,
    build_time_grid,
    form_target_latent,
    sample_source_latent,
)
from .trace import TraceRecord, VelocityTrace, latent_digest, quantize_f32
from .wire import (
    LoopbackServer,
    dumps_canonical,
    recv_message,
    send_message,
    tensor_from_wire,
    tensor_to_wire,
)

__version__ = "0.1.0"
