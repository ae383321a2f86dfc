"""Sketches as spatiotemporal graphs: ingestion, binary corpus storage,
a hybrid local-global graph classifier with tiled exact-softmax global
attention, and the training / evaluation / benchmark harness around it."""

from .attention import (
    AttnParams,
    DenseBatch,
    InvalidTile,
    LogitStats,
    TileConfig,
    WorkspaceMeter,
    from_dense_batch,
    logit_stats,
    memeff_attention,
    naive_attention,
    to_dense_batch,
    workspace_meter,
)
from .gradcheck import GradCheckReport, ToleranceExceeded, grad_check
from .graphops import (
    ChebParams,
    EmptyGraph,
    GinParams,
    GraphTopology,
    cheb_conv,
    gin_conv,
    global_pool,
    neighbor_mean_conv,
)
from .ingest import (
    CANVAS_MAX,
    NUM_NODES,
    BudgetTooSmall,
    EmptySketch,
    MalformedJson,
    RawSketch,
    RawStroke,
    SchemaError,
    SketchGraph,
    allocate_node_budget,
    build_graph,
    load_manifest,
    normalize_canvas,
    parse_ndjson_line,
    resample_stroke,
)
from .model import (
    GraphBatch,
    ModelConfig,
    ModelParams,
    collate,
    forward,
    init_model_params,
    load_checkpoint,
    load_model_config,
    predict_topk,
    save_checkpoint,
    save_model_config,
)
from .optim import Adam, adam_step, cosine_lr
from .store import (
    ChecksumMismatch,
    CorpusHeader,
    CorpusReader,
    CorpusWriter,
    IndexOutOfRange,
    InvariantViolation,
    VersionMismatch,
    open_corpus,
    split_corpus,
    write_corpus,
)
from .tensor import (
    BatchNormState,
    NonFiniteError,
    Parameter,
    ShapeMismatch,
    Tensor,
    batch_norm,
    concat,
    cross_entropy_label_smoothing,
    dropout,
    linear,
    manual_seed,
    matmul,
    mean_over_mask,
    no_grad,
    relu,
    row_softmax,
    trap_nonfinite,
)
from .trainer import (
    MetricsReport,
    NonFiniteLoss,
    TrainConfig,
    ablate,
    bench_attention,
    evaluate,
    measure_attention_workspace,
    stability_probe,
    train,
)

__version__ = "0.1.0"
