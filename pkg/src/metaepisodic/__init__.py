"""Meta-episodic few-shot learning on frozen embeddings.

A small adapter over fixed features is trained with bi-level optimization:
an inner gradient step adapts to each task's support set, the outer loop
meta-updates both the adapter initialization and the inner learning rate
from query losses, and a per-episode performance memory steers task sampling
toward the worst-performing classes.
"""

from .data import EmbeddingBank, SyntheticSpec, generate, train_test_split
from .diffcore import DimensionError, NumericError, gradient, hvp
from .episodic import (
    EpisodePlan,
    PerformanceMemory,
    Task,
    TaskShape,
    initialize_episode,
    random_task_classes,
    sample_task,
    select_classes,
    update_memory,
)
from .metalearn import (
    ALGORITHMS,
    AdamState,
    EvalSummary,
    MetaGradient,
    MetaParams,
    MetricsLog,
    TaskResult,
    TrainConfig,
    adam_step,
    adapt_and_eval,
    inner_adapt,
    meta_gradient_fomaml,
    meta_gradient_maml,
    reptile_update,
    train,
)
from .model import (
    AdapterObjective,
    AdapterParams,
    Batch,
    ClassPrototypes,
    FrozenEncoder,
    accuracy_by_class,
    encode,
    forward,
)

__version__ = "0.1.0"
