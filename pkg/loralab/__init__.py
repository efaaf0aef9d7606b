"""LoRA 伪造语音检测桌面实验室

包含数值基础、玩具 Transformer 检测模型、LoRA / Adapter 适配、训练与评估、
合成数据、实验驱动和结果导出功能。
"""

from .errors import (
    LabError,
    ConfigError,
    ParseError,
    ShapeError,
    DomainError,
    ContractError
)

from .config import (
    ModelConfig,
    TrainConfig,
    DatasetSpec,
    LoRAConfig,
    AdaptationMethod,
    LabConfig,
    load_config
)

from .numerics import (
    Matrix,
    RngStream,
    matmul,
    softmax_rows,
    layer_norm_row,
    splitmix64,
    rng_uniform,
    rng_gaussian
)

from .model import (
    ModelParams,
    init_params,
    attention,
    multi_head_attention,
    forward,
    backward,
    cross_entropy,
    loss_and_grads,
    detection_scores
)

from .adaptation import (
    AdaptationState,
    lora_forward,
    lora_merge,
    instrument,
    merge_adaptation,
    count_params
)

from .checkpoint import (
    Checkpoint,
    save_checkpoint,
    load_checkpoint,
    apply_delta
)

from .training import (
    AdamState,
    Trainer,
    adam_step,
    train_epoch,
    fit,
    score_dataset,
    grad_check
)

from .evaluation import (
    TrialScore,
    EERResult,
    far_frr_at,
    compute_eer,
    read_scores,
    write_scores
)

from .synthdata import (
    Dataset,
    generate_dataset,
    crop_or_pad,
    make_task_splits,
    read_dataset,
    write_dataset
)

from .reports import (
    RunReport,
    SweepResult,
    BenchResult,
    float_footprint
)

from .experiments import (
    prepare_base,
    adapt_and_evaluate,
    run_sweep,
    run_bench
)

__all__ = [
    # 异常
    'LabError',
    'ConfigError',
    'ParseError',
    'ShapeError',
    'DomainError',
    'ContractError',

    # 配置
    'ModelConfig',
    'TrainConfig',
    'DatasetSpec',
    'LoRAConfig',
    'AdaptationMethod',
    'LabConfig',
    'load_config',

    # 数值基础
    'Matrix',
    'RngStream',
    'matmul',
    'softmax_rows',
    'layer_norm_row',
    'splitmix64',
    'rng_uniform',
    'rng_gaussian',

    # 模型
    'ModelParams',
    'init_params',
    'attention',
    'multi_head_attention',
    'forward',
    'backward',
    'cross_entropy',
    'loss_and_grads',
    'detection_scores',

    # 适配
    'AdaptationState',
    'lora_forward',
    'lora_merge',
    'instrument',
    'merge_adaptation',
    'count_params',

    # 检查点
    'Checkpoint',
    'save_checkpoint',
    'load_checkpoint',
    'apply_delta',

    # 训练
    'AdamState',
    'Trainer',
    'adam_step',
    'train_epoch',
    'fit',
    'score_dataset',
    'grad_check',

    # 评估
    'TrialScore',
    'EERResult',
    'far_frr_at',
    'compute_eer',
    'read_scores',
    'write_scores',

    # 合成数据
    'Dataset',
    'generate_dataset',
    'crop_or_pad',
    'make_task_splits',
    'read_dataset',
    'write_dataset',

    # 实验与报告
    'RunReport',
    'SweepResult',
    'BenchResult',
    'float_footprint',
    'prepare_base',
    'adapt_and_evaluate',
    'run_sweep',
    'run_bench'
]

__version__ = '1.0.0'
