"""Adversarial time-frequency mask training for speech enhancement.

Three networks are trained against each other: a masking enhancer, a
masking "degenerator" that deliberately targets an imperfect score, and a
convolutional predictor that regresses the normalized objective metric of a
(degraded, reference) pair.  Supporting machinery: STFT feature pipeline,
native short-time intelligibility metric, external quality-evaluator
adapters, replay-buffer training schedule, corpus tooling and a CLI.
"""

__version__ = "0.1.0"

from .data import (  # noqa: F401
    PairEntry,
    PairManifest,
    SynthConfig,
    load_manifest,
    mix_at_snr,
    sample_segments,
    synthesize_corpus,
)
from .enhance import (  # noqa: F401
    EvalReport,
    enhance_file,
    evaluate_testset,
    export_spectrograms,
)
from .metrics import (  # noqa: F401
    ExternalEvaluator,
    StoiParams,
    evaluate_pair,
    normalize,
    remove_silent_frames,
    stoi,
)
from .models import (  # noqa: F401
    MaskNet,
    MaskNetConfig,
    MetricPredictor,
    PredictorConfig,
    init_params,
    load_checkpoint,
    mask_forward,
    predict_score,
    save_checkpoint,
)
from .signal import (  # noqa: F401
    AudioSignal,
    FrameParams,
    SpectralFrames,
    apply_mask,
    compute_features,
    features_to_magnitude,
    read_wav,
    resample,
    resynthesize,
    snr_db,
    stft,
    write_wav,
)
from .training import (  # noqa: F401
    ReplayEntry,
    TrainConfig,
    Trainer,
    buffer_update,
    loss_degenerator,
    loss_discriminator,
    loss_generator,
    train,
)
