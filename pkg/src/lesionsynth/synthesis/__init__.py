from .losses import (abnormality_mask_loss, critic_loss, cycle_loss, gen_adv_loss, gradient_penalty,
                     identity_loss, l1, wasserstein_term)
from .networks import Critic, DiscriminatorConfig, Generator, GeneratorConfig
from .training import (LossWeights, OptimizerConfig, SynthModel, TrainingDivergedError, hph_step,
                       load_checkpoint, php_step, save_checkpoint, synthesize_healthy,
                       synthesize_pathological, train)
