"""Auto-regressive visual storytelling with context-conditioned diffusion."""

from .context import (ContextFeatures, ContextRef, ExtractionEvent,
                      concat_contexts, context_timestep, extract_context)
from .data import (RawEpisode, ReconPair, SynthSpec, dedup_frames, dtw_align,
                   erase_regions, make_recon_pair, synth_stories)
from .diffusion import (CLEAN, NoiseSchedule, add_noise, ddim_step,
                        ddim_timesteps, make_schedule, training_loss)
from .guidance import GuidanceConfig, drop_conditions, guided_eps
from .inference import (InferenceConfig, continue_story, generate_frame,
                        generate_story, sample_image, select_best)
from .metrics import (FeatureSet, frechet_distance, pair_similarity,
                      text_image_similarity, toy_embed)
from .model import (NULL_CONTEXT, NULL_TEXT, FeaturePyramid, ModelConfig,
                    StoryUNet, TextEmbedding, attention)
from .stories import Story, StoryFrame, load_corpus, save_corpus
from .training import (Checkpoint, TrainConfig, Triplet, load_checkpoint,
                       model_from_checkpoint, sample_triplet, save_checkpoint,
                       train_stage1, train_stage2)

__version__ = "0.1.0"
