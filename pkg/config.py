import os

from dotenv import load_dotenv

load_dotenv()


class Config:
    # Output settings
    OUTPUT_ROOT = os.environ.get('SPDINV_OUTPUT_ROOT') or 'runs'
    SAVE_TRAJECTORIES = int(os.environ.get('SPDINV_SAVE_TRAJECTORIES') or 1)

    # Logging and progress
    LOG_LEVEL = (os.environ.get('SPDINV_LOG_LEVEL') or 'INFO').upper()
    SHOW_PROGRESS = os.environ.get('SPDINV_SHOW_PROGRESS', 'True').lower() == 'true'

    # Trial worker threads
    WORKERS = int(os.environ.get('SPDINV_WORKERS') or 1)

    # Schedule defaults (linear beta, subsampled to the inference steps)
    NUM_TRAIN_STEPS = 1000
    BETA_START = 1e-4
    BETA_END = 2e-2
    INFERENCE_STEPS = 50

    # Inversion defaults
    MAX_ROUNDS = 25
    THRESHOLD = 5e-6
    LEARNING_RATE = 0.001
    GUIDANCE_SCALE = 1.0
    AIDI_ROUNDS = 5
    DIVERGENCE_FACTOR = 10.0
    DIVERGENCE_FLOOR = 2e-3
