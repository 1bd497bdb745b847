from . import world
from .world import (
    ACTION_NAMES, HEIGHT, HORIZON, N_ACTIONS, OBS_VOCAB_SIZE, INSTR_VOCAB_SIZE,
    MAX_INSTR_LEN, WIDTH, GridState, proprio_state, render_observation, step,
)
from .tasks import TASK_IDS, reset
from .expert import EpisodeComplete, scripted_expert_action
from .demos import (
    Trajectory, chunk_aligned_indices, chunk_at, episode_seed,
    generate_demonstrations, load_demo_file, manifest_path, rollout_expert,
)
from .ceiling import CeilingReport, frame_key, single_frame_ceiling
