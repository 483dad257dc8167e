"""Desk-scale view-conditioned diffusion transformer in plain numpy.

Every operation ships its own analytic reverse-mode gradient (no autodiff
framework); correctness is pinned by central finite differences in the test
suite. Parameters live in a flat name -> array dict so checkpointing and
weak-to-strong transfer can address them individually.
"""

from xraynvs.nn.ops import (
    attention,
    gelu,
    interpolate_pos_embed,
    layer_norm,
    patchify,
    sincos_pos_embed,
    silu,
    timestep_embedding,
    unpatchify,
)
from xraynvs.nn.model import (
    ModelConfig,
    adaln_single,
    encode_condition,
    init_params,
    load_checkpoint,
    make_denoiser,
    save_checkpoint,
    vcdit_backward,
    vcdit_forward,
)
