"""Click-driven interactive image segmentation at desk scale.

A coarse-to-fine cascade re-estimates the user's region of interest on
every click, sparse graph blocks propagate click features to all pixels in
O(M*N), a simulated annotator drives NoC/NoF evaluation, and an HTTP
service exposes live click-to-segment sessions.

Array conventions: images are (3, H, W) float64 in [0, 1]; probability
maps are (H, W) float64 in (0, 1); binary masks are (H, W) bool.
"""

from .autodiff import (
    AdamState, Tape, Tensor, adam_step, backward, bilinear_upsample, conv2d,
    load_checkpoint, save_checkpoint,
)
from .cascade import (
    CascadeConfig, SessionState, ZoomRegion, adaptive_box, interactive_step,
    remap_to_full, zoom_in,
)
from .clicks import (
    Click, GuidanceMaps, encode_clicks, error_regions, map_clicks_to_crop,
    simulate_next_click,
)
from .data import SceneConfig, SyntheticScene, build_dataset, generate_scene
from .graph import (
    ClickIndexSet, HsgmParams, SgmParams, benchmark_scaling,
    dense_nonlocal_oracle, hsgm_forward, sgm_attention, sgm_forward,
)
from .model import (
    ArchConfig, EncodedInput, ModelParams, forward, init_params, nfl_loss,
)

__version__ = "0.1.0"
